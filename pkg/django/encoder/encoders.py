"""
Patch encoders: level rendering at the model input size and tokenization into a TokenGrid.

Encoders are frozen. Every token leaves this module detached from any autograd graph, so
no trainable parameter downstream can alias encoder internals.
"""
import functools
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from django.conf import settings
from django.utils.module_loading import import_string

from core.hashing import content_hash
from slides.resampling import area_resample

from .exceptions import EncoderBackendError, EncoderSpecError

logger = logging.getLogger(__name__)

INPUT_SIZE = 256


@dataclass(frozen=True)
class EncoderSpec:
    patch_size: int = 16
    token_dim: int = 32
    kind: str = 'toy'
    seed: int = 0
    input_size: int = INPUT_SIZE

    def validate(self):
        if self.patch_size <= 0 or self.input_size % self.patch_size:
            raise EncoderSpecError(f'encoder.patch_size: {self.input_size} is not divisible by {self.patch_size}')
        if self.token_dim <= 0:
            raise EncoderSpecError('encoder.token_dim: must be positive')
        if self.kind not in settings.NAVIGATOR_ENCODER_FACTORIES:
            raise EncoderSpecError(f'encoder.kind: no encoder factory registered for {self.kind!r}')

    @property
    def grid_size(self):
        return self.input_size // self.patch_size

    @property
    def token_count(self):
        return self.grid_size ** 2

    def spec_hash(self):
        return content_hash(asdict(self))


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """
    Patch tokens X^m on a (G_h, G_w) grid; cell_size is the (height, width) of one cell in level pixels
    """
    tokens: torch.Tensor
    level_index: int
    cell_size: tuple = (1.0, 1.0)

    @property
    def grid_shape(self):
        return tuple(self.tokens.shape[:2])

    @property
    def dim(self):
        return self.tokens.shape[2]

    def flat(self):
        return self.tokens.reshape(-1, self.dim)

    def with_tokens(self, tokens):
        return TokenGrid(tokens=tokens, level_index=self.level_index, cell_size=self.cell_size)


class ToyEncoder:
    """
    A seeded random linear projection of each flattened patch, followed by per-token standardization.
    Stands in for a frozen pathology foundation model.
    """

    def __init__(self, spec):
        self.spec = spec
        in_features = 3 * spec.patch_size ** 2
        generator = torch.Generator().manual_seed(spec.seed)
        projection = torch.randn(in_features, spec.token_dim, generator=generator, dtype=torch.float64)
        self.projection = projection / np.sqrt(in_features)

    def __call__(self, patches):
        flat = torch.from_numpy(np.asarray(patches, dtype=np.float64).reshape(len(patches), -1) / 255.0)
        tokens = flat @ self.projection
        centered = tokens - tokens.mean(dim=1, keepdim=True)
        return centered / torch.sqrt((centered ** 2).mean(dim=1, keepdim=True) + 1e-12)


@functools.lru_cache(maxsize=8)
def get_encoder(spec):
    spec.validate()
    factory = import_string(settings.NAVIGATOR_ENCODER_FACTORIES[spec.kind])
    logger.debug('Loaded %s encoder (patch %d, dim %d)', spec.kind, spec.patch_size, spec.token_dim)
    return factory(spec)


def render_level(pyramid, m, size=INPUT_SIZE):
    """
    The level raster area-averaged to size x size (float64, 0-255)
    """
    level = pyramid.level(m)
    return area_resample(pyramid.rasters[level.index], size, size)


def encode(image, spec, level_index=0, cell_size=(1.0, 1.0), encoder=None):
    spec.validate()
    size, patch = spec.input_size, spec.patch_size
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (size, size, 3):
        raise EncoderSpecError(f'Expected a {size}x{size}x3 rendering, got {image.shape}')

    grid = spec.grid_size
    patches = image.reshape(grid, patch, grid, patch, 3).transpose(0, 2, 1, 3, 4).reshape(-1, patch, patch, 3)
    encoder = encoder or get_encoder(spec)
    try:
        with torch.no_grad():
            tokens = encoder(patches)
    except Exception as e:
        raise EncoderBackendError(f'{spec.kind} encoder failed: {e}') from e

    if not torch.is_tensor(tokens):
        tokens = torch.from_numpy(np.asarray(tokens, dtype=np.float64))
    tokens = tokens.to(torch.float64)
    if tokens.shape != (spec.token_count, spec.token_dim):
        raise EncoderBackendError(
            f'{spec.kind} encoder returned shape {tuple(tokens.shape)}, expected ({spec.token_count}, {spec.token_dim})'
        )
    if not torch.isfinite(tokens).all():
        raise EncoderBackendError(f'{spec.kind} encoder returned non-finite tokens')
    return TokenGrid(tokens=tokens.detach().reshape(grid, grid, spec.token_dim).clone(),
                     level_index=level_index, cell_size=tuple(cell_size))


def encode_level(pyramid, m, spec, encoder=None):
    level = pyramid.level(m)
    cell_size = (level.height / spec.grid_size, level.width / spec.grid_size)
    return encode(render_level(pyramid, m, spec.input_size), spec, level_index=level.index,
                  cell_size=cell_size, encoder=encoder)


def encode_pyramid(pyramid, spec, encoder=None):
    return [encode_level(pyramid, level.index, spec, encoder=encoder) for level in pyramid.levels]
