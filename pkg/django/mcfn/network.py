"""
Parameters of the magnification-conditioned fusion network.

FusionNetwork holds every trainable tensor: one magnification token per level, one attention
projection set for the magnification-aware block and one for the cross-magnification block,
the three scalar gates and the convolutional decoder. The forward computation lives in fusion.py.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import McfnConfigurationError


@dataclass
class FusionConfig:
    level_count: int = 5
    token_dim: int = 32
    heads: int = 1
    window: int = 4
    cmb_global: bool = False
    use_mab: bool = True
    use_cmb_low: bool = True
    use_cmb_high: bool = True
    gate_init: float = 0.1
    grid_size: int = 16
    output_size: int = 256
    seed: int = 0

    def validate(self):
        if self.level_count < 1:
            raise McfnConfigurationError('mcfn.level_count: at least one level is required')
        if self.heads < 1 or self.token_dim % self.heads:
            raise McfnConfigurationError(f'mcfn.heads: {self.heads} does not divide token_dim {self.token_dim}')
        if not self.cmb_global and (self.window < 1 or self.grid_size % self.window):
            raise McfnConfigurationError(f'mcfn.window: {self.window} does not divide grid_size {self.grid_size}')
        ratio = self.output_size // self.grid_size
        if self.output_size % self.grid_size or ratio & (ratio - 1):
            raise McfnConfigurationError(
                f'mcfn.output_size: {self.output_size} is not a power-of-two multiple of grid_size {self.grid_size}'
            )

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Heatmap:
    """
    A per-level attention map P^m with values in [0, 1]
    """
    values: torch.Tensor
    level_index: int

    @property
    def shape(self):
        return tuple(self.values.shape)

    def numpy(self):
        return self.values.detach().cpu().numpy()


def orthogonal_init(shape, generator):
    """
    A (rows, cols) matrix with orthonormal rows or columns, drawn from generator
    """
    rows, cols = shape
    flat = torch.randn(max(rows, cols), min(rows, cols), generator=generator)
    q, r = torch.linalg.qr(flat)
    q = q * torch.sign(torch.diagonal(r))
    return q if rows >= cols else q.T


def kaiming_normal_init(shape, generator):
    fan_in = math.prod(shape[1:])
    return torch.randn(shape, generator=generator) * math.sqrt(2.0 / fan_in)


class AttentionProjections(nn.Module):
    """
    Single- or multi-head projections; layers are built uninitialised and filled from generator
    """

    def __init__(self, dim, heads=1, generator=None):
        super().__init__()
        self.heads = heads
        self.q = nn.utils.skip_init(nn.Linear, dim, dim, bias=False)
        self.k = nn.utils.skip_init(nn.Linear, dim, dim, bias=False)
        self.v = nn.utils.skip_init(nn.Linear, dim, dim, bias=False)
        self.o = nn.utils.skip_init(nn.Linear, dim, dim, bias=False)
        with torch.no_grad():
            for layer in (self.q, self.k, self.v, self.o):
                layer.weight.copy_(orthogonal_init(tuple(layer.weight.shape), generator))


def upsampling_factors(grid_size, output_size):
    """
    Splits the total upsampling (a power of two) across the two non-final decoder stages
    """
    steps = int(round(math.log2(output_size // grid_size)))
    return 2 ** math.ceil(steps / 2), 2 ** (steps // 2)


class Decoder(nn.Module):
    """
    Three 3x3 conv layers (D -> D/2 -> D/4 -> 1) without skip connections; the first two are followed by
    nearest-neighbour upsampling, the last by a sigmoid
    """

    def __init__(self, dim, grid_size=16, output_size=256, generator=None):
        super().__init__()
        hidden, narrow = max(1, dim // 2), max(1, dim // 4)
        first, second = upsampling_factors(grid_size, output_size)
        self.conv1 = nn.utils.skip_init(nn.Conv2d, dim, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.utils.skip_init(nn.Conv2d, hidden, narrow, kernel_size=3, padding=1)
        self.conv3 = nn.utils.skip_init(nn.Conv2d, narrow, 1, kernel_size=3, padding=1)
        self.up1 = nn.Upsample(scale_factor=first, mode='nearest')
        self.up2 = nn.Upsample(scale_factor=second, mode='nearest')
        self.act = nn.GELU()
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                conv.weight.copy_(kaiming_normal_init(tuple(conv.weight.shape), generator))
                conv.bias.zero_()

    def forward(self, tokens):
        # (G_h, G_w, D) -> (1, D, G_h, G_w)
        x = tokens.permute(2, 0, 1).unsqueeze(0)
        x = self.up1(self.act(self.conv1(x)))
        x = self.up2(self.act(self.conv2(x)))
        return torch.sigmoid(self.conv3(x))[0, 0]


class FusionNetwork(nn.Module):
    """
    Trainable parameters of the fusion network (float64 throughout).
    Ablated components have their gate fixed at zero and excluded from training.
    """

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        dim = config.token_dim
        generator = torch.Generator().manual_seed(config.seed)
        tokens = torch.randn(config.level_count, dim, generator=generator)
        self.magnification_tokens = nn.Parameter(tokens / np.sqrt(dim))
        self.mab = AttentionProjections(dim, config.heads, generator)
        self.cmb = AttentionProjections(dim, config.heads, generator)
        self.decoder = Decoder(dim, config.grid_size, config.output_size, generator)
        self.gamma = self._gate(config.use_mab)
        self.u = self._gate(config.use_cmb_low)
        self.w = self._gate(config.use_cmb_high)
        self.double()

    def _gate(self, enabled):
        value = self.config.gate_init if enabled else 0.0
        return nn.Parameter(torch.tensor(value, dtype=torch.float64), requires_grad=enabled)

    @property
    def level_count(self):
        return self.config.level_count

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def parameter_groups(self):
        """
        Named groups used by gradient checks and logging
        """
        return {
            'magnification_tokens': [self.magnification_tokens],
            'mab_projections': list(self.mab.parameters()),
            'cmb_projections': list(self.cmb.parameters()),
            'gamma': [self.gamma],
            'u': [self.u],
            'w': [self.w],
            'decoder': list(self.decoder.parameters()),
        }
