"""
Synthetic slides with planted tumor blobs and fixation-based navigation annotations.

The highest level is painted first; every lower level is its exact block mean. Navigation annotations
are rendered per level from sparse fixation points (mostly on tumor, some off tumor), smoothed and
max-normalized, so they are as sparse and partial as real eye-tracking heatmaps.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import SynthConfigError
from .pyramid import MagnificationPyramid, SlideLabel, build_levels
from .resampling import block_mean

logger = logging.getLogger(__name__)

THUMBNAIL_NAME = 'thumbnail'

# Per class: RGB tint of the tumor, stripe period (px), stripe angle (rad), texture amplitude
CLASS_TEXTURES = {
    SlideLabel.NEVUS: ((150, 100, 80), 14.0, 0.3, 0.18),
    SlideLabel.BCC: ((95, 70, 160), 6.0, 1.2, 0.25),
    SlideLabel.MELANOMA: ((70, 45, 40), 22.0, 2.1, 0.12),
    SlideLabel.SCC: ((220, 120, 150), 9.0, 0.8, 0.30),
}
BACKGROUND_COLOR = (236, 205, 220)


@dataclass
class SynthConfig:
    level_count: int = 5
    base_size: int = 1024
    top_magnification: float = 10.0
    level_factor: int = 2
    label: str = None
    blob_count: tuple = (1, 4)
    tumor_fraction: tuple = (0.02, 0.3)
    blob_axes: tuple = (0.05, 0.18)
    fixations_per_level: tuple = (12, 30)
    outside_fixation_probability: float = 0.1
    nav_sigma: float = 0.02
    max_attempts: int = 100
    section: str = field(default='pyramid', repr=False)

    def validate(self):
        if self.level_count < 1:
            raise SynthConfigError(f'{self.section}.level_count', 'at least one level is required')
        if self.level_factor < 2:
            raise SynthConfigError(f'{self.section}.level_factor', 'adjacent levels must differ by a factor >= 2')
        total_factor = self.level_factor ** (self.level_count - 1)
        if self.base_size <= 0 or self.base_size % total_factor:
            raise SynthConfigError(
                f'{self.section}.base_size',
                f'{self.base_size} is not divisible by the inter-level factor {total_factor}'
            )
        low, high = self.blob_count
        if low < 0 or high < low:
            raise SynthConfigError(f'{self.section}.blob_count', f'invalid range {self.blob_count}')
        low, high = self.tumor_fraction
        if not 0 <= low <= high <= 1:
            raise SynthConfigError(f'{self.section}.tumor_fraction', f'invalid range {self.tumor_fraction}')
        if self.label is not None:
            try:
                SlideLabel(self.label)
            except ValueError:
                raise SynthConfigError(f'{self.section}.label', f'unknown class {self.label!r}')

    def magnifications(self):
        """
        Returns (magnifications, names): the named levels double from 1.25x up to the top magnification,
        and the thumbnail sits one more factor below the smallest named level
        """
        top = float(self.top_magnification)
        mags = [top / self.level_factor ** (self.level_count - 1 - i) for i in range(self.level_count)]
        names = [f'{m:g}x' for m in mags]
        if self.level_count > 1:
            names[0] = THUMBNAIL_NAME
        return mags, names


def _ellipse_mask(shape, cx, cy, a, b, theta):
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    reach = max(a, b)
    x0, x1 = max(int(cx - reach), 0), min(int(np.ceil(cx + reach)) + 1, w)
    y0, y1 = max(int(cy - reach), 0), min(int(np.ceil(cy + reach)) + 1, h)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask[y0:y1, x0:x1] = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def _plant_blobs(rng, config, size):
    low, high = config.blob_count
    count = int(rng.integers(low, high + 1))
    if count == 0:
        return [], np.zeros((size, size), dtype=bool)

    frac_low, frac_high = config.tumor_fraction
    for attempt in range(config.max_attempts):
        blobs = []
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(count):
            cx, cy = rng.uniform(0.15, 0.85, size=2) * size
            a, b = rng.uniform(*config.blob_axes, size=2) * size
            theta = rng.uniform(0, np.pi)
            blobs.append((cx, cy, a, b, theta))
            mask |= _ellipse_mask(mask.shape, cx, cy, a, b, theta)
        if frac_low <= mask.mean() <= frac_high:
            logger.debug('Planted %d blobs after %d attempts (tumor fraction %.3f)', count, attempt + 1, mask.mean())
            return blobs, mask
    raise SynthConfigError(
        f'{config.section}.tumor_fraction',
        f'could not plant {count} blobs within {config.tumor_fraction} after {config.max_attempts} attempts'
    )


def _paint_top_level(rng, label, mask):
    size = mask.shape[0]
    coarse = ndimage.gaussian_filter(rng.standard_normal((size // 8 + 1, size // 8 + 1)), sigma=2.0)
    coarse = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:size, :size]
    background = np.asarray(BACKGROUND_COLOR, dtype=np.float32) * (1 + 0.06 * coarse[..., None]).astype(np.float32)

    tint, period, angle, amplitude = CLASS_TEXTURES[label]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    stripes = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
    tumor = np.asarray(tint, dtype=np.float32) * (1 + amplitude * stripes[..., None])

    raster = np.where(mask[..., None], tumor, background)
    raster += rng.normal(0, 6, size=raster.shape).astype(np.float32)
    return np.clip(raster, 0, 255)


def _sample_fixation(rng, blobs, mask, outside_probability):
    """
    Returns (x, y) in top-level pixels: inside a random blob, or (with outside_probability, and always
    when there are no blobs) uniformly among pixels outside every blob
    """
    size = mask.shape[0]
    if blobs and rng.random() >= outside_probability:
        cx, cy, a, b, theta = blobs[int(rng.integers(len(blobs)))]
        r, phi = np.sqrt(rng.random()), rng.uniform(0, 2 * np.pi)
        u, v = r * a * np.cos(phi), r * b * np.sin(phi)
        x = cx + u * np.cos(theta) - v * np.sin(theta)
        y = cy + u * np.sin(theta) + v * np.cos(theta)
        return float(np.clip(x, 0, size - 1)), float(np.clip(y, 0, size - 1))
    for _ in range(100):
        x, y = rng.uniform(0, size, size=2)
        if not mask[int(y), int(x)]:
            break
    return float(x), float(y)


def _render_nav(rng, config, level, blobs, mask):
    low, high = config.fixations_per_level
    heat = np.zeros(level.shape, dtype=np.float64)
    for _ in range(int(rng.integers(low, high + 1))):
        x, y = _sample_fixation(rng, blobs, mask, config.outside_fixation_probability)
        col = min(int(x / float(level.scale_to_base)), level.width - 1)
        row = min(int(y / float(level.scale_to_base)), level.height - 1)
        heat[row, col] += 1.0
    heat = ndimage.gaussian_filter(heat, sigma=max(1.0, config.nav_sigma * level.width))
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return np.clip(heat, 0.0, 1.0)


def generate_synthetic_slide(seed, config, slide_id=None):
    """
    Deterministic for a fixed (seed, config): same seed, same bytes
    """
    config.validate()
    rng = np.random.default_rng(seed)
    label = SlideLabel(config.label) if config.label else SlideLabel.from_index(int(rng.integers(len(SlideLabel))))
    size = config.base_size

    magnifications, names = config.magnifications()
    levels = build_levels(size, size, magnifications, names)

    blobs, mask = _plant_blobs(rng, config, size)
    top = _paint_top_level(rng, label, mask)
    rasters = []
    for level in levels:
        factor = int(level.scale_to_base)
        level_raster = top if factor == 1 else block_mean(top, factor)
        rasters.append(np.round(level_raster).astype(np.uint8))

    nav = [_render_nav(rng, config, level, blobs, mask) for level in levels]

    slide_id = slide_id or f'synth-{seed:06d}'
    logger.debug('Generated %s (%s, %d blobs, tumor fraction %.3f)', slide_id, label.value, len(blobs), mask.mean())
    return MagnificationPyramid(
        slide_id=slide_id,
        levels=levels,
        rasters=rasters,
        nav_annotations=nav,
        tumor_mask=mask.astype(np.uint8),
        label=label,
    )
