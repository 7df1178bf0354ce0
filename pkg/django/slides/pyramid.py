"""
The multi-magnification slide model: levels, pyramids, regions and cross-level coordinate mapping.

All objects are immutable after construction (arrays are flagged read-only) so they can be shared
between parallel workers without copying.
"""
import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction

import numpy as np

from .exceptions import DimensionMismatchError, LevelNotFoundError, PyramidValidationError, ValueRangeError


class SlideLabel(str, Enum):
    NEVUS = 'nevus'
    BCC = 'BCC'
    MELANOMA = 'melanoma'
    SCC = 'SCC'

    @property
    def index(self):
        return list(SlideLabel).index(self)

    @classmethod
    def from_index(cls, index):
        return list(cls)[index]


def as_fraction(value):
    """
    Converts a magnification given as int, float or str into an exact Fraction (1.25 -> 5/4)
    """
    if isinstance(value, Fraction):
        return value
    return Fraction(str(value))


def format_magnification(magnification):
    return f'{float(magnification):g}x'


@dataclass(frozen=True)
class MagnificationLevel:
    index: int
    magnification: Fraction
    width: int
    height: int
    scale_to_base: Fraction
    name: str = ''

    @property
    def shape(self):
        return (self.height, self.width)


def build_levels(base_width, base_height, magnifications, names=None):
    """
    Builds the level list for a pyramid whose highest level (the last magnification) is base_width x base_height
    """
    magnifications = [as_fraction(m) for m in magnifications]
    top = magnifications[-1]
    levels = []
    for index, magnification in enumerate(magnifications):
        scale = top / magnification
        levels.append(MagnificationLevel(
            index=index,
            magnification=magnification,
            width=max(1, round(base_width / scale)),
            height=max(1, round(base_height / scale)),
            scale_to_base=scale,
            name=names[index] if names else format_magnification(magnification),
        ))
    return tuple(levels)


@dataclass(frozen=True)
class Region:
    level_index: int
    x: int
    y: int
    w: int
    h: int
    score: float = 0.0
    step_selected: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0 or self.x < 0 or self.y < 0:
            raise ValueRangeError(f'Invalid region rectangle {self.key}')

    @property
    def key(self):
        """
        Identity of the rectangle, ignoring score and step (used for exclusion sets)
        """
        return (self.level_index, self.x, self.y, self.w, self.h)

    def to_dict(self):
        return {
            'level': self.level_index,
            'x': self.x,
            'y': self.y,
            'w': self.w,
            'h': self.h,
            'score': self.score,
        }

    @classmethod
    def from_dict(cls, data, step_selected=0):
        return cls(level_index=data['level'], x=data['x'], y=data['y'], w=data['w'], h=data['h'],
                   score=data.get('score', 0.0), step_selected=step_selected)


def _read_only(array):
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class MagnificationPyramid:
    slide_id: str
    levels: tuple
    rasters: tuple
    nav_annotations: tuple = None
    tumor_mask: np.ndarray = None
    label: SlideLabel = None

    def __post_init__(self):
        object.__setattr__(self, 'levels', tuple(self.levels))
        object.__setattr__(self, 'rasters', tuple(_read_only(r) for r in self.rasters))
        if self.nav_annotations is not None:
            object.__setattr__(self, 'nav_annotations', tuple(_read_only(n) for n in self.nav_annotations))
        if self.tumor_mask is not None:
            object.__setattr__(self, 'tumor_mask', _read_only(self.tumor_mask))
        if self.label is not None:
            object.__setattr__(self, 'label', SlideLabel(self.label))
        self._validate()

    def _validate(self):
        if not self.levels:
            raise PyramidValidationError(f'{self.slide_id}: a pyramid needs at least one level')
        for previous, level in zip(self.levels, self.levels[1:]):
            if level.magnification <= previous.magnification:
                raise PyramidValidationError(f'{self.slide_id}: magnifications must increase with level index')
            ratio = level.magnification / previous.magnification
            for side, previous_side in ((level.width, previous.width), (level.height, previous.height)):
                if abs(previous_side * ratio - side) > 1:
                    raise DimensionMismatchError(
                        f'{self.slide_id}: level {level.index} size does not match level {previous.index} '
                        f'scaled by {ratio}'
                    )
        if len(self.rasters) != len(self.levels):
            raise DimensionMismatchError(f'{self.slide_id}: expected one raster per level')
        for level, raster in zip(self.levels, self.rasters):
            if raster.shape != (level.height, level.width, 3) or raster.dtype != np.uint8:
                raise DimensionMismatchError(
                    f'{self.slide_id}: level {level.index} raster is {raster.shape} {raster.dtype}, '
                    f'expected ({level.height}, {level.width}, 3) uint8'
                )
        if self.nav_annotations is not None:
            if len(self.nav_annotations) != len(self.levels):
                raise DimensionMismatchError(f'{self.slide_id}: navigation annotations must cover every level')
            for level, nav in zip(self.levels, self.nav_annotations):
                if nav.shape != level.shape:
                    raise DimensionMismatchError(
                        f'{self.slide_id}: level {level.index} annotation is {nav.shape}, expected {level.shape}'
                    )
                if not np.all(np.isfinite(nav)) or nav.min() < 0 or nav.max() > 1:
                    raise ValueRangeError(f'{self.slide_id}: level {level.index} annotation outside [0, 1]')
        if self.tumor_mask is not None:
            if self.tumor_mask.shape != self.top_level.shape:
                raise DimensionMismatchError(
                    f'{self.slide_id}: tumor mask is {self.tumor_mask.shape}, expected {self.top_level.shape}'
                )
            if not np.isin(self.tumor_mask, (0, 1)).all():
                raise ValueRangeError(f'{self.slide_id}: tumor mask values must be 0 or 1')

    @property
    def top_level(self):
        return self.levels[-1]

    def level(self, index):
        if not 0 <= index < len(self.levels):
            raise LevelNotFoundError(f'{self.slide_id}: level {index} does not exist')
        return self.levels[index]

    def raster(self, index):
        return self.rasters[self.level(index).index]

    def nav(self, index):
        self.level(index)
        if self.nav_annotations is None:
            return None
        return self.nav_annotations[index]

    def crop(self, region):
        raster = self.raster(region.level_index)
        return raster[region.y:region.y + region.h, region.x:region.x + region.w]


def map_region(region, target_level, pyramid):
    """
    Re-expresses a region in another level's pixel frame.
    The origin is rounded down and the far edge up, so mapping never loses area; the result is clamped to the level.
    """
    source = pyramid.level(region.level_index)
    target = pyramid.level(target_level)
    if source.index == target.index:
        return region

    ratio = target.magnification / source.magnification
    x0 = math.floor(region.x * ratio)
    y0 = math.floor(region.y * ratio)
    x1 = math.ceil((region.x + region.w) * ratio)
    y1 = math.ceil((region.y + region.h) * ratio)

    x0 = min(max(x0, 0), target.width - 1)
    y0 = min(max(y0, 0), target.height - 1)
    x1 = min(max(x1, x0 + 1), target.width)
    y1 = min(max(y1, y0 + 1), target.height)
    return replace(region, level_index=target.index, x=x0, y=y0, w=x1 - x0, h=y1 - y0)
