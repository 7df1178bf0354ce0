"""
Pyramid directory format.

    manifest.json   {slide_id, label, levels: [{index, name, magnification, width, height, raster, nav}], tumor_mask}
    level_<m>.png   8-bit RGB raster
    nav_<m>.png     16-bit grayscale, value / 65535 is the annotation
    tumor.png       8-bit grayscale, 0 or 255, at the highest level
"""
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DimensionMismatchError, ManifestMissingError, PyramidValidationError, ValueRangeError
from .pyramid import MagnificationLevel, MagnificationPyramid, as_fraction

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
NAV_SCALE = 65535


def _write_png(path, array):
    Image.fromarray(array).save(path, format='PNG')


def save_pyramid(pyramid, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    levels = []
    for level, raster in zip(pyramid.levels, pyramid.rasters):
        raster_name = f'level_{level.index}.png'
        _write_png(path / raster_name, np.ascontiguousarray(raster))
        nav_name = None
        if pyramid.nav_annotations is not None:
            nav_name = f'nav_{level.index}.png'
            quantized = np.round(pyramid.nav_annotations[level.index] * NAV_SCALE).astype(np.uint16)
            _write_png(path / nav_name, quantized)
        levels.append({
            'index': level.index,
            'name': level.name,
            'magnification': float(level.magnification),
            'width': level.width,
            'height': level.height,
            'raster': raster_name,
            'nav': nav_name,
        })

    tumor_name = None
    if pyramid.tumor_mask is not None:
        tumor_name = 'tumor.png'
        _write_png(path / tumor_name, (pyramid.tumor_mask * 255).astype(np.uint8))

    manifest = {
        'slide_id': pyramid.slide_id,
        'label': pyramid.label.value if pyramid.label else None,
        'levels': levels,
        'tumor_mask': tumor_name,
    }
    with open(path / MANIFEST_NAME, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.debug('Saved pyramid %s to %s', pyramid.slide_id, path)


def _read_png(path, expected_shape, what):
    if not path.exists():
        raise PyramidValidationError(f'Missing {what} file {path}')
    with Image.open(path) as image:
        array = np.array(image)
    if array.shape[:2] != expected_shape:
        raise DimensionMismatchError(
            f'{path.name}: {what} is {array.shape[1]}x{array.shape[0]}, '
            f'manifest says {expected_shape[1]}x{expected_shape[0]}'
        )
    return array


def load_pyramid(path):
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestMissingError(f'No {MANIFEST_NAME} in {path}')
    with open(manifest_path) as f:
        manifest = json.load(f)

    entries = sorted(manifest['levels'], key=lambda entry: entry['index'])
    if not entries:
        raise PyramidValidationError(f'{manifest_path}: no levels listed')
    top_magnification = as_fraction(entries[-1]['magnification'])

    levels, rasters, navs = [], [], []
    for position, entry in enumerate(entries):
        if entry['index'] != position:
            raise PyramidValidationError(f'{manifest_path}: level indices must be 0..{len(entries) - 1}')
        magnification = as_fraction(entry['magnification'])
        if magnification <= 0:
            raise ValueRangeError(f'{manifest_path}: level {position} magnification must be positive')
        level = MagnificationLevel(
            index=position,
            magnification=magnification,
            width=int(entry['width']),
            height=int(entry['height']),
            scale_to_base=top_magnification / magnification,
            name=entry.get('name') or f'{float(magnification):g}x',
        )
        raster = _read_png(path / entry['raster'], level.shape, 'raster')
        if raster.ndim != 3 or raster.shape[2] != 3 or raster.dtype != np.uint8:
            raise PyramidValidationError(f'{entry["raster"]}: rasters must be 8-bit RGB')
        levels.append(level)
        rasters.append(raster)
        if entry.get('nav'):
            nav = _read_png(path / entry['nav'], level.shape, 'navigation annotation')
            if nav.max(initial=0) > NAV_SCALE or nav.min(initial=0) < 0:
                raise ValueRangeError(f'{entry["nav"]}: values outside the 16-bit range')
            navs.append(nav.astype(np.float64) / NAV_SCALE)

    if navs and len(navs) != len(levels):
        raise PyramidValidationError(f'{manifest_path}: navigation annotations must be given for every level or none')

    tumor_mask = None
    if manifest.get('tumor_mask'):
        tumor = _read_png(path / manifest['tumor_mask'], levels[-1].shape, 'tumor mask')
        if tumor.ndim != 2 or not np.isin(tumor, (0, 255)).all():
            raise ValueRangeError(f'{manifest["tumor_mask"]}: tumor mask values must be 0 or 255')
        tumor_mask = (tumor // 255).astype(np.uint8)

    return MagnificationPyramid(
        slide_id=manifest['slide_id'],
        levels=levels,
        rasters=rasters,
        nav_annotations=navs or None,
        tumor_mask=tumor_mask,
        label=manifest.get('label'),
    )
