"""
Heatmap overlays: each level's raster blended with its colour-mapped heatmap (the heatmap value is the
blend weight, so zero attention leaves the raster untouched), plus the outlines of trace regions labelled
with the step that selected them.
"""
import logging

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw, ImageFont

from slides.pyramid import map_region
from slides.resampling import area_resample

from .exceptions import OverlayLevelMismatchError

logger = logging.getLogger(__name__)

HEATMAP_COLORMAP = 'jet'
STEP_COLORMAP = 'tab10'


def blend_heatmap(raster, heatmap, colormap=HEATMAP_COLORMAP):
    values = heatmap.numpy() if hasattr(heatmap, 'level_index') else np.asarray(heatmap, dtype=np.float64)
    height, width = raster.shape[:2]
    alpha = np.clip(area_resample(values, height, width), 0.0, 1.0)[..., None]
    colours = colormaps[colormap](alpha[..., 0])[..., :3] * 255.0
    blended = raster.astype(np.float64) * (1.0 - alpha) + colours * alpha
    return np.round(blended).astype(np.uint8)


def step_colour(step):
    r, g, b, _ = colormaps[STEP_COLORMAP](step % 10)
    return int(r * 255), int(g * 255), int(b * 255)


def draw_trace(image, regions, pyramid, level_index):
    """
    Outlines every region mapped onto the level and labels it with its step; returns the labels drawn
    """
    draw = ImageDraw.Draw(image)
    font = ImageFont.load_default()
    labels = []
    for region in regions:
        if region.level_index >= len(pyramid.levels):
            raise OverlayLevelMismatchError(
                f'{pyramid.slide_id}: trace region at level {region.level_index} but the slide has '
                f'{len(pyramid.levels)} levels'
            )
        mapped = map_region(region, level_index, pyramid)
        colour = step_colour(region.step_selected)
        draw.rectangle([mapped.x, mapped.y, mapped.x + mapped.w - 1, mapped.y + mapped.h - 1], outline=colour)
        label = str(region.step_selected)
        draw.text((mapped.x + 1, mapped.y + 1), label, fill=colour, font=font)
        labels.append(label)
    return labels


def render_overlays(pyramid, heatmaps=None, regions=(), path=None):
    """
    One RGB overlay per level (level raster size); written as overlay_<m>.png when path is given.
    Returns [(image, labels)] in level order.
    """
    if heatmaps is not None and len(heatmaps) != len(pyramid.levels):
        raise OverlayLevelMismatchError(
            f'{pyramid.slide_id} has {len(pyramid.levels)} levels but {len(heatmaps)} heatmaps were given'
        )
    overlays = []
    for level in pyramid.levels:
        raster = pyramid.raster(level.index)
        if heatmaps is not None:
            raster = blend_heatmap(raster, heatmaps[level.index])
        image = Image.fromarray(np.ascontiguousarray(raster))
        labels = draw_trace(image, regions, pyramid, level.index)
        if path is not None:
            image.save(path / f'overlay_{level.index}.png', format='PNG')
        overlays.append((image, labels))
    logger.info('Rendered %d overlays for %s', len(overlays), pyramid.slide_id)
    return overlays
