import logging

import numpy as np

from slides.pyramid import Region

from .exceptions import PartitionError

logger = logging.getLogger(__name__)


def _window_rectangle(row, col, cells, heatmap_shape, level):
    """
    Level-pixel rectangle under heatmap window (row, col): floor the near edge, ceil the far edge
    """
    height, width = heatmap_shape
    y0 = row * cells * level.height // height
    y1 = -(-(row + 1) * cells * level.height // height)
    x0 = col * cells * level.width // width
    x1 = -(-(col + 1) * cells * level.width // width)
    y1, x1 = max(min(y1, level.height), y0 + 1), max(min(x1, level.width), x0 + 1)
    return x0, y0, x1 - x0, y1 - y0


def _overlaps(a, b):
    return a.x < b.x + b.w and b.x < a.x + a.w and a.y < b.y + b.h and b.y < a.y + a.h


def window_scores(heatmap, region_cells):
    values = heatmap.numpy() if hasattr(heatmap, 'level_index') else heatmap
    values = np.asarray(values, dtype=np.float64)
    height, width = values.shape
    if region_cells < 1 or height % region_cells or width % region_cells:
        raise PartitionError(f'region_cells={region_cells} does not partition a {height}x{width} heatmap')
    rows, cols = height // region_cells, width // region_cells
    return values.reshape(rows, region_cells, cols, region_cells).mean(axis=(1, 3))


def select_top_regions(heatmap, k, exclusion, region_cells, level, within=None, step=0):
    """
    Top-k heatmap windows by mean attention, ties by (row, col), skipping every window whose level
    rectangle is in the exclusion set. within optionally restricts the candidates to windows
    overlapping one of the given same-level regions.
    """
    if k < 1:
        raise PartitionError(f'k must be >= 1, got {k}')
    scores = window_scores(heatmap, region_cells)
    rows, cols = np.indices(scores.shape)
    order = np.lexsort((cols.ravel(), rows.ravel(), -scores.ravel()))

    excluded = {getattr(region, 'key', region) for region in exclusion}
    shape = (scores.shape[0] * region_cells, scores.shape[1] * region_cells)
    selected = []
    for flat in order:
        row, col = divmod(int(flat), scores.shape[1])
        x, y, w, h = _window_rectangle(row, col, region_cells, shape, level)
        region = Region(level.index, x, y, w, h, score=float(scores[row, col]), step_selected=step)
        if region.key in excluded:
            continue
        if within is not None and not any(_overlaps(region, parent) for parent in within):
            continue
        selected.append(region)
        excluded.add(region.key)
        if len(selected) == k:
            break
    if len(selected) < k:
        logger.debug('Only %d of %d windows left at level %d', len(selected), k, level.index)
    return selected
