"""
Turning navigation results and patch budgets into classifier bags.

A region's feature is the mean of the encoder tokens whose grid cells overlap the region on its level.
Budget bags draw from the highest level's token cells, scored by the mean heatmap value over each cell.
"""
import logging
import math

import numpy as np
import torch

from encoder.encoders import render_level
from slides.resampling import block_mean

from .abmil import Bag
from .exceptions import BudgetError, EmptyBagError

logger = logging.getLogger(__name__)

SAMPLING_MODES = ('topk', 'random')


def _cell_span(start, length, cell, cells):
    first = int(math.floor(start / cell))
    last = int(math.ceil((start + length) / cell))
    return max(0, min(first, cells - 1)), max(1, min(last, cells))


def region_feature(token_grid, region):
    grid_h, grid_w = token_grid.grid_shape
    cell_h, cell_w = token_grid.cell_size
    r0, r1 = _cell_span(region.y, region.h, cell_h, grid_h)
    c0, c1 = _cell_span(region.x, region.w, cell_w, grid_w)
    return token_grid.tokens[r0:r1, c0:c1].reshape(-1, token_grid.dim).mean(dim=0)


def build_bag(token_grids, regions, label=None, slide_id=''):
    """
    One instance per region, in the order the regions were selected; regions may mix levels
    """
    if not regions:
        raise EmptyBagError(f'No regions to build a bag for {slide_id!r}')
    features = [region_feature(token_grids[region.level_index], region) for region in regions]
    return Bag(instances=torch.stack(features), label=label, slide_id=slide_id)


def cell_scores(heatmap, grid_shape):
    values = heatmap.numpy() if hasattr(heatmap, 'level_index') else np.asarray(heatmap, dtype=np.float64)
    height, width = values.shape
    return block_mean(values, height // grid_shape[0], width // grid_shape[1])


def tissue_cells(pyramid, level_index, grid_shape, threshold):
    """
    Cells whose mean rendered intensity is below threshold (background is bright); None keeps every cell
    """
    if threshold is None:
        return np.ones(grid_shape, dtype=bool)
    rendered = render_level(pyramid, level_index).mean(axis=2)
    height, width = rendered.shape
    return block_mean(rendered, height // grid_shape[0], width // grid_shape[1]) < threshold


def budget_size(fraction, patch_count):
    if not 0 < fraction <= 1:
        raise BudgetError(f'classify.budgets: {fraction} is outside (0, 1]')
    return int(math.ceil(round(fraction * patch_count, 9)))


def select_budget_cells(scores, fraction, mode, rng, allowed=None):
    """
    Flat indices of the budget cells: the best-scoring ones (ties by index) or a uniform random sample,
    returned in ascending index order
    """
    if mode not in SAMPLING_MODES:
        raise BudgetError(f'classify.sampling: unknown mode {mode!r}')
    flat_scores = np.asarray(scores, dtype=np.float64).ravel()
    candidates = np.arange(flat_scores.size)
    if allowed is not None:
        candidates = candidates[np.asarray(allowed).ravel()]
    count = budget_size(fraction, len(candidates))
    if count == 0:
        return candidates[:0]
    if mode == 'topk':
        order = np.lexsort((candidates, -flat_scores[candidates]))
        chosen = candidates[order[:count]]
    else:
        chosen = rng.choice(candidates, size=count, replace=False)
    return np.sort(chosen)


def budget_bag(token_grid, heatmap, fraction, mode, rng, allowed=None, label=None, slide_id=''):
    scores = cell_scores(heatmap, token_grid.grid_shape)
    chosen = select_budget_cells(scores, fraction, mode, rng, allowed=allowed)
    if len(chosen) == 0:
        logger.warning('Budget %.2f leaves no patches for %s', fraction, slide_id)
        return None
    instances = token_grid.flat()[torch.from_numpy(chosen)]
    return Bag(instances=instances, label=label, slide_id=slide_id)
