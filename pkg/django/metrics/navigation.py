"""
Navigation-consistency and tumour-coverage metrics between a predicted heatmap P and either the
navigation map G or the tumour mask. Every ranking breaks ties by flat cell index.
"""
import logging
import math

import numpy as np
from scipy.stats import entropy, rankdata

from slides.resampling import block_max

from .exceptions import MetricShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)


def _flat(x):
    values = x.numpy() if hasattr(x, 'level_index') else x
    return np.asarray(values, dtype=np.float64).ravel()


def _pair(P, G):
    p, g = _flat(P), _flat(G)
    if p.shape != g.shape:
        raise MetricShapeError(f'Maps of {p.size} and {g.size} cells cannot be compared')
    return p, g


def descending_order(values):
    """
    Cell indices from highest to lowest value, ties by ascending index
    """
    return np.lexsort((np.arange(values.size), -values))


def top_cells(values, fraction):
    count = int(math.ceil(round(fraction * values.size, 9)))
    return descending_order(values)[:count]


def spearman(P, G):
    p, g = _pair(P, G)
    if np.unique(p).size < 2 or np.unique(g).size < 2:
        raise UndefinedMetricError('Spearman correlation is undefined for a constant map')
    rank_p, rank_g = rankdata(p), rankdata(g)
    rank_p, rank_g = rank_p - rank_p.mean(), rank_g - rank_g.mean()
    rho = (rank_p @ rank_g) / np.sqrt((rank_p @ rank_p) * (rank_g @ rank_g))
    return float(np.clip(rho, -1.0, 1.0))


def ap_top5(P, G, fraction=0.05):
    """
    Average precision of P's ranking with positives the top 5% cells of G
    """
    p, g = _pair(P, G)
    positives = np.zeros(p.size, dtype=bool)
    positives[top_cells(g, fraction)] = True
    ranked = positives[descending_order(p)]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    return float(np.mean(hits[ranks - 1] / ranks))


def js_divergence(P, G):
    """
    Base-2 Jensen-Shannon divergence between the maps normalized to distributions
    """
    p, g = _pair(P, G)
    if p.sum() <= 0 or g.sum() <= 0 or (p < 0).any() or (g < 0).any():
        raise UndefinedMetricError('Jensen-Shannon divergence needs non-negative maps with positive mass')
    p, g = p / p.sum(), g / g.sum()
    m = (p + g) / 2
    js = 0.5 * entropy(p, m, base=2) + 0.5 * entropy(g, m, base=2)
    return float(np.clip(js, 0.0, 1.0))


def render_mask(tumor_mask, shape):
    """
    Tumour mask on the heatmap grid by block-max
    """
    mask = np.asarray(tumor_mask)
    if mask.shape != tuple(shape):
        mask = block_max(mask, *shape)
    return mask.astype(bool)


def _mask_for(P, tumor_mask):
    values = P.numpy() if hasattr(P, 'level_index') else np.asarray(P, dtype=np.float64)
    return values.ravel(), render_mask(tumor_mask, values.shape).ravel()


def ranked_precision(P, tumor_mask, q=0.10):
    p, mask = _mask_for(P, tumor_mask)
    if not mask.any():
        logger.warning('Empty tumour mask, ranked precision set to 0')
        return 0.0
    return float(mask[top_cells(p, q)].mean())


def tumor_recall(P, tumor_mask, q=0.10):
    p, mask = _mask_for(P, tumor_mask)
    if not mask.any():
        raise UndefinedMetricError('Tumour recall is undefined for an empty tumour mask')
    return float(mask[top_cells(p, q)].sum() / mask.sum())
