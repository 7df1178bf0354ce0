"""
Patch-budget sweep: for each budget and sampling mode, bags are built from that fraction of every
slide's top-level patches and evaluated by cross-validation.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .bags import SAMPLING_MODES, budget_bag
from .exceptions import BudgetError
from .training import cross_validate

logger = logging.getLogger(__name__)

BUDGET_COLUMNS = ['sampling', 'mab', 'cmb_l', 'cmb_h', 'budget', 'auc_mean', 'auc_std']


@dataclass(frozen=True, eq=False)
class SlideFeatures:
    """
    What the budget sweep needs from one slide: top-level tokens, top-level heatmap and tissue cells
    """
    slide_id: str
    label: object
    token_grid: object
    heatmap: object
    tissue: np.ndarray = None


def evaluate_budgets(dataset, config, opt_cfg, budgets, modes=SAMPLING_MODES, components=(True, True, True),
                     seed=0, jobs=1):
    """
    Returns the budget table (one row per budget and mode, in that nesting order). A budget that leaves
    some slide with no patches gets a row with empty AUC columns.
    """
    for budget in budgets:
        if not 0 < budget <= 1:
            raise BudgetError(f'classify.budgets: {budget} is outside (0, 1]')
    mab, cmb_l, cmb_h = components
    rows = []
    for budget in budgets:
        for mode in modes:
            rng = np.random.default_rng(seed)
            bags = [budget_bag(s.token_grid, s.heatmap, budget, mode, rng, allowed=s.tissue, label=s.label,
                               slide_id=s.slide_id) for s in dataset]
            row = {'sampling': mode, 'mab': mab, 'cmb_l': cmb_l, 'cmb_h': cmb_h, 'budget': budget,
                   'auc_mean': np.nan, 'auc_std': np.nan}
            if any(bag is None for bag in bags):
                logger.warning('Skipping budget %.2f (%s): some slides have no patches', budget, mode)
            else:
                folds = cross_validate(bags, config, opt_cfg, jobs=jobs)
                row['auc_mean'] = float(folds['auc'].mean())
                row['auc_std'] = float(folds['auc'].std(ddof=0))
                logger.info('Budget %.2f %s: auc %.4f +- %.4f', budget, mode, row['auc_mean'], row['auc_std'])
            rows.append(row)
    return pd.DataFrame(rows, columns=BUDGET_COLUMNS)
