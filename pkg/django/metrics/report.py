import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from slides.resampling import area_resample

from .exceptions import MetricShapeError, UndefinedMetricError
from .navigation import ap_top5, js_divergence, ranked_precision, spearman, tumor_recall

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['rho', 'ap5', 'jsd', 'p10', 'rec', 'p10_nav']
REPORT_COLUMNS = ['slide_id', 'level'] + METRIC_COLUMNS
AGGREGATE_ID = 'mean'
ALL_LEVELS = 'all'


@dataclass
class MetricReport:
    slide_id: str
    level: object
    rho: float = np.nan
    ap5: float = np.nan
    jsd: float = np.nan
    p10: float = np.nan
    rec: float = np.nan
    p10_nav: float = np.nan

    def to_dict(self):
        return asdict(self)


def _guarded(name, slide_id, level, metric, *args, **kwargs):
    try:
        return metric(*args, **kwargs)
    except UndefinedMetricError as e:
        logger.warning('%s level %s: %s is undefined (%s)', slide_id, level, name, e)
        return np.nan


def evaluate_level(pyramid, m, heatmap, q=0.10):
    """
    Every metric of one level; the navigation map is area-averaged onto the heatmap grid
    """
    values = heatmap.numpy() if hasattr(heatmap, 'level_index') else np.asarray(heatmap, dtype=np.float64)
    if pyramid.nav_annotations is None:
        raise MetricShapeError(f'{pyramid.slide_id} has no navigation annotations to compare against')
    nav = area_resample(pyramid.nav(m), *values.shape)
    report = MetricReport(slide_id=pyramid.slide_id, level=m)
    report.rho = _guarded('rho', pyramid.slide_id, m, spearman, values, nav)
    report.ap5 = ap_top5(values, nav)
    report.jsd = _guarded('jsd', pyramid.slide_id, m, js_divergence, values, nav)
    if pyramid.tumor_mask is not None:
        mask = pyramid.tumor_mask
        report.p10 = ranked_precision(values, mask, q)
        report.rec = _guarded('rec', pyramid.slide_id, m, tumor_recall, values, mask, q)
        report.p10_nav = ranked_precision(nav, mask, q)
    return report


def evaluate_slide(pyramid, heatmaps, q=0.10):
    if len(heatmaps) != len(pyramid.levels):
        raise MetricShapeError(f'{pyramid.slide_id} has {len(pyramid.levels)} levels but {len(heatmaps)} heatmaps')
    return [evaluate_level(pyramid, m, heatmap, q) for m, heatmap in enumerate(heatmaps)]


def build_report(reports):
    """
    Per-slide rows followed by a mean row per level and an overall mean row (NaNs are skipped)
    """
    rows = pd.DataFrame([report.to_dict() for report in reports], columns=REPORT_COLUMNS)
    if rows.empty:
        return rows
    per_level = rows.groupby('level', sort=True)[METRIC_COLUMNS].mean().reset_index()
    per_level.insert(0, 'slide_id', AGGREGATE_ID)
    overall = rows[METRIC_COLUMNS].mean().to_frame().T
    overall.insert(0, 'level', ALL_LEVELS)
    overall.insert(0, 'slide_id', AGGREGATE_ID)
    return pd.concat([rows, per_level, overall], ignore_index=True)[REPORT_COLUMNS]
