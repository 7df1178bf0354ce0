import itertools
import math

import numpy as np
from django.test import SimpleTestCase

from slides.resampling import area_resample, block_max
from slides.synth import SynthConfig, generate_synthetic_slide

from .exceptions import MetricShapeError, UndefinedMetricError
from .navigation import ap_top5, js_divergence, ranked_precision, spearman, tumor_recall
from .report import REPORT_COLUMNS, build_report, evaluate_level, evaluate_slide


def brute_ranks(values):
    """
    Average 1-based ranks by counting
    """
    return np.array([np.sum(values < v) + (np.sum(values == v) + 1) / 2 for v in values])


def brute_spearman(p, g):
    rp, rg = brute_ranks(p), brute_ranks(g)
    n = len(p)
    mp, mg = sum(rp) / n, sum(rg) / n
    cov = sum((a - mp) * (b - mg) for a, b in zip(rp, rg))
    return cov / math.sqrt(sum((a - mp) ** 2 for a in rp) * sum((b - mg) ** 2 for b in rg))


def brute_top(values, count):
    return sorted(range(len(values)), key=lambda i: (-values[i], i))[:count]


def brute_ap(p, g):
    count = math.ceil(0.05 * len(g))
    positives = set(brute_top(g, count))
    ranking = brute_top(p, len(p))
    precisions = []
    for k in range(1, len(p) + 1):
        if ranking[k - 1] in positives:
            precisions.append(len(positives & set(ranking[:k])) / k)
    return sum(precisions) / len(precisions)


def brute_js(p, g):
    p, g = p / p.sum(), g / g.sum()
    m = (p + g) / 2

    def kl(a, b):
        return sum(x * math.log2(x / y) for x, y in zip(a, b) if x > 0)

    return 0.5 * kl(p, m) + 0.5 * kl(g, m)


def brute_precision_recall(p, mask, q):
    top = set(brute_top(p, math.ceil(q * len(p))))
    tumour = {i for i, v in enumerate(mask) if v}
    return len(top & tumour) / len(top), len(top & tumour) / len(tumour)


class TestSpearman(SimpleTestCase):
    """
    Test the rank correlation between a heatmap and the navigation map
    """

    def test_identical(self):
        P = np.random.default_rng(0).random((8, 8))
        self.assertAlmostEqual(spearman(P, P), 1.0, places=12)

    def test_reversed(self):
        P = np.random.default_rng(1).random((8, 8))
        self.assertAlmostEqual(spearman(P, P.max() - P), -1.0, places=12)

    def test_ties(self):
        p, g = np.array([1.0, 2, 2, 3]), np.array([1.0, 3, 2, 4])
        self.assertAlmostEqual(spearman(p, g), brute_spearman(p, g), places=12)

    def test_monotone_transform(self):
        rng = np.random.default_rng(2)
        P, G = rng.random((6, 6)), rng.random((6, 6))
        self.assertAlmostEqual(spearman(np.exp(3 * P), G ** 3), spearman(P, G), places=12)

    def test_constant(self):
        with self.assertRaises(UndefinedMetricError):
            spearman(np.ones((4, 4)), np.random.default_rng(0).random((4, 4)))

    def test_shape_mismatch(self):
        with self.assertRaises(MetricShapeError):
            spearman(np.zeros(4), np.zeros(5))


class TestApTop5(SimpleTestCase):
    """
    Test average precision against the top 5% navigation cells
    """

    def test_identical(self):
        G = np.random.default_rng(0).random((10, 10))
        self.assertEqual(ap_top5(G, G), 1.0)

    def test_single_positive(self):
        g = np.zeros(20)
        g[7] = 1.0
        first = np.zeros(20)
        first[7] = 1.0
        self.assertEqual(ap_top5(first, g), 1.0)
        last = np.ones(20)
        last[7] = 0.0
        self.assertEqual(ap_top5(last, g), 1 / 20)

    def test_random_against_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p, g = rng.random(36), rng.random(36)
            self.assertAlmostEqual(ap_top5(p.reshape(6, 6), g.reshape(6, 6)), brute_ap(p, g), places=12)


class TestJsDivergence(SimpleTestCase):
    """
    Test the base-2 Jensen-Shannon divergence
    """

    def test_identical(self):
        P = np.random.default_rng(0).random((5, 5))
        self.assertAlmostEqual(js_divergence(P, 3 * P), 0.0, places=12)

    def test_hand_value(self):
        self.assertAlmostEqual(js_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])), 0.3113, places=4)

    def test_disjoint(self):
        self.assertAlmostEqual(js_divergence(np.array([1.0, 0.0]), np.array([0.0, 2.0])), 1.0, places=12)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        P, G = rng.random(9), rng.random(9)
        self.assertAlmostEqual(js_divergence(P, G), js_divergence(G, P), places=14)

    def test_zero_mass(self):
        with self.assertRaises(UndefinedMetricError):
            js_divergence(np.zeros(4), np.ones(4))


class TestTumourMetrics(SimpleTestCase):
    """
    Test ranked precision and tumour recall of the top attention cells
    """

    def test_all_top_cells_in_tumour(self):
        P = np.arange(16, dtype=float).reshape(4, 4)
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[3] = 1
        self.assertEqual(ranked_precision(P, mask, q=0.25), 1.0)
        self.assertEqual(tumor_recall(P, mask, q=0.25), 1.0)

    def test_whole_slide_tumour(self):
        P = np.random.default_rng(0).random((4, 4))
        self.assertEqual(ranked_precision(P, np.ones((4, 4))), 1.0)

    def test_disjoint(self):
        P = np.arange(25, dtype=float).reshape(5, 5)
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[0, :2] = 1
        self.assertEqual(tumor_recall(P, mask, q=0.2), 0.0)

    def test_toy_enumeration(self):
        rng = np.random.default_rng(5)
        P = rng.random((5, 5))
        mask = (rng.random((5, 5)) > 0.6).astype(np.uint8)
        precision, recall = brute_precision_recall(P.ravel(), mask.ravel(), 0.2)
        self.assertAlmostEqual(ranked_precision(P, mask, q=0.2), precision, places=12)
        self.assertAlmostEqual(tumor_recall(P, mask, q=0.2), recall, places=12)

    def test_threshold_invariance(self):
        rng = np.random.default_rng(6)
        P = rng.random((8, 8))
        mask = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        self.assertEqual(ranked_precision(P, mask), ranked_precision(P ** 5 + 2, mask))
        self.assertEqual(tumor_recall(P, mask), tumor_recall(np.log(P + 1), mask))

    def test_mask_rendered_to_heatmap_grid(self):
        P = np.zeros((4, 4))
        P[0, 0] = 1.0
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[1, 1] = 1
        self.assertEqual(ranked_precision(P, mask, q=0.05), 1.0)

    def test_empty_mask(self):
        P = np.random.default_rng(0).random((4, 4))
        with self.assertLogs('metrics.navigation', level='WARNING'):
            self.assertEqual(ranked_precision(P, np.zeros((4, 4))), 0.0)
        with self.assertRaises(UndefinedMetricError):
            tumor_recall(P, np.zeros((4, 4)))


class TestBruteForceOracles(SimpleTestCase):
    """
    Test every metric against its enumeration oracle on small random maps
    """

    def test_small_maps(self):
        rng = np.random.default_rng(2025)
        shapes = [(h, w) for h, w in itertools.product((1, 2, 3), repeat=2) if h * w >= 2]
        for i in range(100):
            shape = shapes[i % len(shapes)]
            n = shape[0] * shape[1]
            # coarse values so that ties occur
            p = rng.integers(0, 4, size=n).astype(float)
            g = rng.integers(0, 4, size=n).astype(float)
            mask = rng.integers(0, 2, size=n)
            if np.unique(p).size > 1 and np.unique(g).size > 1:
                self.assertAlmostEqual(spearman(p.reshape(shape), g.reshape(shape)), brute_spearman(p, g), delta=1e-12)
            self.assertAlmostEqual(ap_top5(p, g), brute_ap(p, g), delta=1e-12)
            if p.sum() > 0 and g.sum() > 0:
                self.assertAlmostEqual(js_divergence(p, g), brute_js(p, g), delta=1e-12)
            if mask.any():
                precision, recall = brute_precision_recall(p, mask, 0.10)
                self.assertAlmostEqual(ranked_precision(p.reshape(shape), mask.reshape(shape)), precision, delta=1e-12)
                self.assertAlmostEqual(tumor_recall(p.reshape(shape), mask.reshape(shape)), recall, delta=1e-12)


class TestReport(SimpleTestCase):
    """
    Test the per-slide metric report and its aggregates
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.slide = generate_synthetic_slide(0, SynthConfig(base_size=256, level_count=3))

    def oracle_heatmaps(self):
        return [area_resample(nav, 256, 256) for nav in self.slide.nav_annotations]

    def test_oracle_heatmaps(self):
        for report in evaluate_slide(self.slide, self.oracle_heatmaps()):
            self.assertAlmostEqual(report.rho, 1.0, places=12)
            self.assertAlmostEqual(report.jsd, 0.0, places=12)
            self.assertEqual(report.ap5, 1.0)
            self.assertEqual(report.p10, report.p10_nav)

    def test_report_aggregates(self):
        reports = evaluate_slide(self.slide, self.oracle_heatmaps())
        table = build_report(reports + [evaluate_level(self.slide, 0, np.random.default_rng(0).random((256, 256)))])
        self.assertEqual(list(table.columns), REPORT_COLUMNS)
        self.assertEqual(len(table), 4 + 3 + 1)
        level_zero = table[(table['slide_id'] == 'mean') & (table['level'] == 0)]
        self.assertAlmostEqual(level_zero['rho'].iloc[0], (reports[0].rho + table['rho'].iloc[3]) / 2)
        self.assertEqual(table['level'].iloc[-1], 'all')

    def test_level_count_mismatch(self):
        with self.assertRaises(MetricShapeError):
            evaluate_slide(self.slide, self.oracle_heatmaps()[:2])

    def test_tumour_mask_comes_from_the_top_level(self):
        slide = generate_synthetic_slide(7, SynthConfig(base_size=1024, level_count=5))
        direct = block_max(slide.tumor_mask, 256, 256).astype(bool)
        values = np.random.default_rng(1).random((256, 256))
        for m in range(5):
            report = evaluate_level(slide, m, values)
            self.assertEqual(report.p10, ranked_precision(values, direct))
            self.assertEqual(report.rec, tumor_recall(values, direct))

    def test_cells_beside_the_tumour_are_not_tumour(self):
        slide = generate_synthetic_slide(7, SynthConfig(base_size=1024, level_count=5))
        direct = block_max(slide.tumor_mask, 256, 256).astype(bool)
        # cells a thumbnail-resolution mask would wrongly mark as tumour
        ring = block_max(block_max(slide.tumor_mask, 64, 64), 256, 256).astype(bool) & ~direct
        self.assertGreater(ring.sum(), 0)
        report = evaluate_level(slide, 0, ring.astype(np.float64), q=ring.sum() / ring.size)
        self.assertEqual(report.p10, 0.0)
