import math
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch
from django.test import SimpleTestCase, tag

from encoder.encoders import TokenGrid, render_level
from mcfn.network import Heatmap
from slides.pyramid import Region, SlideLabel
from slides.resampling import block_mean
from slides.synth import SynthConfig, generate_synthetic_slide

from .abmil import AbmilConfig, AttentionMIL, Bag, abmil_forward, abmil_logits
from .bags import budget_bag, build_bag, region_feature, select_budget_cells, tissue_cells
from .budgets import BUDGET_COLUMNS, SlideFeatures, evaluate_budgets
from .exceptions import BudgetError, EmptyBagError, SingleClassError
from .training import (ClassifierOptimizerConfig, bag_loss, cross_validate, macro_ovr_auc, predict_proba,
                       train_classifier)


def separable_bags(count, dim=8, seed=0, shift=3.0):
    """
    Bags whose instances are centred on a class-specific axis
    """
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(count):
        label = SlideLabel.from_index(i % 4)
        centre = np.zeros(dim)
        centre[label.index] = shift
        instances = centre + rng.normal(size=(int(rng.integers(3, 9)), dim))
        bags.append(Bag(torch.from_numpy(instances), label=label, slide_id=f's{i}'))
    return bags


def set_params(params, V, w_a, W_c, b):
    with torch.no_grad():
        for p, value in zip((params.V, params.w_a, params.W_c, params.b), (V, w_a, W_c, b)):
            p.copy_(torch.as_tensor(value, dtype=torch.float64))


class TestAbmilForward(SimpleTestCase):
    """
    Test attention pooling and classification of a bag
    """

    def setUp(self):
        self.params = AttentionMIL(AbmilConfig(token_dim=3, hidden_dim=2))

    def test_single_instance(self):
        h = torch.tensor([[0.5, -1.0, 2.0]], dtype=torch.float64)
        logits, attention = abmil_logits(Bag(h), self.params)
        self.assertEqual(attention.tolist(), [1.0])
        torch.testing.assert_close(logits, self.params.W_c @ h[0] + self.params.b)

    def test_duplicated_instance(self):
        h = torch.tensor([[0.5, -1.0, 2.0]], dtype=torch.float64)
        torch.testing.assert_close(abmil_forward(Bag(h.repeat(2, 1)), self.params), abmil_forward(Bag(h), self.params))

    def test_hand_evaluated(self):
        set_params(self.params, V=[[1, 0, 0], [0, 1, 0]], w_a=[1, -1], W_c=np.eye(4, 3), b=[0, 0, 0, 1])
        H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        scores = np.array([math.tanh(1), -math.tanh(1), 0.0])
        a = np.exp(scores) / np.exp(scores).sum()
        z = a @ H
        logits = np.array([z[0], z[1], z[2], 1.0])
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(abmil_forward(Bag(torch.from_numpy(H)), self.params).detach().numpy(), expected,
                                   rtol=1e-12)

    def test_attention_is_distribution(self):
        for bag in separable_bags(10, dim=3):
            _, attention = abmil_logits(bag, self.params)
            self.assertTrue((attention >= 0).all())
            self.assertAlmostEqual(float(attention.sum()), 1.0, places=12)

    def test_permutation_invariant(self):
        bag = separable_bags(1, dim=3, seed=4)[0]
        expected = abmil_forward(bag, self.params)
        generator = torch.Generator().manual_seed(0)
        for _ in range(10):
            shuffled = Bag(bag.instances[torch.randperm(len(bag), generator=generator)])
            self.assertTrue(torch.equal(abmil_forward(shuffled, self.params), expected))

    def test_empty_bag(self):
        with self.assertRaises(EmptyBagError):
            Bag(torch.zeros(0, 3, dtype=torch.float64))


class TestTrainClassifier(SimpleTestCase):
    """
    Test classifier training and the cross-validation protocol
    """

    def test_separable(self):
        train, test = separable_bags(80, seed=1), separable_bags(40, seed=2)
        params = AttentionMIL(AbmilConfig(token_dim=8))
        train_classifier(train, params, ClassifierOptimizerConfig(epochs=30))
        predictions = predict_proba(test, params).argmax(axis=1)
        accuracy = np.mean(predictions == np.array([bag.label.index for bag in test]))
        self.assertGreaterEqual(accuracy, 0.95)

    def test_zero_learning_rate(self):
        params = AttentionMIL(AbmilConfig(token_dim=8))
        before = [p.detach().clone() for p in params.parameters()]
        train_classifier(separable_bags(8), params, ClassifierOptimizerConfig(learning_rate=0.0, epochs=2))
        for old, new in zip(before, params.parameters()):
            self.assertTrue(torch.equal(old, new))

    def test_single_class(self):
        bags = [bag for bag in separable_bags(12) if bag.label == SlideLabel.MELANOMA]
        with self.assertRaises(SingleClassError):
            train_classifier(bags, AttentionMIL(AbmilConfig(token_dim=8)), ClassifierOptimizerConfig())

    def test_keeps_best_validation_epoch(self):
        params = AttentionMIL(AbmilConfig(token_dim=8))
        _, history = train_classifier(separable_bags(16), params, ClassifierOptimizerConfig(epochs=5),
                                      validation=separable_bags(8, seed=3))
        self.assertEqual(len(history), 5)
        with torch.no_grad():
            final = float(bag_loss(separable_bags(8, seed=3), params))
        self.assertAlmostEqual(final, history['val_loss'].min(), places=10)

    def test_deterministic(self):
        results = []
        for _ in range(2):
            params = AttentionMIL(AbmilConfig(token_dim=8, seed=2))
            train_classifier(separable_bags(12), params, ClassifierOptimizerConfig(epochs=3, seed=5))
            results.append(params.W_c.detach().clone())
        self.assertTrue(torch.equal(*results))

    def test_random_scores_auc(self):
        rng = np.random.default_rng(7)
        labels = np.repeat(np.arange(4), 250)
        self.assertAlmostEqual(macro_ovr_auc(labels, rng.random((1000, 4))), 0.5, delta=0.05)

    def test_perfect_scores_auc(self):
        labels = np.array([0, 1, 2, 3, 0, 1])
        self.assertEqual(macro_ovr_auc(labels, np.eye(4)[labels]), 1.0)

    def test_cross_validate(self):
        folds = cross_validate(separable_bags(40), AbmilConfig(token_dim=8), ClassifierOptimizerConfig(epochs=10))
        self.assertEqual(list(folds.columns), ['fold', 'auc', 'bacc'])
        self.assertEqual(len(folds), 5)
        self.assertGreater(folds['auc'].mean(), 0.9)

    def test_cross_validate_parallel_matches_serial(self):
        config, opt_cfg = AbmilConfig(token_dim=8), ClassifierOptimizerConfig(epochs=3)
        serial = cross_validate(separable_bags(20), config, opt_cfg)
        parallel = cross_validate(separable_bags(20), config, opt_cfg, jobs=3)
        self.assertTrue(serial.equals(parallel))

    def test_concurrent_construction_matches_serial(self):
        config = AbmilConfig(token_dim=8, hidden_dim=256, seed=4)
        reference = AttentionMIL(config).state_dict()
        switch = sys.getswitchinterval()
        sys.setswitchinterval(1e-6)
        try:
            with ThreadPoolExecutor(max_workers=8) as pool:
                models = list(pool.map(lambda _: AttentionMIL(config), range(64)))
        finally:
            sys.setswitchinterval(switch)
        for model in models:
            for name, value in model.state_dict().items():
                self.assertTrue(torch.equal(value, reference[name]), name)

    def test_construction_leaves_global_rng_alone(self):
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        AttentionMIL(AbmilConfig(token_dim=8))
        self.assertTrue(torch.equal(torch.rand(3), expected))


class TestBags(SimpleTestCase):
    """
    Test building bags from regions and patch budgets
    """

    def setUp(self):
        tokens = torch.arange(16 * 16 * 2, dtype=torch.float64).reshape(16, 16, 2)
        self.grid = TokenGrid(tokens=tokens, level_index=1, cell_size=(4.0, 4.0))

    def test_region_feature(self):
        feature = region_feature(self.grid, Region(1, 4, 8, 8, 4))
        expected = self.grid.tokens[2:3, 1:3].reshape(-1, 2).mean(dim=0)
        torch.testing.assert_close(feature, expected)

    def test_partial_cells_included(self):
        feature = region_feature(self.grid, Region(1, 2, 0, 4, 1))
        torch.testing.assert_close(feature, self.grid.tokens[0:1, 0:2].reshape(-1, 2).mean(dim=0))

    def test_build_bag_mixed_levels(self):
        other = TokenGrid(tokens=torch.zeros(16, 16, 2, dtype=torch.float64), level_index=0, cell_size=(2.0, 2.0))
        bag = build_bag([other, self.grid], [Region(0, 0, 0, 2, 2), Region(1, 0, 0, 4, 4)], SlideLabel.NEVUS)
        self.assertEqual(len(bag), 2)
        self.assertEqual(bag.instances[0].tolist(), [0.0, 0.0])
        self.assertEqual(bag.instances[1].tolist(), [0.0, 1.0])

    def test_no_regions(self):
        with self.assertRaises(EmptyBagError):
            build_bag([self.grid], [])

    def test_tissue_filter_on_synthetic_slide(self):
        slide = generate_synthetic_slide(0, SynthConfig(base_size=256, level_count=3))
        self.assertTrue(tissue_cells(slide, 2, (16, 16), None).all())
        self.assertTrue(tissue_cells(slide, 2, (16, 16), 256).all())
        self.assertFalse(tissue_cells(slide, 2, (16, 16), 0).any())
        intensities = block_mean(render_level(slide, 2).mean(axis=2), 16)
        threshold = float(intensities.min() + intensities.max()) / 2
        tissue = tissue_cells(slide, 2, (16, 16), threshold)
        self.assertEqual(tissue.shape, (16, 16))
        np.testing.assert_array_equal(tissue, intensities < threshold)
        self.assertTrue(tissue.any() and not tissue.all())

    def test_tissue_filter_can_leave_no_patches(self):
        slide = generate_synthetic_slide(0, SynthConfig(base_size=256, level_count=3))
        allowed = tissue_cells(slide, 2, (16, 16), 0)
        heatmap = np.random.default_rng(0).random((256, 256))
        self.assertIsNone(budget_bag(self.grid, heatmap, 0.2, 'topk', np.random.default_rng(0), allowed=allowed))

    def test_topk_budget_size(self):
        scores = np.random.default_rng(0).random((16, 16))
        chosen = select_budget_cells(scores, 0.2, 'topk', np.random.default_rng(0))
        self.assertEqual(len(chosen), math.ceil(0.2 * 256))
        threshold = np.sort(scores.ravel())[::-1][len(chosen) - 1]
        self.assertTrue((scores.ravel()[chosen] >= threshold).all())

    def test_full_budget_modes_agree(self):
        scores = np.random.default_rng(1).random((16, 16))
        topk = select_budget_cells(scores, 1.0, 'topk', np.random.default_rng(0))
        random = select_budget_cells(scores, 1.0, 'random', np.random.default_rng(0))
        np.testing.assert_array_equal(topk, random)

    def test_invalid_budget(self):
        with self.assertRaises(BudgetError):
            select_budget_cells(np.zeros((4, 4)), 0.0, 'topk', np.random.default_rng(0))

    def test_budget_bag_without_tissue(self):
        heatmap = Heatmap(torch.zeros(256, 256, dtype=torch.float64), 1)
        with self.assertLogs('classify.bags', level='WARNING'):
            bag = budget_bag(self.grid, heatmap, 0.5, 'topk', np.random.default_rng(0),
                             allowed=np.zeros((16, 16), dtype=bool))
        self.assertIsNone(bag)


class TestEvaluateBudgets(SimpleTestCase):
    """
    Test the patch-budget table
    """

    def dataset(self, count=20, tissue=None):
        rng = np.random.default_rng(3)
        slides = []
        for bag in separable_bags(count, seed=5):
            tokens = torch.from_numpy(rng.normal(size=(16, 16, 8)))
            tokens[:4, :4] += torch.from_numpy(bag.instances[0].numpy())
            heatmap = Heatmap(torch.from_numpy(rng.random((256, 256))), 4)
            slides.append(SlideFeatures(bag.slide_id, bag.label, TokenGrid(tokens, 4), heatmap, tissue))
        return slides

    @tag('slow')
    def test_table_structure(self):
        table = evaluate_budgets(self.dataset(), AbmilConfig(token_dim=8), ClassifierOptimizerConfig(epochs=2),
                                 budgets=[0.2, 1.0], components=(True, False, True))
        self.assertEqual(list(table.columns), BUDGET_COLUMNS)
        self.assertEqual(len(table), 4)
        self.assertEqual(table['sampling'].tolist(), ['topk', 'random', 'topk', 'random'])
        self.assertEqual(table['cmb_l'].tolist(), [False] * 4)
        full = table[table['budget'] == 1.0]
        self.assertEqual(full['auc_mean'].iloc[0], full['auc_mean'].iloc[1])

    def test_zero_patch_budget_row(self):
        tissue = np.zeros((16, 16), dtype=bool)
        with self.assertLogs('classify.budgets', level='WARNING'):
            table = evaluate_budgets(self.dataset(tissue=tissue), AbmilConfig(token_dim=8),
                                     ClassifierOptimizerConfig(epochs=1), budgets=[0.4], modes=('topk',))
        self.assertEqual(len(table), 1)
        self.assertTrue(np.isnan(table['auc_mean'].iloc[0]))

    def test_invalid_budget(self):
        with self.assertRaises(BudgetError):
            evaluate_budgets([], AbmilConfig(), ClassifierOptimizerConfig(), budgets=[1.5])
