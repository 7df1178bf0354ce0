import math

import numpy as np
import torch
from django.test import SimpleTestCase, tag

from encoder.encoders import EncoderSpec
from mcfn.fusion import predict_level
from mcfn.network import FusionConfig, FusionNetwork
from slides.pyramid import MagnificationPyramid
from slides.synth import SynthConfig, generate_synthetic_slide

from .exceptions import DatasetError, LossConfigError, LossShapeError
from .gradcheck import check_gradients, sample_coordinates
from .losses import LossConfig, ndsl_loss, ndsl_terms, soft_dice, soft_focal, weighted_l1
from .training import OptimizerConfig, held_out_loss, prepare_dataset, render_target, train_cmt

SPEC = EncoderSpec(token_dim=8)


def t(values):
    return torch.tensor(values, dtype=torch.float64)


def small_slide(seed=0, level_count=3):
    return generate_synthetic_slide(seed, SynthConfig(base_size=256, level_count=level_count))


def small_network(level_count=3, **kwargs):
    return FusionNetwork(FusionConfig(level_count=level_count, token_dim=8, **kwargs))


class TestWeightedL1(SimpleTestCase):
    """
    Test the foreground-weighted l1 term
    """

    def setUp(self):
        self.cfg = LossConfig()

    def test_equal_maps(self):
        P = torch.rand(8, 8, dtype=torch.float64)
        self.assertEqual(float(weighted_l1(P, P.clone(), self.cfg)), 0.0)

    def test_background_only(self):
        self.assertAlmostEqual(float(weighted_l1(t([1.0, 0.0]), t([0.0, 0.0]), self.cfg)), 0.5)

    def test_foreground_weighted(self):
        self.assertAlmostEqual(float(weighted_l1(t([0.0, 0.0]), t([1.0, 0.0]), self.cfg)), 2 / 3)

    def test_threshold_is_strict(self):
        cfg = LossConfig(foreground_threshold=0.5)
        # G == threshold counts as background
        self.assertAlmostEqual(float(weighted_l1(t([0.0, 0.0]), t([0.5, 0.0]), cfg)), 0.25)

    def test_foreground_weight_monotone(self):
        P, G = t([0.0, 0.3, 0.9]), t([1.0, 0.0, 0.0])
        previous = -math.inf
        for weight in (1.0, 1.5, 2.0, 4.0, 10.0):
            value = float(weighted_l1(P, G, LossConfig(foreground_weight=weight)))
            self.assertGreater(value, previous)
            previous = value

    def test_shape_mismatch(self):
        with self.assertRaises(LossShapeError):
            weighted_l1(t([0.0, 1.0]), t([0.0, 1.0, 0.0]), self.cfg)


class TestSoftDice(SimpleTestCase):
    """
    Test the squared-denominator soft Dice term
    """

    def setUp(self):
        self.cfg = LossConfig()

    def test_equal_maps(self):
        P = torch.rand(16, 16, dtype=torch.float64)
        self.assertAlmostEqual(float(soft_dice(P, P.clone(), self.cfg)), 0.0, places=12)

    def test_empty_empty(self):
        zeros = torch.zeros(4, 4, dtype=torch.float64)
        self.assertEqual(float(soft_dice(zeros, zeros, self.cfg)), 0.0)

    def test_disjoint(self):
        value = float(soft_dice(t([1.0, 0.0]), t([0.0, 1.0]), self.cfg))
        self.assertAlmostEqual(value, 1 - 1e-6 / (2 + 1e-6))


class TestSoftFocal(SimpleTestCase):
    """
    Test the modulated soft-target cross-entropy term
    """

    def setUp(self):
        self.cfg = LossConfig()

    def test_equal_maps(self):
        P = torch.rand(8, 8, dtype=torch.float64)
        self.assertEqual(float(soft_focal(P, P.clone(), self.cfg)), 0.0)

    def test_single_pixel(self):
        self.assertAlmostEqual(float(soft_focal(t([0.5]), t([0.0]), self.cfg)), 0.25 * math.log(2), places=10)
        self.assertAlmostEqual(float(soft_focal(t([0.5]), t([0.0]), self.cfg)), 0.1733, places=4)

    def test_zero_exponent_is_cross_entropy(self):
        cfg = LossConfig(focal_gamma=0.0)
        P, G = t([0.2, 0.7, 0.9]), t([0.0, 0.5, 1.0])
        expected = -(G * torch.log(P) + (1 - G) * torch.log(1 - P)).mean()
        self.assertAlmostEqual(float(soft_focal(P, G, cfg)), float(expected), places=12)

    def test_clamped_at_extremes(self):
        self.assertTrue(math.isfinite(float(soft_focal(t([0.0, 1.0]), t([1.0, 0.0]), self.cfg))))


class TestNdslLoss(SimpleTestCase):
    """
    Test the combined navigation-driven supervision loss
    """

    def test_equal_maps(self):
        cfg = LossConfig()
        P = torch.rand(32, 32, dtype=torch.float64)
        self.assertLessEqual(float(ndsl_loss(P, P.clone(), cfg)), 3 * cfg.epsilon)

    def test_l1_only(self):
        cfg = LossConfig(lambda_dice=0.0, lambda_focal=0.0)
        P, G = torch.rand(2, 8, 8, dtype=torch.float64).unbind(0)
        self.assertAlmostEqual(float(ndsl_loss(P, G, cfg)), 0.1 * float(weighted_l1(P, G, cfg)), places=14)

    def test_term_sum(self):
        cfg = LossConfig()
        generator = torch.Generator().manual_seed(4)
        P = torch.rand(16, 16, generator=generator, dtype=torch.float64)
        G = torch.rand(16, 16, generator=generator, dtype=torch.float64)

        weights = np.where(G.numpy() > 0, 2.0, 1.0)
        l1 = (weights * np.abs(P.numpy() - G.numpy())).sum() / weights.sum()
        dice = 1 - (2 * (P * G).sum() + 1e-6) / ((P ** 2).sum() + (G ** 2).sum() + 1e-6)
        focal = ((P - G).abs() ** 2 * -(G * torch.log(P) + (1 - G) * torch.log(1 - P))).mean()
        self.assertAlmostEqual(float(ndsl_loss(P, G, cfg)), 0.1 * l1 + float(dice) + float(focal), places=12)

    def test_terms_non_negative(self):
        cfg = LossConfig()
        generator = torch.Generator().manual_seed(5)
        for _ in range(20):
            P = torch.rand(8, 8, generator=generator, dtype=torch.float64)
            G = torch.rand(8, 8, generator=generator, dtype=torch.float64) * (torch.rand(1, generator=generator) > 0.5)
            for name, value in ndsl_terms(P, G, cfg).items():
                self.assertGreaterEqual(float(value), 0.0, name)

    def test_invalid_config(self):
        for kwargs in ({'lambda_dice': -1.0}, {'foreground_weight': 0.5}, {'epsilon': 0.0}):
            with self.assertRaises(LossConfigError):
                LossConfig(**kwargs).validate()


class TestRenderTarget(SimpleTestCase):
    """
    Test bringing navigation annotations onto the prediction grid
    """

    def test_renormalized(self):
        nav = np.zeros((512, 512))
        nav[:2, :2] = 0.5
        target = render_target(nav)
        self.assertEqual(tuple(target.shape), (256, 256))
        self.assertEqual(float(target.max()), 1.0)
        self.assertEqual(float(target[0, 0]), 1.0)

    def test_all_zero_stays_zero(self):
        self.assertEqual(float(render_target(np.zeros((64, 64))).abs().sum()), 0.0)


class TestTraining(SimpleTestCase):
    """
    Test the desk-scale training loop
    """

    def test_missing_annotations(self):
        slide = small_slide()
        bare = MagnificationPyramid(slide.slide_id, slide.levels, slide.rasters)
        params = small_network()
        before = [p.detach().clone() for p in params.parameters()]
        with self.assertRaises(DatasetError):
            train_cmt([slide, bare], params, LossConfig(), OptimizerConfig(steps=1), SPEC)
        for old, new in zip(before, params.parameters()):
            self.assertTrue(torch.equal(old, new))

    def test_zero_learning_rate(self):
        params = small_network()
        before = {name: p.detach().clone() for name, p in params.named_parameters()}
        _, curve = train_cmt([small_slide()], params, LossConfig(), OptimizerConfig(learning_rate=0.0, steps=6), SPEC)
        for name, p in params.named_parameters():
            self.assertTrue(torch.equal(before[name], p), name)
        # one cycle is three levels; the second cycle repeats the first
        np.testing.assert_array_equal(curve['total'].to_numpy()[:3], curve['total'].to_numpy()[3:])

    def test_curve_columns(self):
        _, curve = train_cmt([small_slide()], small_network(), LossConfig(), OptimizerConfig(steps=4), SPEC)
        self.assertEqual(list(curve.columns), ['step', 'total', 'l1', 'dice', 'focal'])
        self.assertEqual(curve['step'].tolist(), [0, 1, 2, 3])

    def test_deterministic(self):
        curves = []
        for _ in range(2):
            _, curve = train_cmt([small_slide()], small_network(), LossConfig(), OptimizerConfig(steps=5), SPEC)
            curves.append(curve)
        self.assertTrue(curves[0].equals(curves[1]))

    @tag('slow')
    def test_loss_decreases(self):
        slide = small_slide(seed=2)
        params = small_network()
        prepared = prepare_dataset([slide], SPEC)
        initial = held_out_loss(prepared, params, LossConfig())
        _, curve = train_cmt([slide], params, LossConfig(), OptimizerConfig(steps=200, seed=2), SPEC, prepared=prepared)
        self.assertLess(held_out_loss(prepared, params, LossConfig()), initial)
        self.assertLess(curve['total'].to_numpy()[-3:].mean(), curve['total'].to_numpy()[:3].mean())

    def test_loss_ablation_changes_training(self):
        slide = small_slide()
        full, _ = train_cmt([slide], small_network(), LossConfig(), OptimizerConfig(steps=3), SPEC)
        no_dice, _ = train_cmt([slide], small_network(), LossConfig(lambda_dice=0.0), OptimizerConfig(steps=3), SPEC)
        self.assertTrue(any(not torch.equal(a, b) for a, b in zip(full.parameters(), no_dice.parameters())))

    @tag('slow')
    def test_cross_magnification_fusion_helps(self):
        """
        Averaged over three seeds, the full network reaches a held-out loss no worse than one without CMB
        """
        spec = EncoderSpec(token_dim=16)
        config = SynthConfig(base_size=512, level_count=5)
        train = prepare_dataset([generate_synthetic_slide(seed, config) for seed in range(8)], spec)
        test = prepare_dataset([generate_synthetic_slide(100 + seed, config) for seed in range(4)], spec)
        losses = {'full': [], 'no_cmb': []}
        for seed in range(3):
            for name, flags in (('full', {}), ('no_cmb', {'use_cmb_low': False, 'use_cmb_high': False})):
                params = FusionNetwork(FusionConfig(level_count=5, token_dim=16, seed=seed, **flags))
                train_cmt([], params, LossConfig(), OptimizerConfig(steps=200, seed=seed, log_every=0), spec,
                          prepared=train)
                losses[name].append(held_out_loss(test, params, LossConfig()))
        self.assertLessEqual(np.mean(losses['full']), np.mean(losses['no_cmb']))


class TestGradients(SimpleTestCase):
    """
    Test autograd against central finite differences through the full loss
    """

    def assertGradientsMatch(self, comparisons):
        for c in comparisons:
            tolerance = 1e-4 * max(abs(c.analytic), abs(c.numeric)) + 1e-8
            self.assertLessEqual(abs(c.analytic - c.numeric), tolerance,
                                 f'{c.group}[{c.tensor_index}][{c.flat_index}]: {c.analytic} vs {c.numeric}')

    def test_random_coordinates(self):
        slide = small_slide(seed=1)
        prepared = prepare_dataset([slide], SPEC)[0]
        params = small_network()
        cfg = LossConfig()

        def loss():
            return ndsl_loss(predict_level(prepared.token_grids, 1, params), prepared.targets[1], cfg)

        groups = params.parameter_groups()
        coordinates = sample_coordinates(groups, 8, torch.Generator().manual_seed(0))
        self.assertGreaterEqual(len(coordinates), 50)
        self.assertGradientsMatch(check_gradients(loss, groups, coordinates))

    def test_every_level(self):
        slide = small_slide(seed=3)
        prepared = prepare_dataset([slide], SPEC)[0]
        params = small_network()
        cfg = LossConfig()
        groups = params.parameter_groups()
        for m in range(3):
            coordinates = sample_coordinates(groups, 1, torch.Generator().manual_seed(m))[:5]

            def loss():
                return ndsl_loss(predict_level(prepared.token_grids, m, params), prepared.targets[m], cfg)

            self.assertGradientsMatch(check_gradients(loss, groups, coordinates))
