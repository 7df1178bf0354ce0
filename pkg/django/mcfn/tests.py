import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from unittest import mock

import numpy as np
import torch
from django.test import SimpleTestCase

from core.checkpoints import load_checkpoint, save_checkpoint
from core.exceptions import MissingDependencyError
from encoder.encoders import EncoderSpec, TokenGrid
from ndsl.gradcheck import check_gradients, sample_coordinates
from slides.synth import SynthConfig, generate_synthetic_slide

from . import fusion
from .exceptions import DimensionError, McfnConfigurationError, NumericInputError, ResampleError
from .fusion import attn, cmb_forward, decode, mab_forward, mcfn_forward, predict_all, predict_level, resample_grid
from .network import AttentionProjections, FusionConfig, FusionNetwork, upsampling_factors


def grid(values, level_index=0):
    return TokenGrid(tokens=torch.as_tensor(values, dtype=torch.float64), level_index=level_index)


def random_grids(level_count, dim=8, size=16, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return [grid(torch.randn(size, size, dim, generator=generator, dtype=torch.float64), m)
            for m in range(level_count)]


def identity_projections(proj):
    with torch.no_grad():
        for layer in (proj.q, proj.k, proj.v, proj.o):
            layer.weight.copy_(torch.eye(layer.weight.shape[0], dtype=torch.float64))


def set_gates(params, gamma=None, u=None, w=None):
    with torch.no_grad():
        for gate, value in ((params.gamma, gamma), (params.u, u), (params.w, w)):
            if value is not None:
                gate.fill_(value)


def zero_decoder(params):
    with torch.no_grad():
        for p in params.decoder.parameters():
            p.zero_()


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def oracle_attention(query, keys, proj):
    """
    Straight numpy evaluation of W_o softmax((W_q q)(W_k K)^T / sqrt(D)) (W_v K)
    """
    Wq, Wk, Wv, Wo = (layer.weight.detach().numpy() for layer in (proj.q, proj.k, proj.v, proj.o))
    q = Wq @ query
    logits = np.array([(Wk @ k) @ q for k in keys]) / np.sqrt(len(query))
    weights = softmax(logits)
    mixed = sum(weight * (Wv @ k) for weight, k in zip(weights, keys))
    return Wo @ mixed


class TestAttention(SimpleTestCase):
    """
    Test scaled dot-product attention of one query over a token set
    """

    def setUp(self):
        torch.manual_seed(0)
        self.proj = AttentionProjections(4).double()

    def test_single_key(self):
        v = torch.randn(1, 4, dtype=torch.float64)
        expected = self.proj.o(self.proj.v(v[0]))
        for q in torch.randn(3, 4, dtype=torch.float64):
            torch.testing.assert_close(attn(q, v, v, self.proj), expected)

    def test_identical_rows(self):
        v = torch.randn(4, dtype=torch.float64)
        K = v.expand(6, 4)
        torch.testing.assert_close(attn(torch.randn(4, dtype=torch.float64), K, K, self.proj),
                                   self.proj.o(self.proj.v(v)))

    def test_hand_evaluated(self):
        proj = AttentionProjections(2).double()
        identity_projections(proj)
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        K = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        # logits 2/sqrt(2) and 0
        a = np.exp(np.sqrt(2)) / (np.exp(np.sqrt(2)) + 1)
        expected = torch.tensor([2 * a, 1 - a], dtype=torch.float64)
        torch.testing.assert_close(attn(q, K, K, proj), expected)

    def test_batched_windows(self):
        K = torch.randn(2, 3, 5, 4, dtype=torch.float64)
        q = torch.randn(4, dtype=torch.float64)
        batched = attn(q, K, K, self.proj)
        self.assertEqual(tuple(batched.shape), (2, 3, 4))
        torch.testing.assert_close(batched[1, 2], attn(q, K[1, 2], K[1, 2], self.proj))

    def test_nan_input(self):
        K = torch.randn(3, 4, dtype=torch.float64)
        K[1, 2] = float('nan')
        with self.assertRaises(NumericInputError):
            attn(torch.zeros(4, dtype=torch.float64), K, K, self.proj)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            attn(torch.zeros(4, dtype=torch.float64), torch.zeros(3, 2, dtype=torch.float64),
                 torch.zeros(3, 2, dtype=torch.float64), self.proj)

    def test_two_heads(self):
        proj = AttentionProjections(4, heads=2).double()
        K = torch.randn(5, 4, dtype=torch.float64)
        out = attn(torch.randn(4, dtype=torch.float64), K, K, proj)
        self.assertEqual(tuple(out.shape), (4,))
        self.assertTrue(torch.isfinite(out).all())


class TestMagnificationAwareBlock(SimpleTestCase):
    """
    Test the gated magnification-token injection
    """

    def setUp(self):
        self.params = FusionNetwork(FusionConfig(level_count=2, token_dim=4))

    def test_zero_gate_identity(self):
        set_gates(self.params, gamma=0.0)
        X = random_grids(1, dim=4, size=2)[0]
        self.assertTrue(torch.equal(mab_forward(X, 1, self.params).tokens, X.tokens))

    def test_identical_tokens(self):
        set_gates(self.params, gamma=1.0)
        identity_projections(self.params.mab)
        v = torch.tensor([0.5, -1.0, 2.0, 0.25], dtype=torch.float64)
        X = grid(v.expand(3, 3, 4))
        torch.testing.assert_close(mab_forward(X, 0, self.params).tokens, (2 * v).expand(3, 3, 4))

    def test_matches_oracle(self):
        set_gates(self.params, gamma=0.7)
        X = random_grids(1, dim=4, size=2, seed=3)[0]
        keys = X.tokens.numpy().reshape(-1, 4)
        token = self.params.magnification_tokens[1].detach().numpy()
        expected = keys + 0.7 * oracle_attention(token, keys, self.params.mab)
        np.testing.assert_allclose(mab_forward(X, 1, self.params).tokens.detach().numpy().reshape(-1, 4),
                                   expected, rtol=1e-10, atol=1e-12)

    def test_missing_token(self):
        with self.assertRaises(McfnConfigurationError):
            mab_forward(random_grids(1, dim=4, size=2)[0], 2, self.params)


class TestResampleGrid(SimpleTestCase):
    """
    Test bringing neighbour token grids onto the current grid
    """

    def test_same_shape(self):
        X = random_grids(1, dim=3, size=4)[0]
        self.assertIs(resample_grid(X, (4, 4)), X)

    def test_block_mean(self):
        a, b, c, d = (torch.full((2,), float(v), dtype=torch.float64) for v in (1, 2, 3, 6))
        X = grid(torch.stack([torch.stack([a, b]), torch.stack([c, d])]))
        resampled = resample_grid(X, (1, 1))
        torch.testing.assert_close(resampled.tokens, torch.full((1, 1, 2), 3.0, dtype=torch.float64))

    def test_constant_extension(self):
        token = torch.tensor([1.5, -2.0, 0.5], dtype=torch.float64)
        resampled = resample_grid(grid(token.reshape(1, 1, 3)), (2, 2))
        torch.testing.assert_close(resampled.tokens, token.expand(2, 2, 3))

    def test_cell_size_follows(self):
        X = TokenGrid(tokens=torch.zeros(4, 4, 2, dtype=torch.float64), level_index=0, cell_size=(8.0, 8.0))
        self.assertEqual(resample_grid(X, (2, 2)).cell_size, (16.0, 16.0))

    def test_non_integer_factor(self):
        with self.assertRaises(ResampleError):
            resample_grid(random_grids(1, dim=2, size=6)[0], (4, 4))


class TestCrossMagnificationBlock(SimpleTestCase):
    """
    Test the fusion of adjacent-level context
    """

    def setUp(self):
        self.params = FusionNetwork(FusionConfig(level_count=2, token_dim=2, window=2, grid_size=16))

    def test_zero_weights_identity(self):
        set_gates(self.params, u=0.0, w=0.0)
        lower, X = random_grids(2, dim=2, size=4)
        self.assertTrue(torch.equal(cmb_forward(X, 1, self.params, lower=lower).tokens, X.tokens))

    def test_no_neighbours_identity(self):
        set_gates(self.params, u=3.0, w=-2.0)
        X = random_grids(1, dim=2, size=4)[0]
        self.assertTrue(torch.equal(cmb_forward(X, 0, self.params).tokens, X.tokens))

    def test_matches_windowed_oracle(self):
        set_gates(self.params, u=0.4, w=-0.3)
        lower, X = random_grids(2, dim=2, size=4, seed=7)
        token = self.params.magnification_tokens[0].detach().numpy()
        neighbour = lower.tokens.numpy()
        expected = X.tokens.numpy().copy()
        for wy in range(2):
            for wx in range(2):
                window = neighbour[2 * wy:2 * wy + 2, 2 * wx:2 * wx + 2].reshape(-1, 2)
                context = oracle_attention(token, window, self.params.cmb)
                expected[2 * wy:2 * wy + 2, 2 * wx:2 * wx + 2] += 0.4 * context
        fused = cmb_forward(X, 1, self.params, lower=lower)
        np.testing.assert_allclose(fused.tokens.detach().numpy(), expected, rtol=1e-10, atol=1e-12)

    def test_upper_neighbour_oracle(self):
        set_gates(self.params, w=0.6)
        X, upper = random_grids(2, dim=2, size=4, seed=8)
        token = self.params.magnification_tokens[1].detach().numpy()
        context = oracle_attention(token, upper.tokens.numpy()[:2, :2].reshape(-1, 2), self.params.cmb)
        fused = cmb_forward(X, 0, self.params, upper=upper)
        np.testing.assert_allclose(fused.tokens.detach().numpy()[1, 0], X.tokens.numpy()[1, 0] + 0.6 * context,
                                   rtol=1e-10, atol=1e-12)

    def test_global_attention(self):
        params = FusionNetwork(FusionConfig(level_count=2, token_dim=2, cmb_global=True))
        set_gates(params, u=0.5)
        lower, X = random_grids(2, dim=2, size=4, seed=9)
        token = params.magnification_tokens[0].detach().numpy()
        context = oracle_attention(token, lower.tokens.numpy().reshape(-1, 2), params.cmb)
        fused = cmb_forward(X, 1, params, lower=lower)
        np.testing.assert_allclose(fused.tokens.detach().numpy(), X.tokens.numpy() + 0.5 * context,
                                   rtol=1e-10, atol=1e-12)

    def test_dimension_mismatch(self):
        X = random_grids(1, dim=2, size=4)[0]
        with self.assertRaises(DimensionError):
            cmb_forward(X, 1, self.params, lower=random_grids(1, dim=3, size=4)[0])

    def test_window_must_tile(self):
        lower, X = random_grids(2, dim=2, size=3)
        with self.assertRaises(McfnConfigurationError):
            cmb_forward(X, 1, self.params, lower=lower)


class TestDecoder(SimpleTestCase):
    """
    Test the convolutional decoder
    """

    def test_upsampling_factors(self):
        self.assertEqual(upsampling_factors(16, 256), (4, 4))
        self.assertEqual(upsampling_factors(16, 128), (4, 2))
        self.assertEqual(upsampling_factors(16, 16), (1, 1))

    def test_zero_decoder(self):
        params = FusionNetwork(FusionConfig(level_count=1, token_dim=8))
        zero_decoder(params)
        heatmap = decode(grid(torch.zeros(16, 16, 8)), params)
        self.assertEqual(heatmap.shape, (256, 256))
        self.assertTrue(torch.equal(heatmap.values, torch.full((256, 256), 0.5, dtype=torch.float64)))

    def test_random_range(self):
        params = FusionNetwork(FusionConfig(level_count=1, token_dim=8, seed=4))
        values = decode(random_grids(1)[0], params).values
        self.assertEqual(tuple(values.shape), (256, 256))
        self.assertTrue(torch.isfinite(values).all())
        self.assertTrue(((values > 0) & (values < 1)).all())

    def test_invalid_output_size(self):
        with self.assertRaises(McfnConfigurationError):
            FusionNetwork(FusionConfig(output_size=200))


class TestFusionNetwork(SimpleTestCase):
    """
    Test the composed forward pass and its contracts
    """

    def test_gate_zero_identity(self):
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8))
        set_gates(params, gamma=0.0, u=0.0, w=0.0)
        grids = random_grids(3)
        with mock.patch('mcfn.fusion.decode', side_effect=lambda X, p: X):
            for m in range(3):
                self.assertTrue(torch.equal(predict_level(grids, m, params).tokens, grids[m].tokens))

    def test_gate_zero_zero_decoder(self):
        slide = generate_synthetic_slide(0, SynthConfig(base_size=256, level_count=3))
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8))
        set_gates(params, gamma=0.0, u=0.0, w=0.0)
        zero_decoder(params)
        heatmap = mcfn_forward(slide, 1, params, EncoderSpec(token_dim=8))
        self.assertTrue(torch.equal(heatmap.values, torch.full((256, 256), 0.5, dtype=torch.float64)))

    def test_deterministic(self):
        slide = generate_synthetic_slide(1, SynthConfig(base_size=256, level_count=3))
        spec = EncoderSpec(token_dim=8)
        a = mcfn_forward(slide, 2, FusionNetwork(FusionConfig(level_count=3, token_dim=8)), spec)
        b = mcfn_forward(slide, 2, FusionNetwork(FusionConfig(level_count=3, token_dim=8)), spec)
        self.assertTrue(torch.equal(a.values, b.values))

    def test_seed_changes_initialization(self):
        a = FusionNetwork(FusionConfig(level_count=2, token_dim=8, seed=1))
        b = FusionNetwork(FusionConfig(level_count=2, token_dim=8, seed=2))
        self.assertFalse(torch.equal(a.magnification_tokens, b.magnification_tokens))

    def test_construction_leaves_global_rng(self):
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        FusionNetwork(FusionConfig(level_count=2, token_dim=8))
        self.assertTrue(torch.equal(torch.rand(3), expected))

    def test_concurrent_construction_matches_serial(self):
        config = FusionConfig(level_count=3, token_dim=8, seed=5)
        reference = FusionNetwork(config).state_dict()
        switch = sys.getswitchinterval()
        sys.setswitchinterval(1e-6)
        try:
            with ThreadPoolExecutor(max_workers=8) as pool:
                networks = list(pool.map(lambda _: FusionNetwork(config), range(32)))
        finally:
            sys.setswitchinterval(switch)
        for network in networks:
            for name, value in network.state_dict().items():
                self.assertTrue(torch.equal(value, reference[name]), name)

    def test_projections_are_orthogonal(self):
        params = FusionNetwork(FusionConfig(level_count=2, token_dim=8))
        for layer in (params.mab.q, params.cmb.o):
            np.testing.assert_allclose((layer.weight.T @ layer.weight).detach().numpy(), np.eye(8), atol=1e-5)

    def test_magnification_conditioning_is_live(self):
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8))
        grids = random_grids(3)
        before = predict_level(grids, 1, params).values.detach().clone()
        with torch.no_grad():
            params.magnification_tokens[[1, 2]] = params.magnification_tokens[[2, 1]].clone()
        self.assertFalse(torch.equal(predict_level(grids, 1, params).values, before))

    def test_boundary_levels(self):
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8))
        with mock.patch('mcfn.fusion.cmb_forward', wraps=fusion.cmb_forward) as spy:
            predict_all(random_grids(3), params)
        self.assertEqual(spy.call_count, 3)
        calls = {c.args[1]: c.kwargs for c in spy.call_args_list}
        self.assertIsNone(calls[0]['lower'])
        self.assertIsNotNone(calls[0]['upper'])
        self.assertIsNotNone(calls[2]['lower'])
        self.assertIsNone(calls[2]['upper'])
        self.assertEqual(calls[1]['lower'].level_index, 0)
        self.assertEqual(calls[1]['upper'].level_index, 2)

    def test_neighbours_are_post_mab(self):
        params = FusionNetwork(FusionConfig(level_count=2, token_dim=8))
        grids = random_grids(2)
        with mock.patch('mcfn.fusion.cmb_forward', wraps=fusion.cmb_forward) as spy:
            predict_level(grids, 1, params)
        lower = spy.call_args.kwargs['lower']
        torch.testing.assert_close(lower.tokens, mab_forward(grids[0], 0, params).tokens)

    def test_level_count_mismatch(self):
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8))
        with self.assertRaises(McfnConfigurationError):
            predict_level(random_grids(4), 0, params)

    def test_single_level(self):
        params = FusionNetwork(FusionConfig(level_count=1, token_dim=8))
        heatmap = predict_level(random_grids(1), 0, params)
        self.assertEqual(heatmap.level_index, 0)

    def test_ablation_freezes_gates(self):
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8, use_mab=False, use_cmb_high=False))
        self.assertEqual(float(params.gamma), 0.0)
        self.assertEqual(float(params.w), 0.0)
        self.assertEqual(float(params.u), 0.1)
        trainable = {id(p) for p in params.trainable_parameters()}
        self.assertNotIn(id(params.gamma), trainable)
        self.assertNotIn(id(params.w), trainable)
        self.assertIn(id(params.u), trainable)

    def test_ablated_neighbour_is_not_read(self):
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8, use_cmb_low=False))
        with mock.patch('mcfn.fusion.cmb_forward', wraps=fusion.cmb_forward) as spy:
            predict_level(random_grids(3), 1, params)
        self.assertIsNone(spy.call_args.kwargs['lower'])

    def test_gradients_every_group(self):
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8))
        grids = random_grids(3, seed=5)
        weights = torch.rand(256, 256, generator=torch.Generator().manual_seed(1), dtype=torch.float64)

        def loss():
            return sum((predict_level(grids, m, params).values * weights).sum() for m in range(3))

        groups = params.parameter_groups()
        coordinates = sample_coordinates(groups, 8, torch.Generator().manual_seed(2))
        self.assertEqual({c[0] for c in coordinates}, set(groups))
        self.assertGreaterEqual(len(coordinates), 50)
        for c in check_gradients(loss, groups, coordinates):
            self.assertLessEqual(abs(c.analytic - c.numeric), 1e-4 * max(abs(c.analytic), abs(c.numeric)) + 1e-8,
                                 f'{c.group}[{c.tensor_index}][{c.flat_index}]')


class TestCheckpoints(SimpleTestCase):
    """
    Test saving and restoring fusion network parameters
    """

    def test_round_trip(self):
        config = FusionConfig(level_count=3, token_dim=8)
        params = FusionNetwork(config)
        set_gates(params, gamma=0.3, u=-0.2, w=1.7)
        grids = random_grids(3)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'mcfn.ckpt'
            save_checkpoint(path, params, metadata={'seed': 0, 'config': config.to_dict()})
            restored = FusionNetwork(FusionConfig(level_count=3, token_dim=8, seed=99))
            metadata = load_checkpoint(path, restored)
        self.assertEqual(metadata['config'], config.to_dict())
        for m in range(3):
            self.assertTrue(torch.equal(predict_level(grids, m, params).values,
                                        predict_level(grids, m, restored).values))

    def test_missing_checkpoint(self):
        with self.assertRaises(MissingDependencyError) as cm:
            load_checkpoint('/nonexistent/mcfn.ckpt', FusionNetwork(FusionConfig(level_count=1, token_dim=8)))
        self.assertEqual(cm.exception.producer, 'train_cmt')
