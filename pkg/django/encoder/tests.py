from unittest import mock

import numpy as np
import torch
from django.test import SimpleTestCase, override_settings

from slides.pyramid import MagnificationPyramid, build_levels

from .encoders import EncoderSpec, ToyEncoder, encode, encode_level, render_level
from .exceptions import EncoderBackendError, EncoderSpecError


def single_level_pyramid(raster):
    height, width = raster.shape[:2]
    levels = build_levels(width, height, (10,))
    return MagnificationPyramid('test', levels, [raster])


def failing_encoder_factory(spec):
    def encoder(patches):
        raise RuntimeError('model server unavailable')
    return encoder


class TestRenderLevel(SimpleTestCase):
    """
    Test rendering a level onto the 256x256 model input
    """

    def test_constant_level(self):
        pyramid = single_level_pyramid(np.full((300, 500, 3), 42, dtype=np.uint8))
        np.testing.assert_allclose(render_level(pyramid, 0), 42.0)

    def test_block_average(self):
        raster = np.random.default_rng(0).integers(0, 256, size=(512, 512, 3), dtype=np.uint8)
        rendered = render_level(single_level_pyramid(raster), 0)
        expected = raster.astype(np.float64).reshape(256, 2, 256, 2, 3).mean(axis=(1, 3))
        np.testing.assert_allclose(rendered, expected)

    def test_non_square_level(self):
        raster = np.random.default_rng(1).integers(0, 256, size=(256, 512, 3), dtype=np.uint8)
        rendered = render_level(single_level_pyramid(raster), 0)
        self.assertEqual(rendered.shape, (256, 256, 3))
        brute = np.empty((256, 256, 3))
        for col in range(256):
            brute[:, col] = raster[:, 2 * col:2 * col + 2].astype(np.float64).mean(axis=1)
        np.testing.assert_allclose(rendered, brute)


class TestEncode(SimpleTestCase):
    """
    Test the toy encoder and the tokenization contract
    """

    def test_grid_shape(self):
        spec = EncoderSpec(patch_size=16, token_dim=8)
        grid = encode(np.random.default_rng(0).uniform(0, 255, (256, 256, 3)), spec)
        self.assertEqual(grid.grid_shape, (16, 16))
        self.assertEqual(grid.flat().shape, (256, 8))
        self.assertFalse(grid.tokens.requires_grad)

    def test_identical_patches_identical_tokens(self):
        spec = EncoderSpec(patch_size=32, token_dim=8)
        patch = np.random.default_rng(1).uniform(0, 255, (32, 32, 3))
        image = np.tile(patch, (8, 8, 1))
        tokens = encode(image, spec).flat()
        self.assertTrue(torch.equal(tokens, tokens[:1].expand_as(tokens)))

    def test_zero_image(self):
        spec = EncoderSpec(patch_size=16, token_dim=8)
        tokens = encode(np.zeros((256, 256, 3)), spec).flat()
        projected = ToyEncoder(spec)(np.zeros((1, 16, 16, 3)))
        self.assertTrue(torch.equal(tokens, projected.expand_as(tokens)))

    def test_tokens_standardized(self):
        spec = EncoderSpec(patch_size=16, token_dim=32)
        tokens = encode(np.random.default_rng(2).uniform(0, 255, (256, 256, 3)), spec).flat()
        torch.testing.assert_close(tokens.mean(dim=1), torch.zeros(256, dtype=torch.float64))
        torch.testing.assert_close(tokens.var(dim=1, correction=0), torch.ones(256, dtype=torch.float64))

    def test_deterministic_across_instances(self):
        spec = EncoderSpec(patch_size=16, token_dim=8, seed=5)
        image = np.random.default_rng(3).uniform(0, 255, (256, 256, 3))
        a = encode(image, spec, encoder=ToyEncoder(spec)).tokens
        b = encode(image, spec, encoder=ToyEncoder(spec)).tokens
        self.assertTrue(torch.equal(a, b))

    def test_seed_changes_projection(self):
        image = np.random.default_rng(3).uniform(0, 255, (256, 256, 3))
        a = encode(image, EncoderSpec(token_dim=8, seed=1)).tokens
        b = encode(image, EncoderSpec(token_dim=8, seed=2)).tokens
        self.assertFalse(torch.equal(a, b))

    def test_invalid_patch_size(self):
        with self.assertRaises(EncoderSpecError):
            encode(np.zeros((256, 256, 3)), EncoderSpec(patch_size=24))

    def test_encode_level_cell_size(self):
        raster = np.zeros((512, 1024, 3), dtype=np.uint8)
        grid = encode_level(single_level_pyramid(raster), 0, EncoderSpec(token_dim=4))
        self.assertEqual(grid.cell_size, (32.0, 64.0))
        self.assertEqual(grid.level_index, 0)

    @override_settings(NAVIGATOR_ENCODER_FACTORIES={'external': 'encoder.tests.failing_encoder_factory'})
    def test_external_failure(self):
        spec = EncoderSpec(kind='external', token_dim=4)
        with self.assertRaises(EncoderBackendError):
            encode(np.zeros((256, 256, 3)), spec, encoder=failing_encoder_factory(spec))

    def test_external_wrong_shape(self):
        spec = EncoderSpec(token_dim=4)
        bad = mock.Mock(return_value=np.zeros((10, 4)))
        with self.assertRaises(EncoderBackendError):
            encode(np.zeros((256, 256, 3)), spec, encoder=bad)
