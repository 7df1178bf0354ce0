import json
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag
from PIL import Image

from .exceptions import (DimensionMismatchError, LevelNotFoundError, ManifestMissingError, SynthConfigError,
                         ValueRangeError)
from .pyramid import MagnificationPyramid, Region, SlideLabel, build_levels, map_region
from .resampling import area_resample, block_max, block_mean
from .storage import load_pyramid, save_pyramid
from .synth import SynthConfig, generate_synthetic_slide

SMALL = dict(base_size=256, level_count=4)


def make_pyramid(size=64, magnifications=(1.25, 2.5, 5, 10), nav=False):
    levels = build_levels(size, size, magnifications)
    rasters = [np.zeros((level.height, level.width, 3), dtype=np.uint8) for level in levels]
    navs = [np.zeros(level.shape) for level in levels] if nav else None
    return MagnificationPyramid('test', levels, rasters, nav_annotations=navs)


class TestMapRegion(SimpleTestCase):
    """
    Test the cross-level coordinate mapping
    """

    def setUp(self):
        self.pyramid = make_pyramid(size=80)

    def test_exact_factor_up(self):
        mapped = map_region(Region(0, 3, 4, 2, 2, score=0.4, step_selected=2), 3, self.pyramid)
        self.assertEqual(mapped.key, (3, 24, 32, 16, 16))
        self.assertEqual((mapped.score, mapped.step_selected), (0.4, 2))

    def test_same_level_is_identity(self):
        region = Region(2, 5, 6, 7, 8, score=0.9)
        self.assertIs(map_region(region, 2, self.pyramid), region)

    def test_outward_rounding_down(self):
        mapped = map_region(Region(3, 5, 5, 3, 3), 0, self.pyramid)
        self.assertEqual(mapped.key, (0, 0, 0, 1, 1))

    def test_round_trip_covers_original(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            w, h = rng.integers(1, 20, size=2)
            x, y = rng.integers(0, 80 - 20, size=2)
            region = Region(3, int(x), int(y), int(w), int(h))
            source_level = int(rng.integers(0, 3))
            back = map_region(map_region(region, source_level, self.pyramid), 3, self.pyramid)
            self.assertLessEqual(back.x, region.x)
            self.assertLessEqual(back.y, region.y)
            self.assertGreaterEqual(back.x + back.w, region.x + region.w)
            self.assertGreaterEqual(back.y + back.h, region.y + region.h)

    def test_round_trip_exact_when_divisible(self):
        region = Region(3, 16, 8, 16, 24)
        down = map_region(region, 1, self.pyramid)
        self.assertEqual(map_region(down, 3, self.pyramid).key, region.key)

    def test_unknown_level(self):
        with self.assertRaises(LevelNotFoundError):
            map_region(Region(0, 0, 0, 1, 1), 9, self.pyramid)

    def test_result_clamped_to_level(self):
        mapped = map_region(Region(2, 38, 38, 2, 2), 3, self.pyramid)
        self.assertLessEqual(mapped.x + mapped.w, 80)
        self.assertLessEqual(mapped.y + mapped.h, 80)


class TestResampling(SimpleTestCase):
    """
    Test block means, area resampling and block-max mask rendering
    """

    def test_block_mean_conserves_mean(self):
        image = np.random.default_rng(0).uniform(0, 255, size=(64, 64, 3))
        for factor in (2, 4, 8):
            self.assertAlmostEqual(block_mean(image, factor).mean(), image.mean(), delta=1e-6)

    def test_area_resample_constant(self):
        image = np.full((300, 200, 3), 17.0)
        np.testing.assert_allclose(area_resample(image, 256, 256), 17.0)

    def test_area_resample_block_mean(self):
        image = np.random.default_rng(1).uniform(size=(512, 512))
        expected = image.reshape(256, 2, 256, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(area_resample(image, 256, 256), expected)

    def test_area_resample_anisotropic(self):
        image = np.random.default_rng(2).uniform(size=(256, 512, 3))
        out = area_resample(image, 256, 256)
        self.assertEqual(out.shape, (256, 256, 3))
        np.testing.assert_allclose(out, (image[:, 0::2] + image[:, 1::2]) / 2)

    def test_area_resample_non_integer_ratio(self):
        image = np.random.default_rng(4).uniform(size=(3, 3))
        out = area_resample(image, 2, 2)
        # Output pixel (0, 0) covers input [0, 1.5) x [0, 1.5)
        weights = np.array([[1, 0.5], [0.5, 0.25]]) / 2.25
        self.assertAlmostEqual(out[0, 0], (image[:2, :2] * weights).sum())
        self.assertAlmostEqual(out.mean(), image.mean())

    def test_area_resample_upsamples_by_replication(self):
        image = np.arange(4.0).reshape(2, 2)
        np.testing.assert_array_equal(area_resample(image, 4, 4), np.kron(image, np.ones((2, 2))))

    def test_block_max(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[5, 2] = 1
        out = block_max(mask, 4, 4)
        self.assertEqual(out.sum(), 1)
        self.assertEqual(out[2, 1], 1)

    def test_block_max_uneven(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[2, 2] = 1
        out = block_max(mask, 2, 2)
        # The middle pixel lies in both halves of each axis
        np.testing.assert_array_equal(out, np.ones((2, 2)))


class TestPyramidModel(SimpleTestCase):
    """
    Test the pyramid invariants
    """

    def test_arrays_are_read_only(self):
        pyramid = make_pyramid()
        with self.assertRaises(ValueError):
            pyramid.rasters[0][0, 0, 0] = 1

    def test_levels_must_increase(self):
        levels = build_levels(64, 64, (1.25, 2.5))
        swapped = (levels[1], levels[0])
        rasters = [np.zeros((level.height, level.width, 3), dtype=np.uint8) for level in swapped]
        with self.assertRaises(Exception):
            MagnificationPyramid('bad', swapped, rasters)

    def test_nav_shape_checked(self):
        levels = build_levels(64, 64, (5, 10))
        rasters = [np.zeros((level.height, level.width, 3), dtype=np.uint8) for level in levels]
        with self.assertRaises(DimensionMismatchError):
            MagnificationPyramid('bad', levels, rasters, nav_annotations=[np.zeros((64, 64))] * 2)

    def test_tumor_mask_values(self):
        levels = build_levels(8, 8, (10,))
        rasters = [np.zeros((8, 8, 3), dtype=np.uint8)]
        with self.assertRaises(ValueRangeError):
            MagnificationPyramid('bad', levels, rasters, tumor_mask=np.full((8, 8), 2))

    def test_build_levels_scales(self):
        levels = build_levels(1024, 1024, (0.625, 1.25, 2.5, 5, 10))
        self.assertEqual([level.width for level in levels], [64, 128, 256, 512, 1024])
        self.assertEqual(levels[0].scale_to_base, Fraction(16))


class TestSynth(SimpleTestCase):
    """
    Test the synthetic slide generator
    """

    def test_deterministic(self):
        config = SynthConfig(**SMALL)
        a = generate_synthetic_slide(5, config)
        b = generate_synthetic_slide(5, config)
        for x, y in zip(a.rasters + a.nav_annotations, b.rasters + b.nav_annotations):
            self.assertEqual(x.tobytes(), y.tobytes())
        self.assertEqual(a.tumor_mask.tobytes(), b.tumor_mask.tobytes())
        self.assertEqual(a.label, b.label)

    def test_zero_blobs(self):
        pyramid = generate_synthetic_slide(1, SynthConfig(blob_count=(0, 0), **SMALL))
        self.assertEqual(pyramid.tumor_mask.sum(), 0)
        for nav in pyramid.nav_annotations:
            self.assertEqual(nav.max(), 1.0)

    def test_nav_max_is_one(self):
        pyramid = generate_synthetic_slide(2, SynthConfig(**SMALL))
        for nav in pyramid.nav_annotations:
            self.assertTrue(nav.max() == 1.0 or nav.max() == 0.0)
            self.assertGreaterEqual(nav.min(), 0.0)

    @tag('slow')
    def test_tumor_fraction_band(self):
        pyramid = generate_synthetic_slide(7, SynthConfig(level_count=5, base_size=2048))
        fraction = pyramid.tumor_mask.mean()
        self.assertGreaterEqual(fraction, 0.02)
        self.assertLessEqual(fraction, 0.3)
        self.assertEqual([level.width for level in pyramid.levels], [128, 256, 512, 1024, 2048])

    def test_lower_levels_are_block_means(self):
        pyramid = generate_synthetic_slide(3, SynthConfig(**SMALL))
        top = pyramid.rasters[-1].astype(np.float64)
        lower = pyramid.rasters[-2].astype(np.float64)
        # Both come from the same unquantized raster, so they agree up to rounding
        self.assertLessEqual(np.abs(block_mean(top, 2) - lower).max(), 1.0)

    def test_fixed_label(self):
        pyramid = generate_synthetic_slide(3, SynthConfig(label='melanoma', **SMALL))
        self.assertEqual(pyramid.label, SlideLabel.MELANOMA)

    def test_invalid_base_size(self):
        with self.assertRaises(SynthConfigError) as cm:
            generate_synthetic_slide(0, SynthConfig(base_size=100, level_count=5))
        self.assertEqual(cm.exception.field, 'pyramid.base_size')

    def test_thumbnail_below_smallest_magnification(self):
        pyramid = generate_synthetic_slide(0, SynthConfig(**SMALL))
        self.assertEqual(pyramid.levels[0].name, 'thumbnail')
        self.assertEqual(float(pyramid.levels[1].magnification), 2.5)
        self.assertEqual(float(pyramid.top_level.magnification), 10.0)


class TestStorage(SimpleTestCase):
    """
    Test the pyramid directory format
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'slide'

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        pyramid = generate_synthetic_slide(11, SynthConfig(**SMALL))
        save_pyramid(pyramid, self.path)
        loaded = load_pyramid(self.path)
        self.assertEqual(loaded.slide_id, pyramid.slide_id)
        self.assertEqual(loaded.label, pyramid.label)
        self.assertEqual(loaded.levels, pyramid.levels)
        for a, b in zip(loaded.rasters, pyramid.rasters):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(loaded.tumor_mask, pyramid.tumor_mask)
        for a, b in zip(loaded.nav_annotations, pyramid.nav_annotations):
            self.assertLessEqual(np.abs(a - b).max(), 1 / 65535)

    def test_nav_endpoints(self):
        pyramid = generate_synthetic_slide(12, SynthConfig(**SMALL))
        save_pyramid(pyramid, self.path)
        with Image.open(self.path / 'nav_0.png') as image:
            stored = np.array(image)
        self.assertEqual(int(stored.max()), 65535)
        self.assertEqual(load_pyramid(self.path).nav_annotations[0].max(), 1.0)

    def test_missing_manifest(self):
        self.path.mkdir()
        with self.assertRaises(ManifestMissingError):
            load_pyramid(self.path)

    def test_dimension_mismatch(self):
        pyramid = make_pyramid(size=100, magnifications=(10,))
        save_pyramid(pyramid, self.path)
        Image.fromarray(np.zeros((100, 99, 3), dtype=np.uint8)).save(self.path / 'level_0.png')
        with self.assertRaises(DimensionMismatchError):
            load_pyramid(self.path)

    def test_tumor_mask_out_of_range(self):
        pyramid = generate_synthetic_slide(13, SynthConfig(**SMALL))
        save_pyramid(pyramid, self.path)
        Image.fromarray(np.full((256, 256), 7, dtype=np.uint8)).save(self.path / 'tumor.png')
        with self.assertRaises(ValueRangeError):
            load_pyramid(self.path)

    def test_manifest_layout(self):
        save_pyramid(generate_synthetic_slide(14, SynthConfig(**SMALL)), self.path)
        with open(self.path / 'manifest.json') as f:
            manifest = json.load(f)
        self.assertEqual(manifest['tumor_mask'], 'tumor.png')
        self.assertEqual(manifest['levels'][1]['raster'], 'level_1.png')
        self.assertEqual(manifest['levels'][1]['nav'], 'nav_1.png')
