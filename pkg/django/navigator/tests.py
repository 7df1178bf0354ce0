import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, tag
from PIL import Image

from classify.budgets import BUDGET_COLUMNS
from core.hashing import tree_hash
from metrics.report import REPORT_COLUMNS
from mst.memory import MemoryBank
from slides.exceptions import SynthConfigError
from slides.pyramid import Region
from slides.storage import load_pyramid
from slides.synth import SynthConfig, generate_synthetic_slide

from .config import RunConfig, apply_overrides, load_run_config, parse_override
from .datasets import assign_splits, read_index
from .exceptions import OverlayLevelMismatchError, RunConfigError
from .models import RunRecord
from .overlays import blend_heatmap, render_overlays


def desk_config(output, **sections):
    """
    A config small enough for the command tests: 3 levels of at most 256 px, 8-dimensional tokens
    """
    data = {
        'output': str(output),
        'seed': 1,
        'pyramid': {'base_size': 256, 'level_count': 3},
        'dataset': {'slide_count': 8, 'test_fraction': 0.25},
        'encoder': {'token_dim': 8},
        'mcfn': {'level_count': 3, 'token_dim': 8},
        'optimizer': {'steps': 6, 'log_every': 0},
        'classifier': {'token_dim': 8, 'hidden_dim': 4},
        'classifier_optimizer': {'epochs': 2},
        'agent': {'max_steps': 4},
        'backend': {'kind': 'scripted', 'policy': 'zoom_all'},
        'budgets': {'fractions': [0.2, 1.0]},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return data


def write_config(directory, data):
    path = Path(directory) / 'config.json'
    with open(path, 'w') as f:
        json.dump(data, f)
    return str(path)


def run_command(name, *args, **options):
    return call_command(name, *args, stdout=StringIO(), stderr=StringIO(), **options)


def read_manifest(directory):
    with open(Path(directory) / settings.NAVIGATOR_RUN_MANIFEST) as f:
        return json.load(f)


class TestRunConfig(SimpleTestCase):
    """
    Test loading, overriding, validating and hashing run configs
    """

    def test_defaults_validate(self):
        config = RunConfig().validate()
        self.assertEqual(config.pyramid.level_count, config.mcfn.level_count)

    def test_round_trip_keeps_hash(self):
        config = RunConfig.from_dict(desk_config('/tmp/run')).validate()
        restored = RunConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        self.assertEqual(restored.config_hash(), config.config_hash())
        self.assertEqual(restored.pyramid.blob_count, (1, 4))

    def test_hash_ignores_output_and_jobs(self):
        a = RunConfig.from_dict(desk_config('/tmp/a'))
        b = RunConfig.from_dict({**desk_config('/tmp/b'), 'jobs': 4})
        self.assertEqual(a.config_hash(), b.config_hash())
        c = RunConfig.from_dict({**desk_config('/tmp/a'), 'seed': 2})
        self.assertNotEqual(a.config_hash(), c.config_hash())

    def test_unknown_field(self):
        with self.assertRaises(RunConfigError) as cm:
            RunConfig.from_dict({'mcfn': {'depth': 3}})
        self.assertEqual(cm.exception.field, 'mcfn.depth')

    def test_unknown_section(self):
        with self.assertRaises(RunConfigError) as cm:
            RunConfig.from_dict({'scheduler': {}})
        self.assertEqual(cm.exception.field, 'scheduler')

    def test_wrong_type_names_field(self):
        with self.assertRaises(RunConfigError) as cm:
            RunConfig.from_dict(apply_overrides({}, ['mcfn.window=wide']))
        self.assertIn('mcfn.window', str(cm.exception))

    def test_inconsistent_sections(self):
        with self.assertRaises(RunConfigError) as cm:
            RunConfig.from_dict({'encoder': {'token_dim': 16}}).validate()
        self.assertEqual(cm.exception.field, 'mcfn.token_dim')

    def test_section_validation_names_field(self):
        with self.assertRaises(SynthConfigError) as cm:
            RunConfig.from_dict({'pyramid': {'level_factor': 1}}).validate()
        self.assertEqual(cm.exception.field, 'pyramid.level_factor')

    def test_parse_override(self):
        self.assertEqual(parse_override('mcfn.window=8'), ('mcfn', 'window', 8))
        self.assertEqual(parse_override('backend.policy=random'), ('backend', 'policy', 'random'))
        self.assertEqual(parse_override('budgets.fractions=[0.5, 1.0]'), ('budgets', 'fractions', [0.5, 1.0]))
        with self.assertRaises(RunConfigError):
            parse_override('mcfn.window')

    def test_flags_win(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(tmp, {**desk_config(tmp), 'seed': 3})
            config = load_run_config(path, seed=5, overrides=['optimizer.steps=9'])
        self.assertEqual(config.seed, 5)
        self.assertEqual(config.optimizer.steps, 9)
        self.assertEqual(config.encoder.token_dim, 8)

    def test_missing_config_file(self):
        with self.assertRaises(RunConfigError):
            load_run_config('/nonexistent/config.json')

    def test_splits(self):
        splits = assign_splits(40, 0.2, seed=0)
        self.assertEqual(splits.count('test'), 8)
        self.assertEqual(splits, assign_splits(40, 0.2, seed=0))
        self.assertEqual(assign_splits(0, 0.2, seed=0), [])


class TestOverlays(SimpleTestCase):
    """
    Test heatmap blending and trace outlines
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.slide = generate_synthetic_slide(0, SynthConfig(base_size=256, level_count=3))

    def test_zero_heatmap_leaves_raster(self):
        raster = self.slide.raster(1)
        np.testing.assert_array_equal(blend_heatmap(raster, np.zeros((256, 256))), raster)

    def test_full_heatmap_is_colour(self):
        raster = self.slide.raster(2)
        self.assertFalse(np.array_equal(blend_heatmap(raster, np.ones((256, 256))), raster))

    def test_output_dimensions(self):
        heatmaps = [np.random.default_rng(m).random((256, 256)) for m in range(3)]
        for (image, _), level in zip(render_overlays(self.slide, heatmaps), self.slide.levels):
            self.assertEqual(image.size, (level.width, level.height))

    def test_step_labels(self):
        regions = [Region(0, 0, 0, 16, 16, step_selected=0), Region(1, 32, 32, 16, 16, step_selected=1),
                   Region(2, 128, 128, 32, 32, step_selected=2)]
        for _, labels in render_overlays(self.slide, None, regions):
            self.assertEqual(sorted(set(labels)), ['0', '1', '2'])

    def test_level_mismatch(self):
        with self.assertRaises(OverlayLevelMismatchError):
            render_overlays(self.slide, [np.zeros((256, 256))] * 2)
        with self.assertRaises(OverlayLevelMismatchError):
            render_overlays(self.slide, None, [Region(5, 0, 0, 4, 4)])


class TestSynthCommand(TestCase):
    """
    Test the synth command and the run bookkeeping shared by every command
    """

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.config = write_config(self.tmp, desk_config(self.tmp, dataset={'slide_count': 4}))

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_deterministic(self):
        run_command('synth', config=self.config, output=str(self.tmp / 'a'))
        run_command('synth', config=self.config, output=str(self.tmp / 'b'))
        exclude = (settings.NAVIGATOR_RUN_MANIFEST,)
        self.assertEqual(tree_hash(self.tmp / 'a', exclude), tree_hash(self.tmp / 'b', exclude))
        index = read_index(self.tmp / 'a')
        self.assertEqual(len(index['slides']), 4)
        self.assertEqual([entry.split for entry in index['slides']].count('test'), 1)

    def test_no_slides(self):
        run_command('synth', config=self.config, overrides=['dataset.slide_count=0'])
        self.assertEqual(read_index(self.tmp / 'dataset')['slides'], [])

    def test_invalid_level_factor(self):
        with self.assertRaises(CommandError) as cm:
            run_command('synth', config=self.config, overrides=['pyramid.level_factor=1'])
        self.assertEqual(cm.exception.returncode, 2)
        self.assertIn('pyramid.level_factor', str(cm.exception))

    def test_existing_output(self):
        run_command('synth', config=self.config, overrides=['dataset.slide_count=1'])
        with self.assertRaises(CommandError) as cm:
            run_command('synth', config=self.config, overrides=['dataset.slide_count=1'])
        self.assertEqual(cm.exception.returncode, 2)
        run_command('synth', config=self.config, overrides=['dataset.slide_count=1'], force=True)

    def test_manifest_and_record(self):
        run_command('synth', config=self.config, seed=7)
        manifest = read_manifest(self.tmp / 'dataset')
        config_hash = load_run_config(self.config, seed=7).config_hash()
        self.assertEqual(manifest['command'], 'synth')
        self.assertEqual(manifest['config_hash'], config_hash)
        self.assertEqual(read_index(self.tmp / 'dataset')['config_hash'], config_hash)
        self.assertIn('index.json', manifest['outputs'])
        record = RunRecord.objects.get()
        self.assertEqual(record.status, RunRecord.STATUS_SUCCEEDED)
        self.assertEqual(record.config_hash, config_hash)

    def test_failed_run_recorded(self):
        with self.assertRaises(CommandError) as cm:
            run_command('navigate', config=self.config)
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn('synth', str(cm.exception))
        self.assertEqual(RunRecord.objects.get().status, RunRecord.STATUS_FAILED)


class TestPipelineCommands(TestCase):
    """
    Test train_cmt, navigate, classify, evaluate and render on a shared 8-slide dataset
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.config = write_config(cls.tmp, desk_config(cls.tmp))
        run_command('synth', config=cls.config)
        run_command('train_cmt', config=cls.config)
        run_command('navigate', config=cls.config)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)
        super().tearDownClass()

    def test_train_cmt_outputs(self):
        curve = pd.read_csv(self.tmp / 'cmt' / 'loss_curve.csv')
        self.assertEqual(list(curve.columns), ['step', 'total', 'l1', 'dice', 'focal'])
        self.assertEqual(len(curve), 6)
        manifest = read_manifest(self.tmp / 'cmt')
        self.assertIn('held_out_loss', manifest)
        self.assertIn('dataset', manifest['inputs'])

    def test_navigate_traces(self):
        traces = sorted((self.tmp / 'traces').glob('*.jsonl'))
        self.assertEqual(len(traces), 8)
        config_hash = load_run_config(self.config).config_hash()
        for path in traces:
            bank = MemoryBank.load(path)
            self.assertEqual(bank.config_hash, config_hash)
            self.assertLessEqual(len(bank), 4)
            self.assertEqual([record.level for record in bank.records][:2], [1, 2])
        self.assertEqual(len(read_manifest(self.tmp / 'traces')['stop_reasons']), 8)

    def test_navigate_four_slides(self):
        output = self.tmp / 'four'
        run_command('synth', config=self.config, output=str(output / 'dataset'), overrides=['dataset.slide_count=4'])
        run_command('navigate', config=self.config, output=str(output / 'traces'), dataset=str(output / 'dataset'),
                    overrides=['dataset.slide_count=4', 'backend.policy=move_twice_then_zoom'])
        traces = sorted((output / 'traces').glob('*.jsonl'))
        self.assertEqual(len(traces), 4)
        for path in traces:
            self.assertLessEqual(len(MemoryBank.load(path)), 4)
        self.assertEqual(len(read_manifest(output / 'traces')['stop_reasons']), 4)

    def test_navigate_missing_checkpoint(self):
        with self.assertRaises(CommandError) as cm:
            run_command('navigate', config=self.config, output=str(self.tmp / 'nothing'),
                        checkpoint=str(self.tmp / 'missing.ckpt'))
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn('train_cmt', str(cm.exception))

    def test_evaluate_oracle(self):
        run_command('evaluate', config=self.config, output=str(self.tmp / 'oracle'), oracle=True, split='all')
        table = pd.read_csv(self.tmp / 'oracle' / 'metrics.csv')
        self.assertEqual(list(table.columns), REPORT_COLUMNS)
        slides = table[table['slide_id'] != 'mean']
        self.assertEqual(len(slides), 8 * 3)
        for rho, jsd, ap5 in zip(slides['rho'], slides['jsd'], slides['ap5']):
            self.assertAlmostEqual(rho, 1.0, places=12)
            self.assertAlmostEqual(jsd, 0.0, places=12)
            self.assertEqual(ap5, 1.0)
        self.assertEqual(table['level'].astype(str).iloc[-1], 'all')

    def test_evaluate_model(self):
        run_command('evaluate', config=self.config, output=str(self.tmp / 'model'))
        table = pd.read_csv(self.tmp / 'model' / 'metrics.csv')
        self.assertEqual(len(table[table['slide_id'] != 'mean']), 2 * 3)
        self.assertTrue(table['ap5'].between(0, 1).all())

    def test_evaluate_refuses_mixed_hashes(self):
        with self.assertRaises(CommandError) as cm:
            run_command('evaluate', config=self.config, output=str(self.tmp / 'mixed'), oracle=True, seed=2)
        self.assertEqual(cm.exception.returncode, 2)
        run_command('evaluate', config=self.config, output=str(self.tmp / 'mixed'), oracle=True, seed=2,
                    allow_mixed=True, force=True)
        self.assertEqual(read_manifest(self.tmp / 'mixed')['mixed_inputs'], ['dataset'])

    def test_classify(self):
        run_command('classify', config=self.config)
        output = self.tmp / 'classify'
        budgets = pd.read_csv(output / 'budgets.csv')
        self.assertEqual(list(budgets.columns), BUDGET_COLUMNS)
        self.assertEqual(budgets['sampling'].tolist(), ['topk', 'random', 'topk', 'random'])
        self.assertEqual(budgets['budget'].tolist(), [0.2, 0.2, 1.0, 1.0])
        self.assertEqual(budgets['mab'].tolist(), [True] * 4)
        classification = pd.read_csv(output / 'classification.csv')
        self.assertEqual(list(classification.columns), ['method', 'fold', 'auc', 'bacc'])
        self.assertEqual(sorted(classification['method'].unique()), ['agent', 'fixed_top_level'])
        self.assertTrue((output / 'classifier.ckpt').exists())

    def test_classify_missing_traces(self):
        with self.assertRaises(CommandError) as cm:
            run_command('classify', config=self.config, output=str(self.tmp / 'no-traces'),
                        traces=str(self.tmp / 'missing'))
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn('navigate', str(cm.exception))

    def test_render(self):
        output = self.tmp / 'overlays'
        run_command('render', 'slide-0000', config=self.config, output=str(output), heatmaps='oracle')
        dataset = read_index(self.tmp / 'dataset')
        self.assertEqual(dataset['slides'][0].slide_id, 'slide-0000')
        for m, size in enumerate((64, 128, 256)):
            with Image.open(output / f'overlay_{m}.png') as image:
                self.assertEqual(image.size, (size, size))
        self.assertGreater(read_manifest(output)['regions'], 0)

    def test_render_unknown_slide(self):
        with self.assertRaises(CommandError) as cm:
            run_command('render', 'slide-9999', config=self.config, output=str(self.tmp / 'unknown'))
        self.assertEqual(cm.exception.returncode, 2)


@tag('slow')
class TestEndToEnd(TestCase):
    """
    Test the whole pipeline on the desk-scale synthetic task
    """

    def test_pipeline(self):
        with tempfile.TemporaryDirectory() as tmp:
            # small tumours, so that the top 10% of cells can hold most of the tumour area
            data = desk_config(tmp, pyramid={'base_size': 1024, 'level_count': 5, 'blob_count': [1, 2],
                                             'blob_axes': [0.05, 0.12], 'tumor_fraction': [0.02, 0.08],
                                             'max_attempts': 400},
                               dataset={'slide_count': 40, 'test_fraction': 0.2},
                               encoder={'token_dim': 16}, mcfn={'level_count': 5, 'token_dim': 16},
                               optimizer={'steps': 200, 'learning_rate': 5e-3, 'log_every': 50},
                               classifier={'token_dim': 16},
                               classifier_optimizer={'epochs': 10}, agent={'max_steps': 8})
            config = write_config(tmp, data)
            for command in ('synth', 'train_cmt', 'navigate', 'classify', 'evaluate'):
                run_command(command, config=config, jobs=4)

            test_slides = [entry for entry in read_index(Path(tmp) / 'dataset')['slides'] if entry.split == 'test']
            self.assertEqual(len(test_slides), 8)
            table = pd.read_csv(Path(tmp) / 'evaluate' / 'metrics.csv')
            overall = table[(table['slide_id'] == 'mean') & (table['level'].astype(str) == 'all')].iloc[0]
            tumour_fraction = np.mean([load_pyramid(Path(tmp) / 'dataset' / entry.path).tumor_mask.mean()
                                       for entry in test_slides])
            self.assertGreaterEqual(overall['rec'], 0.8)
            self.assertGreaterEqual(overall['p10'], 3 * tumour_fraction)
            cmt = read_manifest(Path(tmp) / 'cmt')
            curve = pd.read_csv(Path(tmp) / 'cmt' / 'loss_curve.csv')
            self.assertLess(curve['total'].tail(20).mean(), curve['total'].head(20).mean())
            self.assertLess(cmt['held_out_loss'], curve['total'].head(5).mean())
            self.assertEqual(RunRecord.objects.filter(status=RunRecord.STATUS_SUCCEEDED).count(), 5)
