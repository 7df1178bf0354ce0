import json
import os
import tempfile
from pathlib import Path
from unittest import mock

import httpx
import numpy as np
import torch
from django.test import SimpleTestCase, override_settings

from encoder.encoders import EncoderSpec
from mcfn.network import FusionConfig, FusionNetwork, Heatmap
from slides.pyramid import MagnificationPyramid, Region, build_levels
from slides.synth import SynthConfig, generate_synthetic_slide

from .actions import ActionKind, AgentAction, parse_action
from .agent import AgentLimits, NavigationState, StopReason, agent_run, msdm_decide
from .backends import BackendConfig, DecisionBackend, RemoteBackend, ScriptedBackend, build_backend
from .exceptions import (ActionParseError, BackendConfigError, BackendTransportError, MemoryConsistencyError,
                         PartitionError, TraceFormatError)
from .memory import MemoryBank, MemoryRecord, memory_append
from .regions import select_top_regions

API_KEY = 'sk-test-secret-key'


def random_heatmaps(level_count, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return [Heatmap(torch.rand(256, 256, generator=generator, dtype=torch.float64), m) for m in range(level_count)]


def five_level_slide(seed=0):
    return generate_synthetic_slide(seed, SynthConfig(base_size=512, level_count=5))


def run(pyramid, backend, seed=0, **limits):
    return agent_run(pyramid, None, None, backend, AgentLimits(**limits),
                     heatmaps=random_heatmaps(len(pyramid.levels), seed))


def chat_completion(content):
    return {
        'id': 'chatcmpl-test',
        'object': 'chat.completion',
        'created': 0,
        'model': 'test-model',
        'choices': [{'index': 0, 'message': {'role': 'assistant', 'content': content}, 'finish_reason': 'stop'}],
    }


def mock_client(replies, requests=None, status_code=200):
    """
    An httpx client answering chat completions with the given replies in order
    """
    replies = list(replies)

    def handler(request):
        if requests is not None:
            requests.append(request)
        if status_code != 200:
            return httpx.Response(status_code, json={'error': {'message': 'upstream unavailable'}})
        return httpx.Response(200, json=chat_completion(replies.pop(0)))

    return httpx.Client(transport=httpx.MockTransport(handler))


class FailingBackend(ScriptedBackend):

    def __init__(self, fail_at):
        super().__init__('always_move')
        self.fail_at = fail_at

    def decide(self, descriptions, prompt, memory, state, feedback=None):
        if state.step == self.fail_at:
            raise BackendTransportError('connection reset')
        return super().decide(descriptions, prompt, memory, state, feedback)


class TestParseAction(SimpleTestCase):
    """
    Test reading actions out of backend replies
    """

    def test_move_default_n(self):
        self.assertEqual(parse_action('ACTION: MOVE', 1, 5, default_move=3), AgentAction(ActionKind.MOVE, n_regions=3))

    def test_zoom(self):
        action = parse_action('I see atypia.\nACTION: ZOOM level=3 n=2\n', 1, 5)
        self.assertEqual(action, AgentAction(ActionKind.ZOOM, target_level=3, n_regions=2))

    def test_stop_case_insensitive(self):
        self.assertEqual(parse_action('action: stop', 0, 5).kind, ActionKind.STOP)

    def test_free_text(self):
        with self.assertRaises(ActionParseError):
            parse_action('Zoom in on the left lobe please', 0, 5)

    def test_zoom_must_go_up(self):
        for reply in ('ACTION: ZOOM level=2', 'ACTION: ZOOM level=1', 'ACTION: ZOOM level=5'):
            with self.assertRaises(ActionParseError):
                parse_action(reply, 2, 5)

    def test_zero_regions(self):
        with self.assertRaises(ActionParseError):
            parse_action('ACTION: MOVE n=0', 0, 5)

    def test_reply_round_trip(self):
        for action in (AgentAction(ActionKind.MOVE, n_regions=2), AgentAction(ActionKind.STOP),
                       AgentAction(ActionKind.ZOOM, target_level=4, n_regions=1)):
            self.assertEqual(parse_action(action.as_reply(), 0, 5), action)


class TestSelectTopRegions(SimpleTestCase):
    """
    Test ranking heatmap windows into regions
    """

    def setUp(self):
        self.level = build_levels(256, 256, (10,))[0]

    def test_uniform_tie_break(self):
        regions = select_top_regions(np.full((256, 256), 0.3), 2, set(), 16, self.level)
        self.assertEqual([r.key for r in regions], [(0, 0, 0, 16, 16), (0, 16, 0, 16, 16)])

    def test_single_hot_window(self):
        heatmap = np.zeros((256, 256))
        heatmap[32:48, 80:96] = 1.0
        first = select_top_regions(heatmap, 1, set(), 16, self.level)[0]
        self.assertEqual(first.key, (0, 80, 32, 16, 16))
        self.assertEqual(first.score, 1.0)

    def test_exclusion_complement(self):
        heatmap = np.random.default_rng(0).random((256, 256))
        every = select_top_regions(heatmap, 16, set(), 64, self.level)
        excluded = {every[3].key, every[7].key, every[12].key}
        regions = select_top_regions(heatmap, 16, excluded, 64, self.level)
        self.assertEqual(len(regions), 13)

        means = heatmap.reshape(4, 64, 4, 64).mean(axis=(1, 3))
        brute = sorted(((-means[r, c], r, c) for r in range(4) for c in range(4)))
        expected = [(0, 64 * c, 64 * r, 64, 64) for _, r, c in brute if (0, 64 * c, 64 * r, 64, 64) not in excluded]
        self.assertEqual([r.key for r in regions], expected)

    def test_maps_to_level_pixels(self):
        level = build_levels(1024, 512, (10,))[0]
        region = select_top_regions(np.ones((256, 256)), 1, set(), 16, level)[0]
        self.assertEqual(region.key, (0, 0, 0, 64, 32))

    def test_partition_error(self):
        with self.assertRaises(PartitionError):
            select_top_regions(np.zeros((256, 256)), 1, set(), 24, self.level)

    def test_within_parents(self):
        heatmap = np.zeros((256, 256))
        heatmap[:16, :16] = 1.0
        parent = Region(0, 128, 128, 32, 32)
        regions = select_top_regions(heatmap, 10, set(), 16, self.level, within=[parent])
        self.assertEqual(len(regions), 4)
        self.assertTrue(all(128 <= r.x < 160 and 128 <= r.y < 160 for r in regions))


class TestMemoryBank(SimpleTestCase):
    """
    Test the append-only memory bank and its trace format
    """

    def setUp(self):
        self.bank = MemoryBank(prompt='find tumour', slide_id='s1', config_hash='abc')
        self.move = AgentAction(ActionKind.MOVE, n_regions=1)

    def test_append_to_empty(self):
        bank = memory_append(self.bank, MemoryRecord(0, self.move, 0, (Region(0, 0, 0, 4, 4),)))
        self.assertEqual(len(bank), 1)
        self.assertEqual(len(self.bank), 0)

    def test_duplicate_region(self):
        bank = memory_append(self.bank, MemoryRecord(0, self.move, 0, (Region(0, 0, 0, 4, 4, score=0.5),)))
        with self.assertRaises(MemoryConsistencyError):
            memory_append(bank, MemoryRecord(1, self.move, 0, (Region(0, 0, 0, 4, 4, score=0.9),)))

    def test_step_gap(self):
        with self.assertRaises(MemoryConsistencyError):
            memory_append(self.bank, MemoryRecord(1, self.move, 0))

    def test_level_cannot_decrease(self):
        bank = memory_append(self.bank, MemoryRecord(0, AgentAction(ActionKind.ZOOM, 2, 1), 2))
        with self.assertRaises(MemoryConsistencyError):
            memory_append(bank, MemoryRecord(1, self.move, 1))

    def test_round_trip(self):
        bank = memory_append(self.bank, MemoryRecord(0, AgentAction(ActionKind.ZOOM, 1, 2, repaired=True), 1,
                                                     (Region(1, 0, 0, 8, 8, 0.25), Region(1, 8, 0, 8, 8, 0.125)),
                                                     ('thumbnail: dense tissue',)))
        bank = memory_append(bank, MemoryRecord(1, AgentAction(ActionKind.STOP), 1, (), ('a', 'b')))
        restored = MemoryBank.from_jsonl(bank.to_jsonl())
        self.assertEqual(restored, bank)
        self.assertEqual(restored.records[0].regions[1].step_selected, 0)

    def test_trace_header(self):
        header = json.loads(self.bank.to_jsonl().splitlines()[0])
        self.assertEqual(header, {'slide_id': 's1', 'prompt': 'find tumour', 'config_hash': 'abc'})

    def test_malformed_trace(self):
        with self.assertRaises(TraceFormatError):
            MemoryBank.from_jsonl('{"prompt": "x"}\n{"step": 0}\n')


class TestMsdmDecide(SimpleTestCase):
    """
    Test the decision step with scripted and remote backends
    """

    def state(self, level, step=1):
        return NavigationState(step=step, level_index=level, level_count=5)

    def test_zoom_all_at_top_stops(self):
        action, _ = msdm_decide(ScriptedBackend('zoom_all'), self.state(4), MemoryBank('T'), 'T', descriptions=[])
        self.assertEqual(action, AgentAction(ActionKind.STOP))

    def test_zoom_all_below_top(self):
        action, _ = msdm_decide(ScriptedBackend('zoom_all'), self.state(2), MemoryBank('T'), 'T', descriptions=[])
        self.assertEqual((action.kind, action.target_level, action.repaired), (ActionKind.ZOOM, 3, False))

    def test_repair_retry_succeeds(self):
        backend = mock.Mock(spec=DecisionBackend)
        backend.decide.side_effect = ['no idea', 'ACTION: MOVE n=2']
        action, _ = msdm_decide(backend, self.state(1), MemoryBank('T'), 'T', descriptions=['d'])
        self.assertEqual(action, AgentAction(ActionKind.MOVE, n_regions=2, repaired=True))
        self.assertIn('No action line', backend.decide.call_args.kwargs['feedback'])

    def test_fallback_at_top(self):
        backend = mock.Mock(spec=DecisionBackend)
        backend.decide.return_value = 'ACTION: ZOOM level=9'
        action, _ = msdm_decide(backend, self.state(4), MemoryBank('T'), 'T', descriptions=[])
        self.assertEqual(action, AgentAction(ActionKind.STOP, repaired=True))
        self.assertEqual(backend.decide.call_count, 2)

    @mock.patch.dict(os.environ, {'NAVIGATOR_TEST_API_KEY': API_KEY})
    def test_remote_free_text_falls_back(self):
        requests = []
        config = BackendConfig(kind='remote')
        backend = build_backend(config, http_client=mock_client(
            ['The tissue shows nests of atypical cells.', 'I would zoom further.'], requests))
        action, _ = msdm_decide(backend, self.state(1), MemoryBank('T'), 'T', descriptions=['nests'])
        self.assertEqual(action, AgentAction(ActionKind.ZOOM, target_level=2, n_regions=4, repaired=True))
        self.assertEqual(len(requests), 2)
        self.assertEqual(requests[0].url, 'http://backend.test/v1/chat/completions')
        self.assertEqual(requests[0].headers['authorization'], f'Bearer {API_KEY}')
        body = json.loads(requests[1].content)
        self.assertEqual(body['model'], 'test-model')
        self.assertIn('rejected', body['messages'][-1]['content'])


@mock.patch.dict(os.environ, {'NAVIGATOR_TEST_API_KEY': API_KEY})
class TestRemoteBackend(SimpleTestCase):
    """
    Test the OpenAI-compatible backend against a mock transport
    """

    def test_describe_sends_image(self):
        requests = []
        client = mock_client(['Nests of melanocytes.'], requests)
        backend = build_backend(BackendConfig(kind='remote'), http_client=client)
        text = backend.describe(np.zeros((8, 8, 3), dtype=np.uint8), Region(2, 0, 0, 8, 8, score=0.7))
        self.assertEqual(text, 'Nests of melanocytes.')
        parts = json.loads(requests[0].content)['messages'][0]['content']
        self.assertTrue(parts[1]['image_url']['url'].startswith('data:image/png;base64,'))

    def test_server_error(self):
        backend = build_backend(BackendConfig(kind='remote'), http_client=mock_client([], status_code=500))
        with self.assertRaises(BackendTransportError):
            backend.decide([], 'T', MemoryBank('T'), NavigationState(0, 0, 5))

    def test_key_redacted_in_logs(self):
        backend = build_backend(BackendConfig(kind='remote'), http_client=mock_client([f'echo {API_KEY}']))
        with self.assertLogs('mst.backends', level='DEBUG') as logs:
            backend.decide([API_KEY], 'T', MemoryBank('T'), NavigationState(0, 0, 5))
        self.assertTrue(logs.output)
        self.assertFalse(any(API_KEY in line for line in logs.output))

    def test_missing_key(self):
        with mock.patch.dict(os.environ, clear=True):
            with self.assertRaises(BackendConfigError):
                RemoteBackend('http://backend.test/v1', 'test-model', 'NAVIGATOR_TEST_API_KEY')


class TestBackendConfig(SimpleTestCase):
    """
    Test backend selection from configuration
    """

    def test_parse(self):
        backend = build_backend(BackendConfig.parse('scripted:move_twice_then_zoom', seed=3))
        self.assertIsInstance(backend, ScriptedBackend)
        self.assertEqual((backend.policy, backend.seed), ('move_twice_then_zoom', 3))

    def test_unknown_policy(self):
        with self.assertRaises(BackendConfigError):
            build_backend(BackendConfig.parse('scripted:wander'))

    @override_settings(NAVIGATOR_DECISION_BACKENDS={'scripted': 'mst.backends.ScriptedBackend'})
    def test_unregistered_kind(self):
        with self.assertRaises(BackendConfigError):
            build_backend(BackendConfig(kind='heuristic'))


class TestAgentRun(SimpleTestCase):
    """
    Test the navigation loop
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.slide = five_level_slide()

    def test_single_step_limit(self):
        result = run(self.slide, ScriptedBackend('always_move'), max_steps=1)
        self.assertEqual(len(result.trace), 1)
        self.assertEqual(result.stop_reason, StopReason.MAX_STEPS)

    def test_zoom_through_all_levels(self):
        result = run(self.slide, ScriptedBackend('zoom_all'))
        levels = [record.level for record in result.trace.records]
        self.assertEqual(levels, [1, 2, 3, 4, 4])
        self.assertEqual(result.trace.records[-1].action.kind, ActionKind.STOP)
        self.assertEqual(result.stop_reason, StopReason.BACKEND_STOP)
        self.assertEqual(len(result.regions), 16)

    def test_step_zero_describes_thumbnail(self):
        result = run(self.slide, ScriptedBackend('zoom_all'), max_steps=2)
        self.assertTrue(result.trace.records[0].descriptions[0].startswith('thumbnail'))
        self.assertEqual(len(result.trace.records[1].descriptions), 4)

    def test_two_moves_disjoint(self):
        result = run(self.slide, ScriptedBackend('always_move'), max_steps=2, n_move=4)
        first, second = (set(r.key for r in record.regions) for record in result.trace.records)
        self.assertEqual((len(first), len(second)), (4, 4))
        self.assertFalse(first & second)

    def test_top_level_exhausted(self):
        slide = MagnificationPyramid('tiny', build_levels(64, 64, (10,)), [np.zeros((64, 64, 3), dtype=np.uint8)])
        result = run(slide, ScriptedBackend('always_move'), max_steps=10, n_move=4, region_cells=64)
        self.assertEqual(result.stop_reason, StopReason.LEVEL_EXHAUSTED)
        self.assertEqual(len(result.trace), 5)
        self.assertEqual(len(result.regions), 16)

    def test_restrict_zoom_to_parent(self):
        result = run(self.slide, ScriptedBackend('zoom_all'), max_steps=3, restrict_zoom_to_parent=True)
        parents, children = result.trace.records[0].regions, result.trace.records[1].regions
        for child in children:
            self.assertTrue(any(p.x * 2 <= child.x < (p.x + p.w) * 2 and p.y * 2 <= child.y < (p.y + p.h) * 2
                                for p in parents))

    def test_parallel_describe_keeps_order(self):
        serial = run(self.slide, ScriptedBackend('move_twice_then_zoom'), max_steps=6)
        parallel = run(self.slide, ScriptedBackend('move_twice_then_zoom'), max_steps=6, describe_workers=4)
        self.assertEqual(serial.trace, parallel.trace)

    def test_heuristic_backend_terminates(self):
        result = run(self.slide, build_backend(BackendConfig(kind='heuristic', evidence=6)), max_steps=12)
        self.assertLessEqual(len(result.trace), 12)
        self.assertEqual(result.trace.records[0].action.kind, ActionKind.ZOOM)

    def test_partial_trace_on_failure(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'trace.jsonl'
            with self.assertRaises(BackendTransportError):
                agent_run(self.slide, None, None, FailingBackend(fail_at=2), AgentLimits(), trace_path=path,
                          heatmaps=random_heatmaps(5))
            lines = path.read_text().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertEqual(json.loads(lines[2])['step'], 1)

    def test_computes_heatmaps_from_params(self):
        slide = generate_synthetic_slide(1, SynthConfig(base_size=256, level_count=3))
        params = FusionNetwork(FusionConfig(level_count=3, token_dim=8))
        result = agent_run(slide, params, EncoderSpec(token_dim=8), ScriptedBackend('zoom_all'))
        self.assertEqual(result.stop_reason, StopReason.BACKEND_STOP)
        self.assertEqual(len(result.regions), 8)

    def test_randomized_invariants(self):
        rng = np.random.default_rng(2024)
        policies = ['random', 'random', 'always_move', 'move_twice_then_zoom', 'zoom_all']
        with tempfile.TemporaryDirectory() as tmp:
            for i in range(200):
                policy = policies[i % len(policies)]
                limits = AgentLimits(max_steps=int(rng.integers(1, 11)), n_move=int(rng.integers(1, 6)),
                                     k_zoom=int(rng.integers(1, 6)), region_cells=int(rng.choice([16, 32, 64])))
                heatmaps = random_heatmaps(5, seed=i)
                paths = [Path(tmp) / f'{i}-{j}.jsonl' for j in range(2)]
                results = [agent_run(self.slide, None, None, ScriptedBackend(policy, seed=i), limits,
                                     trace_path=path, heatmaps=heatmaps) for path in paths]
                result = results[0]
                records = result.trace.records

                self.assertLessEqual(len(records), limits.max_steps)
                keys = [r.key for r in result.regions]
                self.assertEqual(len(keys), len(set(keys)))
                self.assertEqual(set(keys), {r.key for record in records for r in record.regions})
                levels = [record.level for record in records]
                self.assertEqual(levels, sorted(levels))
                previous = 0
                for record in records:
                    if record.action.kind == ActionKind.ZOOM:
                        self.assertGreater(record.action.target_level, previous)
                    self.assertTrue(all(r.level_index == record.level for r in record.regions))
                    previous = record.level
                self.assertEqual(paths[0].read_bytes(), paths[1].read_bytes())
                self.assertEqual(MemoryBank.load(paths[0]), result.trace)
