"""
The navigation loop.

Starting at the thumbnail with the task prompt, every step describes what the previous step selected
(the thumbnail itself at step 0), asks the backend for an operation and applies it:

    MOVE n   -> the n best unselected windows at the current level
    ZOOM m n -> the n best windows at level m (m above the current level)
    STOP     -> end

Each step is appended to the memory bank and, when a trace path is given, written to disk at once.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import torch

from encoder.encoders import encode_pyramid
from mcfn.fusion import predict_level
from slides.pyramid import map_region

from .actions import ActionKind, AgentAction, parse_action
from .exceptions import ActionParseError, BackendConfigError
from .memory import MemoryBank, MemoryRecord, TraceWriter, memory_append
from .regions import select_top_regions

logger = logging.getLogger(__name__)

DEFAULT_PROMPT = ('Navigate this skin biopsy from the thumbnail towards higher magnifications and collect the '
                  'regions needed to tell nevus, basal cell carcinoma, melanoma and squamous cell carcinoma apart.')


class StopReason(str, Enum):
    BACKEND_STOP = 'backend_stop'
    MAX_STEPS = 'max_steps'
    LEVEL_EXHAUSTED = 'level_exhausted'


@dataclass
class AgentLimits:
    max_steps: int = 8
    n_move: int = 4
    k_zoom: int = 4
    region_cells: int = 16
    restrict_zoom_to_parent: bool = False
    describe_workers: int = 1

    def validate(self):
        for name in ('max_steps', 'n_move', 'k_zoom', 'region_cells', 'describe_workers'):
            if getattr(self, name) < 1:
                raise BackendConfigError(f'agent.{name}: must be >= 1')

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NavigationState:
    step: int
    level_index: int
    level_count: int
    regions: tuple = ()
    n_move: int = 4
    k_zoom: int = 4


@dataclass
class NavigationResult:
    regions: list
    trace: MemoryBank
    stop_reason: StopReason
    repaired_steps: list = field(default_factory=list)


def describe_regions(backend, pyramid, state, workers=1):
    """
    Descriptions of the regions selected at the previous step in rank order, or of the thumbnail
    when nothing has been selected yet
    """
    if not state.regions:
        return [backend.describe(pyramid.raster(state.level_index), None)] if state.step == 0 else []
    crops = [(pyramid.crop(region), region) for region in state.regions]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda item: backend.describe(*item), crops))
    return [backend.describe(image, region) for image, region in crops]


def fallback_action(state):
    if state.level_index < state.level_count - 1:
        return AgentAction(ActionKind.ZOOM, target_level=state.level_index + 1, n_regions=state.k_zoom, repaired=True)
    return AgentAction(ActionKind.STOP, repaired=True)


def msdm_decide(backend, state, M, T, descriptions=None, workers=1, pyramid=None):
    """
    Op^t = decide(describe(previous regions), T, M): one repair round for a malformed reply, then
    the deterministic fallback. Returns (action, descriptions).
    """
    if descriptions is None:
        descriptions = describe_regions(backend, pyramid, state, workers)

    def ask(feedback=None):
        reply = backend.decide(descriptions, T, M, state, feedback=feedback)
        return parse_action(reply, state.level_index, state.level_count, state.n_move, state.k_zoom)

    try:
        return ask(), descriptions
    except ActionParseError as e:
        logger.warning('Step %d: rejected reply (%s), asking again', state.step, e)
        first_error = str(e)
    try:
        return replace(ask(feedback=first_error), repaired=True), descriptions
    except ActionParseError as e:
        action = fallback_action(state)
        logger.warning('Step %d: rejected repaired reply (%s), falling back to %s', state.step, e, action.as_reply())
        return action, descriptions


class HeatmapCache:
    """
    Lazily computed per-level heatmaps of one slide
    """

    def __init__(self, pyramid, params, spec, encoder=None, heatmaps=None):
        self.pyramid = pyramid
        self.params = params
        self.spec = spec
        self.encoder = encoder
        self.heatmaps = dict(enumerate(heatmaps)) if heatmaps is not None else {}
        self.token_grids = None

    def __getitem__(self, m):
        if m not in self.heatmaps:
            if self.token_grids is None:
                self.token_grids = encode_pyramid(self.pyramid, self.spec, encoder=self.encoder)
            with torch.no_grad():
                self.heatmaps[m] = predict_level(self.token_grids, m, self.params)
        return self.heatmaps[m]


def _select(heatmaps, pyramid, level_index, n, bank, limits, step, parents=None):
    within = None
    if parents:
        within = [map_region(region, level_index, pyramid) for region in parents]
    return select_top_regions(heatmaps[level_index], n, bank.region_keys, limits.region_cells,
                              pyramid.level(level_index), within=within, step=step)


def agent_run(pyramid, params, spec, backend, limits=None, prompt=DEFAULT_PROMPT, trace_path=None,
              config_hash='', encoder=None, heatmaps=None):
    """
    Runs the agent on one slide until the backend stops, max_steps is reached or the top level
    has no unselected window left
    """
    limits = limits or AgentLimits()
    limits.validate()
    cache = HeatmapCache(pyramid, params, spec, encoder=encoder, heatmaps=heatmaps)
    bank = MemoryBank(prompt=prompt, slide_id=pyramid.slide_id, config_hash=config_hash)
    level_count = len(pyramid.levels)
    top = level_count - 1
    writer = TraceWriter(trace_path, bank) if trace_path else None

    level, previous = 0, ()
    stop_reason = StopReason.MAX_STEPS
    repaired = []
    try:
        for step in range(limits.max_steps):
            state = NavigationState(step=step, level_index=level, level_count=level_count, regions=previous,
                                    n_move=limits.n_move, k_zoom=limits.k_zoom)
            action, descriptions = msdm_decide(backend, state, bank, prompt, workers=limits.describe_workers,
                                               pyramid=pyramid)
            if action.repaired:
                repaired.append(step)

            regions = []
            if action.kind == ActionKind.MOVE:
                regions = _select(cache, pyramid, level, action.n_regions, bank, limits, step)
            elif action.kind == ActionKind.ZOOM:
                parents = previous if limits.restrict_zoom_to_parent else None
                level = action.target_level
                regions = _select(cache, pyramid, level, action.n_regions, bank, limits, step, parents=parents)

            record = MemoryRecord(step=step, action=action, level=level, regions=tuple(regions),
                                  descriptions=tuple(descriptions))
            bank = memory_append(bank, record)
            if writer:
                writer.write(record)
            logger.info('%s step %d: %s%s -> %d regions at level %d', pyramid.slide_id, step, action.as_reply(),
                        ' (repaired)' if action.repaired else '', len(regions), level)

            if action.kind == ActionKind.STOP:
                stop_reason = StopReason.BACKEND_STOP
                break
            if action.kind == ActionKind.MOVE and not regions and level == top:
                stop_reason = StopReason.LEVEL_EXHAUSTED
                break
            previous = tuple(regions)
    finally:
        if writer:
            writer.close()

    return NavigationResult(regions=bank.regions, trace=bank, stop_reason=stop_reason, repaired_steps=repaired)
