"""
Decision backends for the magnification selection tool.

A backend plays two roles: describe() turns a region image into text and decide() turns
descriptions, the task prompt and the memory bank into a reply in the action grammar
(see actions.py). Replies are parsed and repaired by the agent, not by the backend.
"""
import base64
import io
import json
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass

import numpy as np
import openai
from django.conf import settings
from django.utils.module_loading import import_string
from PIL import Image

from .actions import GRAMMAR_HELP, ActionKind
from .exceptions import BackendConfigError, BackendTransportError

logger = logging.getLogger(__name__)

SCRIPTED_POLICIES = ('zoom_all', 'move_twice_then_zoom', 'always_move', 'random')

MALFORMED_REPLIES = (
    'The lesion looks interesting, I would look closer.',
    'ACTION: ZOOM',
    'ACTION: MOVE n=0',
    'ACTION: JUMP level=2',
)


@dataclass
class BackendConfig:
    kind: str = 'scripted'
    policy: str = 'zoom_all'
    seed: int = 0
    confidence: float = 0.5
    evidence: int = 8
    base_url: str = None
    model: str = None
    api_key_env: str = None
    timeout: float = None
    max_retries: int = None

    @classmethod
    def parse(cls, text, **kwargs):
        """
        'scripted:zoom_all' -> BackendConfig(kind='scripted', policy='zoom_all')
        """
        kind, _, policy = text.partition(':')
        if policy:
            kwargs['policy'] = policy
        return cls(kind=kind, **kwargs)

    def validate(self):
        if self.kind not in settings.NAVIGATOR_DECISION_BACKENDS:
            raise BackendConfigError(f'backend.kind: no decision backend registered for {self.kind!r}')
        if self.kind == 'scripted' and self.policy not in SCRIPTED_POLICIES:
            raise BackendConfigError(
                f'backend.policy: unknown scripted policy {self.policy!r} (one of {", ".join(SCRIPTED_POLICIES)})'
            )

    def remote_settings(self):
        merged = dict(settings.NAVIGATOR_REMOTE_BACKEND)
        for key in ('base_url', 'model', 'api_key_env', 'timeout', 'max_retries'):
            if getattr(self, key) is not None:
                merged[key] = getattr(self, key)
        return merged

    def to_dict(self):
        return asdict(self)


def build_backend(config, http_client=None):
    config.validate()
    backend_class = import_string(settings.NAVIGATOR_DECISION_BACKENDS[config.kind])
    return backend_class.from_config(config, http_client=http_client)


def _mean_colour(image):
    return np.asarray(image, dtype=np.float64).reshape(-1, 3).mean(axis=0)


def _where(region):
    if region is None:
        return 'thumbnail'
    return f'level {region.level_index} region ({region.x}, {region.y}, {region.w}x{region.h})'


class DecisionBackend(ABC):

    @classmethod
    def from_config(cls, config, **kwargs):
        return cls()

    @abstractmethod
    def describe(self, image, region=None):
        """
        Text description of a region image; region is None for the thumbnail
        """

    @abstractmethod
    def decide(self, descriptions, prompt, memory, state, feedback=None):
        """
        Reply text containing one action line; feedback carries the parse error of a rejected reply
        """


class ScriptedBackend(DecisionBackend):
    """
    Fixed policies for tests and dry runs; 'random' also produces malformed and impossible replies
    """

    def __init__(self, policy='zoom_all', seed=0):
        if policy not in SCRIPTED_POLICIES:
            raise BackendConfigError(f'backend.policy: unknown scripted policy {policy!r}')
        self.policy = policy
        self.seed = seed

    @classmethod
    def from_config(cls, config, **kwargs):
        return cls(policy=config.policy, seed=config.seed)

    def describe(self, image, region=None):
        r, g, b = _mean_colour(image)
        score = f', attention {region.score:.3f}' if region is not None else ''
        return f'{_where(region)}: mean colour ({r:.1f}, {g:.1f}, {b:.1f}){score}'

    def decide(self, descriptions, prompt, memory, state, feedback=None):
        top = state.level_count - 1
        zoom = f'ACTION: ZOOM level={state.level_index + 1} n={state.k_zoom}'
        move = f'ACTION: MOVE n={state.n_move}'

        if self.policy == 'zoom_all':
            return zoom if state.level_index < top else 'ACTION: STOP'
        if self.policy == 'always_move':
            return move
        if self.policy == 'move_twice_then_zoom':
            moves_here = sum(1 for record in memory.records
                             if record.level == state.level_index and record.action.kind == ActionKind.MOVE)
            if moves_here < 2:
                return move
            return zoom if state.level_index < top else 'ACTION: STOP'
        return self._random_reply(state, feedback)

    def _random_reply(self, state, feedback):
        rng = np.random.default_rng([self.seed, state.step, 1 if feedback else 0])
        choice = rng.choice(['move', 'zoom', 'stop', 'malformed', 'backwards'], p=[0.4, 0.3, 0.05, 0.15, 0.1])
        if choice == 'move':
            return f'ACTION: MOVE n={int(rng.integers(1, 6))}'
        if choice == 'zoom' and state.level_index < state.level_count - 1:
            level = int(rng.integers(state.level_index + 1, state.level_count))
            return f'Looks suspicious.\nACTION: ZOOM level={level} n={int(rng.integers(1, 6))}'
        if choice == 'stop':
            return 'ACTION: STOP'
        if choice == 'backwards':
            return f'ACTION: ZOOM level={state.level_index} n=2'
        return str(rng.choice(MALFORMED_REPLIES))


class HeuristicBackend(DecisionBackend):
    """
    Offline stand-in for the describe/decide models: zooms while the last regions are confidently
    attended, moves while evidence is weak, stops at the top level once enough regions are collected
    """

    def __init__(self, confidence=0.5, evidence=8):
        self.confidence = confidence
        self.evidence = evidence

    @classmethod
    def from_config(cls, config, **kwargs):
        return cls(confidence=config.confidence, evidence=config.evidence)

    def describe(self, image, region=None):
        colour = _mean_colour(image)
        tissue = 'dense tissue' if colour.mean() < 180 else 'sparse tissue'
        if region is None:
            return f'thumbnail: {tissue}'
        return f'{_where(region)}: {tissue}, attention {region.score:.3f}'

    def decide(self, descriptions, prompt, memory, state, feedback=None):
        top = state.level_count - 1
        scores = [region.score for region in state.regions]
        if state.level_index < top and (not scores or max(scores) >= self.confidence):
            return f'ACTION: ZOOM level={state.level_index + 1} n={state.k_zoom}'
        if state.level_index == top and len(memory.regions) >= self.evidence:
            return 'ACTION: STOP'
        return f'ACTION: MOVE n={state.n_move}'


def _image_url(image):
    buffer = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buffer, format='PNG')
    return 'data:image/png;base64,' + base64.b64encode(buffer.getvalue()).decode('ascii')


def _loggable(messages):
    """
    Request messages with inline images shortened, for debug logging
    """
    shortened = []
    for message in messages:
        content = message['content']
        if isinstance(content, list):
            content = [{**part, 'image_url': {'url': '<png>'}} if part.get('type') == 'image_url' else part
                       for part in content]
        shortened.append({**message, 'content': content})
    return json.dumps(shortened)


class RemoteBackend(DecisionBackend):
    """
    An OpenAI-compatible chat-completions endpoint serving a vision-language model
    """

    describe_prompt = 'Describe the histopathological findings in this skin biopsy region in one or two sentences.'
    system_prompt = ('You navigate a whole-slide image across magnifications to find the regions that decide '
                     'the diagnosis. ' + GRAMMAR_HELP)

    def __init__(self, base_url, model, api_key_env, timeout=30.0, max_retries=2, http_client=None):
        api_key = os.environ.get(api_key_env)
        if not api_key:
            raise BackendConfigError(f'backend.api_key_env: environment variable {api_key_env} is not set')
        self.model = model
        self._api_key = api_key
        self.client = openai.OpenAI(api_key=api_key, base_url=base_url, timeout=timeout,
                                    max_retries=max_retries, http_client=http_client)

    @classmethod
    def from_config(cls, config, http_client=None, **kwargs):
        return cls(http_client=http_client, **config.remote_settings())

    def _redact(self, text):
        return text.replace(self._api_key, '***')

    def _complete(self, messages):
        logger.debug('chat.completions model=%s request=%s', self.model, self._redact(_loggable(messages)))
        try:
            response = self.client.chat.completions.create(model=self.model, messages=messages, temperature=0)
        except openai.APIError as e:
            raise BackendTransportError(f'{self.model} request failed: {self._redact(str(e))}') from e
        if not response.choices:
            raise BackendTransportError(f'{self.model} returned no choices')
        content = response.choices[0].message.content or ''
        logger.debug('chat.completions model=%s response=%s', self.model, self._redact(content))
        return content

    def describe(self, image, region=None):
        return self._complete([{
            'role': 'user',
            'content': [
                {'type': 'text', 'text': f'{self.describe_prompt} ({_where(region)})'},
                {'type': 'image_url', 'image_url': {'url': _image_url(image)}},
            ],
        }])

    def decide(self, descriptions, prompt, memory, state, feedback=None):
        history = '\n'.join(
            f'step {record.step}: {record.action.as_reply()} -> {len(record.regions)} regions at level {record.level}'
            for record in memory.records
        ) or 'none'
        observed = '\n'.join(f'- {text}' for text in descriptions) or '- none'
        user = (f'Task: {prompt}\n'
                f'Current level: {state.level_index} of {state.level_count - 1} (0 is the thumbnail)\n'
                f'Previous operations:\n{history}\n'
                f'Current observations:\n{observed}')
        messages = [{'role': 'system', 'content': self.system_prompt}, {'role': 'user', 'content': user}]
        if feedback:
            messages.append({'role': 'user',
                             'content': f'Your previous reply was rejected: {feedback}. {GRAMMAR_HELP}'})
        return self._complete(messages)
