"""
The run configuration: one dataclass per section, loaded from a JSON file and overridden from the
command line (`--seed`, `--set section.key=value`, flags win over the file).

The config hash covers everything that can change a result; `output` and `jobs` are left out so a
run moved to another directory or given more workers keeps its hash.
"""
import json
import logging
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

from classify.abmil import AbmilConfig
from classify.bags import SAMPLING_MODES
from classify.training import ClassifierOptimizerConfig
from core.hashing import content_hash
from encoder.encoders import EncoderSpec
from mcfn.network import FusionConfig
from mst.agent import AgentLimits
from mst.backends import BackendConfig
from ndsl.losses import LossConfig
from ndsl.training import OptimizerConfig
from slides.synth import SynthConfig

from .exceptions import RunConfigError

logger = logging.getLogger(__name__)

UNHASHED_FIELDS = ('output', 'jobs')
SPLITS = ('train', 'test', 'all')


@dataclass
class DatasetConfig:
    slide_count: int = 40
    test_fraction: float = 0.2
    balanced_labels: bool = True

    def validate(self):
        if self.slide_count < 0:
            raise RunConfigError('dataset.slide_count', 'must be >= 0')
        if not 0 <= self.test_fraction < 1:
            raise RunConfigError('dataset.test_fraction', f'{self.test_fraction} is outside [0, 1)')


@dataclass
class BudgetConfig:
    fractions: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    modes: tuple = SAMPLING_MODES
    tissue_threshold: float = None

    def validate(self):
        for fraction in self.fractions:
            if not 0 < fraction <= 1:
                raise RunConfigError('budgets.fractions', f'{fraction} is outside (0, 1]')
        for mode in self.modes:
            if mode not in SAMPLING_MODES:
                raise RunConfigError('budgets.modes', f'unknown sampling mode {mode!r}')


@dataclass
class EvaluationConfig:
    q: float = 0.10
    split: str = 'test'

    def validate(self):
        if not 0 < self.q <= 1:
            raise RunConfigError('evaluation.q', f'{self.q} is outside (0, 1]')
        if self.split not in SPLITS:
            raise RunConfigError('evaluation.split', f'one of {", ".join(SPLITS)}')


SECTIONS = {
    'pyramid': SynthConfig,
    'dataset': DatasetConfig,
    'encoder': EncoderSpec,
    'mcfn': FusionConfig,
    'loss': LossConfig,
    'optimizer': OptimizerConfig,
    'classifier': AbmilConfig,
    'classifier_optimizer': ClassifierOptimizerConfig,
    'agent': AgentLimits,
    'backend': BackendConfig,
    'budgets': BudgetConfig,
    'evaluation': EvaluationConfig,
}


def _section_fields(section_class):
    """
    (name, default) of every configurable field of a section
    """
    result = []
    for f in fields(section_class):
        if not f.init or not f.repr:
            continue
        if f.default is not MISSING:
            default = f.default
        elif f.default_factory is not MISSING:
            default = f.default_factory()
        else:
            default = None
        result.append((f.name, default))
    return result


def _coerce(path, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise RunConfigError(path, f'expected true or false, got {value!r}')
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise RunConfigError(path, f'expected an integer, got {value!r}')
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RunConfigError(path, f'expected a number, got {value!r}')
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise RunConfigError(path, f'expected a list, got {value!r}')
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise RunConfigError(path, f'expected a string, got {value!r}')
    return value


def _build_section(name, data):
    section_class = SECTIONS[name]
    if not isinstance(data, dict):
        raise RunConfigError(name, 'expected an object')
    known = dict(_section_fields(section_class))
    for key in data:
        if key not in known:
            raise RunConfigError(f'{name}.{key}', 'unknown field')
    values = {key: _coerce(f'{name}.{key}', value, known[key]) for key, value in data.items()}
    if section_class is SynthConfig:
        values['section'] = name
    return section_class(**values)


def _section_dict(section):
    data = {}
    for name, _ in _section_fields(type(section)):
        value = getattr(section, name)
        data[name] = list(value) if isinstance(value, tuple) else value
    return data


@dataclass
class RunConfig:
    seed: int = 0
    output: str = 'runs'
    jobs: int = 1
    pyramid: SynthConfig = field(default_factory=SynthConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    mcfn: FusionConfig = field(default_factory=FusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    classifier: AbmilConfig = field(default_factory=AbmilConfig)
    classifier_optimizer: ClassifierOptimizerConfig = field(default_factory=ClassifierOptimizerConfig)
    agent: AgentLimits = field(default_factory=AgentLimits)
    backend: BackendConfig = field(default_factory=BackendConfig)
    budgets: BudgetConfig = field(default_factory=BudgetConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @classmethod
    def from_dict(cls, data):
        values = {}
        for key, value in data.items():
            if key in SECTIONS:
                values[key] = _build_section(key, value)
            elif key in ('seed', 'jobs'):
                values[key] = _coerce(key, value, 0)
            elif key == 'output':
                values[key] = _coerce(key, value, '')
            else:
                raise RunConfigError(key, 'unknown section')
        return cls(**values)

    def to_dict(self):
        data = {'seed': self.seed, 'output': self.output, 'jobs': self.jobs}
        for name in SECTIONS:
            data[name] = _section_dict(getattr(self, name))
        return data

    def config_hash(self):
        data = self.to_dict()
        for name in UNHASHED_FIELDS:
            del data[name]
        return content_hash(data)

    def validate(self):
        if self.jobs < 1:
            raise RunConfigError('jobs', 'must be >= 1')
        for name in SECTIONS:
            section = getattr(self, name)
            if hasattr(section, 'validate'):
                section.validate()
        if self.optimizer.learning_rate < 0:
            raise RunConfigError('optimizer.learning_rate', 'must be >= 0')
        if self.optimizer.steps < 1:
            raise RunConfigError('optimizer.steps', 'must be >= 1')
        checks = (
            ('mcfn.level_count', self.mcfn.level_count, self.pyramid.level_count, 'pyramid.level_count'),
            ('mcfn.token_dim', self.mcfn.token_dim, self.encoder.token_dim, 'encoder.token_dim'),
            ('mcfn.grid_size', self.mcfn.grid_size, self.encoder.grid_size, 'the encoder grid size'),
            ('mcfn.output_size', self.mcfn.output_size, self.encoder.input_size, 'encoder.input_size'),
            ('classifier.token_dim', self.classifier.token_dim, self.encoder.token_dim, 'encoder.token_dim'),
        )
        for path, value, expected, source in checks:
            if value != expected:
                raise RunConfigError(path, f'{value} does not match {source} ({expected})')
        if self.encoder.input_size % self.agent.region_cells:
            raise RunConfigError('agent.region_cells',
                                 f'{self.agent.region_cells} does not divide the heatmap size '
                                 f'{self.encoder.input_size}')
        return self

    @property
    def components(self):
        return (self.mcfn.use_mab, self.mcfn.use_cmb_low, self.mcfn.use_cmb_high)


def parse_override(text):
    """
    'mcfn.window=8' -> ('mcfn', 'window', 8); values are read as JSON, anything else is a string
    """
    path, sep, raw = text.partition('=')
    if not sep or not path:
        raise RunConfigError(text, 'overrides take the form section.key=value')
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    section, _, key = path.partition('.')
    return section, key, value


def apply_overrides(data, overrides):
    data = {key: dict(value) if isinstance(value, dict) else value for key, value in data.items()}
    for text in overrides:
        section, key, value = parse_override(text)
        if not key:
            data[section] = value
        else:
            if section not in SECTIONS:
                raise RunConfigError(section, 'unknown section')
            data.setdefault(section, {})[key] = value
    return data


def load_run_config(path=None, seed=None, overrides=(), output=None, jobs=None):
    """
    File values, then --set overrides, then the dedicated flags
    """
    data = {}
    if path:
        try:
            with open(Path(path)) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise RunConfigError('--config', f'{path} does not exist')
        except json.JSONDecodeError as e:
            raise RunConfigError('--config', f'{path} is not valid JSON ({e})')
        if not isinstance(data, dict):
            raise RunConfigError('--config', f'{path} must hold a JSON object')
    data = apply_overrides(data, overrides)
    for key, value in (('seed', seed), ('output', output), ('jobs', jobs)):
        if value is not None:
            data[key] = value
    config = RunConfig.from_dict(data).validate()
    logger.debug('Run config %s', config.config_hash())
    return config
