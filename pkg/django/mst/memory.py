"""
The memory bank: an append-only, step-ordered record of every agent operation with the regions it
selected and the descriptions the decision was taken from. Serialized as JSON Lines, a header line
followed by one line per record.
"""
import json
import logging
from dataclasses import dataclass, field, replace

from core.hashing import canonical_json
from slides.pyramid import Region

from .actions import AgentAction
from .exceptions import MemoryConsistencyError, TraceFormatError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MemoryRecord:
    step: int
    action: AgentAction
    level: int
    regions: tuple = ()
    descriptions: tuple = ()

    def to_dict(self):
        return {
            'step': self.step,
            'action': self.action.to_dict(),
            'level': self.level,
            'regions': [region.to_dict() for region in self.regions],
            'descriptions': list(self.descriptions),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            step = data['step']
            return cls(
                step=step,
                action=AgentAction.from_dict(data['action']),
                level=data['level'],
                regions=tuple(Region.from_dict(r, step_selected=step) for r in data['regions']),
                descriptions=tuple(data['descriptions']),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFormatError(f'Malformed trace record: {e}')


@dataclass(frozen=True)
class MemoryBank:
    prompt: str
    slide_id: str = ''
    config_hash: str = ''
    records: tuple = field(default=())

    def __len__(self):
        return len(self.records)

    @property
    def regions(self):
        return [region for record in self.records for region in record.regions]

    @property
    def region_keys(self):
        return {region.key for region in self.regions}

    @property
    def next_step(self):
        return self.records[-1].step + 1 if self.records else 0

    @property
    def current_level(self):
        return self.records[-1].level if self.records else 0

    def header(self):
        return {'slide_id': self.slide_id, 'prompt': self.prompt, 'config_hash': self.config_hash}

    def to_jsonl(self):
        lines = [canonical_json(self.header())] + [canonical_json(record.to_dict()) for record in self.records]
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_jsonl(cls, text):
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise TraceFormatError('Empty trace')
        try:
            header = json.loads(lines[0])
            bank = cls(prompt=header['prompt'], slide_id=header.get('slide_id', ''),
                       config_hash=header.get('config_hash', ''))
            for line in lines[1:]:
                bank = memory_append(bank, MemoryRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError) as e:
            raise TraceFormatError(f'Malformed trace: {e}')
        return bank

    def save(self, path):
        with open(path, 'w') as f:
            f.write(self.to_jsonl())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_jsonl(f.read())


def memory_append(M, record):
    """
    M' = M with record appended; M itself is left untouched
    """
    if record.step != M.next_step:
        raise MemoryConsistencyError(f'Record step {record.step} does not follow step {M.next_step - 1}')
    if M.records and record.level < M.current_level:
        raise MemoryConsistencyError(f'Level went back from {M.current_level} to {record.level}')
    seen = M.region_keys
    for region in record.regions:
        if region.key in seen:
            raise MemoryConsistencyError(f'Region {region.key} is already in the memory bank')
        seen.add(region.key)
    return replace(M, records=M.records + (record,))


class TraceWriter:
    """
    Writes a trace incrementally so that an aborted run leaves every completed step on disk
    """

    def __init__(self, path, bank):
        self.path = path
        self.file = open(path, 'w')
        self.file.write(canonical_json(bank.header()) + '\n')
        self.file.flush()

    def write(self, record):
        self.file.write(canonical_json(record.to_dict()) + '\n')
        self.file.flush()

    def close(self):
        self.file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
