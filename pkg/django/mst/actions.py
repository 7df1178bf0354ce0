"""
Agent actions and the single-line reply grammar decision backends answer in:

    ACTION: MOVE [n=<k>]
    ACTION: ZOOM level=<m> [n=<k>]
    ACTION: STOP
"""
import re
from dataclasses import dataclass
from enum import Enum

from .exceptions import ActionParseError

ACTION_PATTERN = re.compile(
    r'^\s*ACTION:\s*(?:'
    r'(?P<move>MOVE)(?:\s+n=(?P<move_n>\d+))?'
    r'|(?P<zoom>ZOOM)\s+level=(?P<level>\d+)(?:\s+n=(?P<zoom_n>\d+))?'
    r'|(?P<stop>STOP)'
    r')\s*$',
    re.IGNORECASE | re.MULTILINE,
)

GRAMMAR_HELP = 'Reply with exactly one line: "ACTION: MOVE n=<k>", "ACTION: ZOOM level=<m> n=<k>" or "ACTION: STOP".'


class ActionKind(str, Enum):
    MOVE = 'MOVE'
    ZOOM = 'ZOOM'
    STOP = 'STOP'


@dataclass(frozen=True)
class AgentAction:
    kind: ActionKind
    target_level: int = None
    n_regions: int = None
    repaired: bool = False

    def validate(self, current_level, level_count):
        if self.kind == ActionKind.STOP:
            if self.target_level is not None or self.n_regions is not None:
                raise ActionParseError('STOP takes no parameters')
            return
        if self.n_regions is None or self.n_regions < 1:
            raise ActionParseError(f'{self.kind.value} needs n >= 1')
        if self.kind == ActionKind.MOVE:
            if self.target_level is not None:
                raise ActionParseError('MOVE takes no level')
            return
        if self.target_level is None or not current_level < self.target_level < level_count:
            raise ActionParseError(
                f'ZOOM level must be above the current level {current_level} and below {level_count}, '
                f'got {self.target_level}'
            )

    def as_reply(self):
        if self.kind == ActionKind.STOP:
            return 'ACTION: STOP'
        if self.kind == ActionKind.MOVE:
            return f'ACTION: MOVE n={self.n_regions}'
        return f'ACTION: ZOOM level={self.target_level} n={self.n_regions}'

    def to_dict(self):
        return {
            'kind': self.kind.value,
            'target_level': self.target_level,
            'n': self.n_regions,
            'repaired': self.repaired,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(kind=ActionKind(data['kind']), target_level=data.get('target_level'),
                   n_regions=data.get('n'), repaired=data.get('repaired', False))


def parse_action(reply, current_level, level_count, default_move=4, default_zoom=4):
    """
    Reads the first grammar line out of a backend reply and validates it against the current level
    """
    match = ACTION_PATTERN.search(reply or '')
    if match is None:
        raise ActionParseError(f'No action line in reply: {(reply or "")[:80]!r}')
    if match.group('stop'):
        action = AgentAction(ActionKind.STOP)
    elif match.group('move'):
        n = match.group('move_n')
        action = AgentAction(ActionKind.MOVE, n_regions=int(n) if n is not None else default_move)
    else:
        n = match.group('zoom_n')
        action = AgentAction(ActionKind.ZOOM, target_level=int(match.group('level')),
                             n_regions=int(n) if n is not None else default_zoom)
    action.validate(current_level, level_count)
    return action
