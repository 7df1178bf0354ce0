"""
Attention-based multiple-instance slide classifier.

    a_i   = softmax_i(w_a . tanh(V h_i))
    z     = sum_i a_i h_i
    probs = softmax(W_c z + b)

Instances are put into a canonical (lexicographic) order before the sums, so any permutation of
a bag gives bitwise-identical output.
"""
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from slides.pyramid import SlideLabel

from .exceptions import ClassifierConfigError, EmptyBagError


@dataclass
class AbmilConfig:
    token_dim: int = 32
    hidden_dim: int = 16
    class_count: int = len(SlideLabel)
    seed: int = 0

    def validate(self):
        if self.token_dim < 1 or self.hidden_dim < 1:
            raise ClassifierConfigError('classifier.hidden_dim: dimensions must be positive')
        if self.class_count < 2:
            raise ClassifierConfigError('classifier.class_count: at least two classes are required')

    def to_dict(self):
        return asdict(self)


class AttentionMIL(nn.Module):

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        generator = torch.Generator().manual_seed(config.seed)
        self.V = nn.Parameter(torch.randn(config.hidden_dim, config.token_dim, generator=generator)
                              / np.sqrt(config.token_dim))
        self.w_a = nn.Parameter(torch.randn(config.hidden_dim, generator=generator) / np.sqrt(config.hidden_dim))
        self.W_c = nn.Parameter(torch.randn(config.class_count, config.token_dim, generator=generator)
                                / np.sqrt(config.token_dim))
        self.b = nn.Parameter(torch.zeros(config.class_count))
        self.double()


@dataclass(frozen=True, eq=False)
class Bag:
    """
    Instance features (N, D) of one slide with its label (None when unknown)
    """
    instances: torch.Tensor
    label: SlideLabel = None
    slide_id: str = ''

    def __post_init__(self):
        if self.instances.ndim != 2 or len(self.instances) == 0:
            raise EmptyBagError(f'Bag {self.slide_id!r} has no instances')
        if not torch.isfinite(self.instances).all():
            raise EmptyBagError(f'Bag {self.slide_id!r} has non-finite instance features')

    def __len__(self):
        return len(self.instances)


def canonical_order(instances):
    values = instances.detach().cpu().numpy()
    # lexsort keys run last-to-first, so reverse the columns to sort by column 0 first
    return torch.from_numpy(np.lexsort(values.T[::-1]).copy())


def abmil_logits(bag, params):
    """
    Returns (class logits, attention weights in canonical instance order)
    """
    H = bag.instances.to(params.V.dtype)
    H = H[canonical_order(H)]
    scores = torch.tanh(H @ params.V.T) @ params.w_a
    attention = torch.softmax(scores, dim=0)
    z = attention @ H
    return params.W_c @ z + params.b, attention


def abmil_forward(bag, params):
    logits, _ = abmil_logits(bag, params)
    return torch.softmax(logits, dim=0)
