"""
Navigation-driven supervision loss: a foreground-weighted l1 term as the primary supervision plus
soft Dice and soft focal regularizers, both written for continuous (not binary) targets.
"""
from dataclasses import asdict, dataclass

import torch

from .exceptions import LossConfigError, LossShapeError


@dataclass
class LossConfig:
    lambda_l1: float = 0.1
    lambda_dice: float = 1.0
    lambda_focal: float = 1.0
    foreground_weight: float = 2.0
    foreground_threshold: float = 0.0
    epsilon: float = 1e-6
    focal_gamma: float = 2.0

    def validate(self):
        for name in ('lambda_l1', 'lambda_dice', 'lambda_focal'):
            if getattr(self, name) < 0:
                raise LossConfigError(f'loss.{name}: must be >= 0')
        if self.foreground_weight < 1:
            raise LossConfigError('loss.foreground_weight: must be >= 1')
        if self.epsilon <= 0:
            raise LossConfigError('loss.epsilon: must be > 0')

    def to_dict(self):
        return asdict(self)


def _values(x):
    values = getattr(x, 'values', x)
    if not torch.is_tensor(values):
        values = torch.as_tensor(values, dtype=torch.float64)
    return values


def _pair(P, G):
    P, G = _values(P), _values(G)
    if P.shape != G.shape:
        raise LossShapeError(f'Prediction {tuple(P.shape)} and annotation {tuple(G.shape)} differ in shape')
    return P, G.to(P.dtype)


def weighted_l1(P, G, cfg):
    """
    Mean of w(G) * |P - G| normalized by the mean weight; w = foreground_weight where G > threshold else 1
    """
    P, G = _pair(P, G)
    weights = torch.where(G > cfg.foreground_threshold,
                          torch.full_like(G, cfg.foreground_weight), torch.ones_like(G))
    return (weights * (P - G).abs()).sum() / weights.sum()


def soft_dice(P, G, cfg):
    """
    1 - (2 sum PG + eps) / (sum P^2 + sum G^2 + eps); squared denominator makes P = G an exact minimum
    """
    P, G = _pair(P, G)
    numerator = 2 * (P * G).sum() + cfg.epsilon
    denominator = (P * P).sum() + (G * G).sum() + cfg.epsilon
    return 1 - numerator / denominator


def soft_focal(P, G, cfg):
    """
    Cross-entropy with soft targets modulated by |P - G|^gamma, which vanishes where the prediction
    already matches the annotation
    """
    P, G = _pair(P, G)
    clamped = P.clamp(cfg.epsilon, 1 - cfg.epsilon)
    cross_entropy = -G * torch.log(clamped) - (1 - G) * torch.log(1 - clamped)
    return ((P - G).abs() ** cfg.focal_gamma * cross_entropy).mean()


def ndsl_terms(P, G, cfg):
    l1 = weighted_l1(P, G, cfg)
    dice = soft_dice(P, G, cfg)
    focal = soft_focal(P, G, cfg)
    total = cfg.lambda_l1 * l1 + cfg.lambda_dice * dice + cfg.lambda_focal * focal
    return {'total': total, 'l1': l1, 'dice': dice, 'focal': focal}


def ndsl_loss(P, G, cfg):
    return ndsl_terms(P, G, cfg)['total']
