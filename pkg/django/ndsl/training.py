"""
Desk-scale training of the fusion network against navigation annotations.

Encoder tokens and 256x256 targets are prepared once per slide (the encoder is frozen), then every
optimizer step takes one (slide, level) pair in a fixed order: slides in dataset order, levels
from thumbnail upwards. One backward pass per level.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
import torch

from encoder.encoders import encode_pyramid
from mcfn.fusion import predict_level
from slides.resampling import area_resample

from .exceptions import DatasetError
from .losses import ndsl_terms

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ['step', 'total', 'l1', 'dice', 'focal']


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    log_every: int = 20

    def to_dict(self):
        return asdict(self)


@dataclass
class PreparedSlide:
    slide_id: str
    token_grids: list
    targets: list


def render_target(nav, size=256):
    """
    G_nav^m on the prediction grid: area average, then max-renormalize (all-zero stays all-zero)
    """
    target = area_resample(nav, size, size)
    peak = target.max()
    if peak > 0:
        target = target / peak
    return torch.from_numpy(np.clip(target, 0.0, 1.0))


def prepare_dataset(dataset, spec, encoder=None):
    missing = [pyramid.slide_id for pyramid in dataset if pyramid.nav_annotations is None]
    if missing:
        raise DatasetError(f'Slides without navigation annotations: {", ".join(missing)}')
    prepared = []
    for pyramid in dataset:
        prepared.append(PreparedSlide(
            slide_id=pyramid.slide_id,
            token_grids=encode_pyramid(pyramid, spec, encoder=encoder),
            targets=[render_target(nav, spec.input_size) for nav in pyramid.nav_annotations],
        ))
    return prepared


def _schedule(prepared):
    return [(i, m) for i, slide in enumerate(prepared) for m in range(len(slide.targets))]


def train_cmt(dataset, params, cfg, opt_cfg, spec, encoder=None, prepared=None):
    """
    Trains params in place with Adam and returns (params, loss curve DataFrame)
    """
    cfg.validate()
    if prepared is None:
        prepared = prepare_dataset(dataset, spec, encoder=encoder)
    schedule = _schedule(prepared)
    if not schedule:
        raise DatasetError('Cannot train on an empty dataset')

    torch.manual_seed(opt_cfg.seed)
    optimizer = torch.optim.Adam(params.trainable_parameters(), lr=opt_cfg.learning_rate,
                                 betas=(opt_cfg.beta1, opt_cfg.beta2))
    params.train()
    rows = []
    for step in range(opt_cfg.steps):
        index, m = schedule[step % len(schedule)]
        slide = prepared[index]
        optimizer.zero_grad()
        heatmap = predict_level(slide.token_grids, m, params)
        terms = ndsl_terms(heatmap, slide.targets[m], cfg)
        terms['total'].backward()
        optimizer.step()
        rows.append({'step': step, **{name: float(value.detach()) for name, value in terms.items()}})
        if opt_cfg.log_every and (step % opt_cfg.log_every == 0 or step == opt_cfg.steps - 1):
            logger.info('step %d slide %s level %d loss %.5f', step, slide.slide_id, m, rows[-1]['total'])
    params.eval()
    return params, pd.DataFrame(rows, columns=CURVE_COLUMNS)


def held_out_loss(prepared, params, cfg):
    """
    Mean NDSL loss over every (slide, level) pair, without gradients
    """
    losses = []
    with torch.no_grad():
        for slide in prepared:
            for m, target in enumerate(slide.targets):
                losses.append(float(ndsl_terms(predict_level(slide.token_grids, m, params), target, cfg)['total']))
    return float(np.mean(losses)) if losses else float('nan')
