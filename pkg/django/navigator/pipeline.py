"""
Steps shared by several commands: restoring the fusion network, computing a slide's heatmaps and
locating its navigation trace.
"""
import logging
from pathlib import Path

import torch

from core.checkpoints import CheckpointError, load_checkpoint, save_checkpoint
from encoder.encoders import encode_pyramid, get_encoder
from mcfn.fusion import predict_all
from mcfn.network import FusionNetwork, Heatmap
from mst.memory import MemoryBank
from ndsl.exceptions import DatasetError
from slides.resampling import area_resample

from .exceptions import TracesMissingError

logger = logging.getLogger(__name__)


def network_metadata(config):
    return {
        'config_hash': config.config_hash(),
        'spec_hash': config.encoder.spec_hash(),
        'seed': config.mcfn.seed,
        'mcfn': config.mcfn.to_dict(),
    }


def save_network(path, params, config):
    save_checkpoint(path, params, metadata=network_metadata(config))


def load_network(config, path):
    """
    A FusionNetwork built from the config and restored from the checkpoint at path
    """
    params = FusionNetwork(config.mcfn)
    metadata = load_checkpoint(path, params)
    if metadata.get('spec_hash') not in (None, config.encoder.spec_hash()):
        raise CheckpointError(f'{path} was trained on tokens of another encoder spec')
    params.eval()
    logger.info('Restored the fusion network from %s', path)
    return params


def slide_heatmaps(pyramid, params, config, token_grids=None):
    """
    Returns (token_grids, heatmaps) of every level, without gradients
    """
    if token_grids is None:
        token_grids = encode_pyramid(pyramid, config.encoder, encoder=get_encoder(config.encoder))
    with torch.no_grad():
        heatmaps = predict_all(token_grids, params)
    return token_grids, heatmaps


def oracle_heatmaps(pyramid, size):
    """
    The navigation annotations themselves on the prediction grid
    """
    if pyramid.nav_annotations is None:
        raise DatasetError(f'{pyramid.slide_id} has no navigation annotations')
    return [Heatmap(values=torch.from_numpy(area_resample(nav, size, size)), level_index=m)
            for m, nav in enumerate(pyramid.nav_annotations)]


def trace_path(traces, slide_id):
    return Path(traces) / f'{slide_id}.jsonl'


def load_trace(traces, slide_id):
    path = trace_path(traces, slide_id)
    if not path.exists():
        raise TracesMissingError(f'No navigation trace for {slide_id} in {traces}')
    return MemoryBank.load(path)
