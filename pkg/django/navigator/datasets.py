"""
Dataset directories written by `synth`:

    index.json        {config_hash, seed, slides: [{slide_id, path, label, split}]}
    <slide_id>/       one pyramid directory per slide (see slides.storage)
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from slides.pyramid import SlideLabel
from slides.storage import load_pyramid, save_pyramid
from slides.synth import generate_synthetic_slide

from .exceptions import DatasetMissingError, RunConfigError

logger = logging.getLogger(__name__)

INDEX_NAME = 'index.json'


@dataclass(frozen=True)
class IndexEntry:
    slide_id: str
    path: str
    label: str
    split: str


def slide_seed(seed, i):
    """
    Independent per-slide seed derived from the run seed and the slide position
    """
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def assign_splits(count, test_fraction, seed):
    """
    Slide-level train/test split: round(test_fraction * count) randomly chosen slides go to test
    """
    test_count = int(math.floor(test_fraction * count + 0.5))
    test = set(np.random.default_rng(seed).permutation(count)[:test_count].tolist())
    return ['test' if i in test else 'train' for i in range(count)]


def slide_config(config, i):
    """
    With balanced labels and no fixed class, slide i gets class i mod 4
    """
    if config.pyramid.label is None and config.dataset.balanced_labels:
        return replace(config.pyramid, label=SlideLabel.from_index(i % len(SlideLabel)).value)
    return config.pyramid


def write_dataset(config, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    splits = assign_splits(config.dataset.slide_count, config.dataset.test_fraction, config.seed)
    entries = []
    for i, split in enumerate(splits):
        slide_id = f'slide-{i:04d}'
        pyramid = generate_synthetic_slide(slide_seed(config.seed, i), slide_config(config, i), slide_id=slide_id)
        save_pyramid(pyramid, path / slide_id)
        entries.append(IndexEntry(slide_id, slide_id, pyramid.label.value, split))
        logger.info('Synthesized %s (%s, %s)', slide_id, pyramid.label.value, split)
    index = {
        'config_hash': config.config_hash(),
        'seed': config.seed,
        'slides': [asdict(entry) for entry in entries],
    }
    with open(path / INDEX_NAME, 'w') as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return entries


def read_index(path):
    index_path = Path(path) / INDEX_NAME
    if not index_path.exists():
        raise DatasetMissingError(f'No dataset index at {index_path}')
    with open(index_path) as f:
        index = json.load(f)
    index['slides'] = [IndexEntry(**entry) for entry in index['slides']]
    return index


def load_dataset(path, split='all'):
    """
    Returns (index, pyramids) for the slides of one split, in index order
    """
    if split not in ('train', 'test', 'all'):
        raise RunConfigError('split', f'unknown split {split!r}')
    index = read_index(path)
    entries = [entry for entry in index['slides'] if split == 'all' or entry.split == split]
    pyramids = [load_pyramid(Path(path) / entry.path) for entry in entries]
    logger.info('Loaded %d %s slides from %s', len(pyramids), split, path)
    return index, pyramids
