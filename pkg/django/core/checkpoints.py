"""
Binary parameter checkpoints shared by the fusion network and the slide classifier.

Layout: the 4-byte magic, a little-endian uint64 header length, a UTF-8 JSON header
(tensor names and shapes in declaration order, plus caller metadata such as spec hash and seed),
then every tensor as little-endian float64 values in the order listed in the header.
"""
import json
import logging

import numpy as np
import torch

from .exceptions import InvalidInputError, MissingDependencyError

logger = logging.getLogger(__name__)

MAGIC = b'SNCK'
FORMAT_VERSION = 1


class CheckpointError(InvalidInputError):
    pass


def save_checkpoint(path, module, metadata=None):
    state = module.state_dict()
    header = {
        'format_version': FORMAT_VERSION,
        'tensors': [{'name': name, 'shape': list(tensor.shape)} for name, tensor in state.items()],
        'metadata': metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(np.array([len(header_bytes)], dtype='<u8').tobytes())
        f.write(header_bytes)
        for tensor in state.values():
            f.write(tensor.detach().cpu().numpy().astype('<f8').tobytes())
    logger.info('Saved checkpoint with %d tensors to %s', len(state), path)


def read_checkpoint(path):
    """
    Returns (metadata, state_dict) where the state dict holds float64 tensors
    """
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError:
        raise MissingDependencyError(f'Checkpoint not found: {path}', producer='train_cmt')
    if data[:4] != MAGIC:
        raise CheckpointError(f'{path} is not a checkpoint file')
    header_length = int(np.frombuffer(data[4:12], dtype='<u8')[0])
    header = json.loads(data[12:12 + header_length].decode('utf-8'))
    if header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f'Unsupported checkpoint format version in {path}')

    offset = 12 + header_length
    state = {}
    for entry in header['tensors']:
        count = int(np.prod(entry['shape'], dtype=np.int64))
        values = np.frombuffer(data, dtype='<f8', count=count, offset=offset)
        state[entry['name']] = torch.from_numpy(values.astype(np.float64).reshape(entry['shape']))
        offset += count * 8
    if offset != len(data):
        raise CheckpointError(f'Trailing or missing tensor data in {path}')
    return header['metadata'], state


def load_checkpoint(path, module):
    """
    Restores parameters into an already constructed module and returns the checkpoint metadata
    """
    metadata, state = read_checkpoint(path)
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f'Checkpoint {path} does not match the model: {e}')
    return metadata
