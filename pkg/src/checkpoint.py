from typing import Optional, Union
import logging
import os

import numpy as np

from src.bde import BdeParams
from src.encoder import EncoderParams
from src.exceptions import DatasetIoError, FormatError
from src.json_helper import JsonHelper

logger = logging.getLogger(__name__)

DTYPE = '<f8'
KINDS = ('bde', 'encoder')

Params = Union[BdeParams, EncoderParams]


def _paths(stem: str):
    return stem + '.json', stem + '.bin'


def save_checkpoint(params: Params, stem: str, extra: Optional[dict] = None) -> None:
    """
    Writes `<stem>.json` (layout and constants) and `<stem>.bin` (little-endian float64 values, concatenated in
    `named_arrays()` order: encoder W0, b0, W1, b1, W2, b2, then the classifier W of a BDE checkpoint)

    :param params: BdeParams or EncoderParams
    :param str stem: Path without extension
    :param Optional[dict] extra: Additional manifest entries, e.g. config hash, seed, selected epoch and hyperparameters
    """
    json_path, bin_path = _paths(stem)
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    named = params.named_arrays()
    encoder = params.encoder if isinstance(params, BdeParams) else params
    manifest = {
        'kind': 'bde' if isinstance(params, BdeParams) else 'encoder',
        'dtype': DTYPE,
        'layout': [[name, list(a.shape)] for name, a in named],
        'input_dim': encoder.input_dim,
        'hidden_dim': encoder.hidden_dim,
        'output_dim': encoder.output_dim,
    }
    if isinstance(params, BdeParams):
        manifest.update({'tau': params.tau, 'm': params.m, 'n': params.n, 'num_classes': params.num_classes})
    manifest.update(extra or {})

    values = np.concatenate([a.ravel() for _, a in named]).astype(DTYPE)
    with open(bin_path, 'wb') as f:
        f.write(values.tobytes())
    JsonHelper.write(json_path, manifest, log=False)
    logger.info('Checkpoint saved: %s (%d values)', stem, values.size)


def load_checkpoint(stem: str) -> Params:
    """
    :param str stem: Path without extension
    :return: The BdeParams or EncoderParams stored under `stem`, bit-exact
    """
    json_path, bin_path = _paths(stem)
    try:
        manifest = JsonHelper.read(json_path, log=False)
        with open(bin_path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise DatasetIoError(f'cannot read checkpoint {stem}: {e}') from e
    except ValueError as e:
        raise FormatError(f'malformed checkpoint manifest {json_path}: {e}') from e

    if manifest.get('kind') not in KINDS or manifest.get('dtype') != DTYPE or 'layout' not in manifest:
        raise FormatError(f'{json_path} is not a checkpoint manifest')
    shapes = [tuple(shape) for _, shape in manifest['layout']]
    expected = sum(int(np.prod(shape)) for shape in shapes)
    if len(raw) != expected * 8:
        raise FormatError(f'{bin_path} holds {len(raw)} bytes, layout needs {expected * 8}')

    values = np.frombuffer(raw, dtype=DTYPE).astype(np.float64)
    arrays, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(values[offset:offset + size].reshape(shape).copy())
        offset += size

    n_encoder = 6
    if len(arrays) < n_encoder:
        raise FormatError(f'{json_path} lists {len(arrays)} arrays, an encoder needs {n_encoder}')
    encoder = EncoderParams(weights=arrays[0:n_encoder:2], biases=arrays[1:n_encoder:2])
    if manifest['kind'] == 'encoder':
        return encoder
    if len(arrays) != n_encoder + 1:
        raise FormatError(f'{json_path}: a BDE checkpoint carries exactly one classifier matrix')
    return BdeParams(encoder, arrays[n_encoder], tau=manifest['tau'], m=manifest['m'], n=manifest['n'])


def load_encoder(stem: str) -> EncoderParams:
    """The encoder of any checkpoint; used to warm-start meta-training from BDE."""
    params = load_checkpoint(stem)
    return params.encoder if isinstance(params, BdeParams) else params
