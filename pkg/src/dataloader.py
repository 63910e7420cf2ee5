from typing import List, Optional, Tuple
import json
import logging
import os

import numpy as np
import pandas as pd

from src.c2f import PseudoDataset
from src.dataset import CoarseDataset, FineDataset, HIDDEN
from src.exceptions import DatasetIoError, FormatError, InvalidSpec
from src.json_helper import JsonHelper

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
SPLITS = ('train', 'val', 'test')


class Dataloader:
    """This class reads and writes datasets.

    A dataset is a CSV payload, one row per sample (`<label columns>,x_0,...,x_{D_in-1}`), plus a JSON manifest next
    to it with the same stem. Floats are written with 17 significant digits and parsed back with pandas'
    round-trip parser, so a save/load cycle is bit-exact.
    """
    @staticmethod
    def manifest_path(path: str) -> str:
        return os.path.splitext(path)[0] + '.json'

    @staticmethod
    def save_dataset(dataset: CoarseDataset, path: str, extra: Optional[dict] = None) -> None:
        """
        Writes a coarse dataset (hidden fine labels included) to `path` and its manifest

        :param CoarseDataset dataset: The dataset to persist
        :param str path: The CSV path; the manifest goes to the same stem with '.json'
        :param Optional[dict] extra: Additional manifest entries, e.g. config hash
        :return:
        """
        Dataloader._write_csv(path, {'coarse_label': dataset.coarse_labels,
                                     'fine_label': dataset.reveal_fine_labels()}, dataset.features)
        manifest = {
            'num_coarse_classes': dataset.num_coarse_classes,
            'input_dim': dataset.input_dim,
            'num_samples': len(dataset),
            'seed': dataset.seed,
            'split': dataset.split,
        }
        manifest.update(extra or {})
        JsonHelper.write(Dataloader.manifest_path(path), manifest)

    @staticmethod
    def load_dataset(path: str) -> CoarseDataset:
        """
        Reads a coarse dataset written by `save_dataset`

        :param str path: The CSV path
        :return CoarseDataset: The dataset, bit-identical to the one saved
        """
        manifest = Dataloader._read_manifest(path, ['num_coarse_classes', 'input_dim', 'num_samples', 'seed',
                                                    'split'])
        labels, features = Dataloader._read_csv(path, ['coarse_label', 'fine_label'], manifest)
        coarse, fine = labels
        num_classes = manifest['num_coarse_classes']
        if coarse.size and (coarse.min() < 0 or coarse.max() >= num_classes):
            raise FormatError(f'{path}: coarse label out of range [0, {num_classes})')
        if fine.size and fine.min() < HIDDEN:
            raise FormatError(f'{path}: fine labels must be >= {HIDDEN}')
        try:
            return CoarseDataset(features=features,
                                 coarse_labels=coarse,
                                 num_coarse_classes=num_classes,
                                 hidden_fine_labels=fine,
                                 seed=manifest['seed'],
                                 split=manifest['split'])
        except InvalidSpec as e:
            raise FormatError(f'{path}: {e}') from e

    @staticmethod
    def save_fine_dataset(dataset: FineDataset, path: str, extra: Optional[dict] = None) -> None:
        Dataloader._write_csv(path, {'coarse_label': np.full(len(dataset), HIDDEN, dtype=np.int64),
                                     'fine_label': dataset.fine_labels}, dataset.features)
        manifest = {
            'num_coarse_classes': 0,
            'num_fine_classes': dataset.num_fine_classes,
            'input_dim': dataset.input_dim,
            'num_samples': len(dataset),
            'seed': dataset.seed,
            'split': dataset.split,
        }
        manifest.update(extra or {})
        JsonHelper.write(Dataloader.manifest_path(path), manifest)

    @staticmethod
    def load_fine_dataset(path: str) -> FineDataset:
        manifest = Dataloader._read_manifest(path, ['num_fine_classes', 'input_dim', 'num_samples', 'seed',
                                                    'split'])
        (_, fine), features = Dataloader._read_csv(path, ['coarse_label', 'fine_label'], manifest)
        num_classes = manifest['num_fine_classes']
        if fine.size and (fine.min() < 0 or fine.max() >= num_classes):
            raise FormatError(f'{path}: fine label out of range [0, {num_classes})')
        return FineDataset(features=features,
                           fine_labels=fine,
                           num_fine_classes=num_classes,
                           seed=manifest['seed'],
                           split=manifest['split'])

    @staticmethod
    def save_pseudo_dataset(dataset: PseudoDataset, path: str, embedding_checkpoint: Optional[str],
                            seed: int, extra: Optional[dict] = None) -> None:
        """
        Writes a pseudo-labeled dataset

        :param PseudoDataset dataset: The output of pseudo-labeling
        :param str path: The CSV path
        :param Optional[str] embedding_checkpoint: Id of the embedding used ('pixels' for raw features)
        :param int seed: The pseudo-labeling seed
        :return:
        """
        Dataloader._write_csv(path, {'coarse_label': dataset.coarse_labels,
                                     'pseudo_fine_label': dataset.pseudo_labels}, dataset.features)
        manifest = {
            'num_coarse_classes': dataset.num_coarse_classes,
            'num_pseudo_classes': dataset.num_pseudo_classes,
            'input_dim': dataset.features.shape[1],
            'num_samples': len(dataset),
            'n_s': dataset.n_s,
            'dropped_count': dataset.dropped_count,
            'embedding_checkpoint': embedding_checkpoint,
            'seed': seed,
            'source_indices': dataset.source_indices.tolist(),
        }
        manifest.update(extra or {})
        JsonHelper.write(Dataloader.manifest_path(path), manifest)

    @staticmethod
    def load_pseudo_dataset(path: str) -> PseudoDataset:
        manifest = Dataloader._read_manifest(path, ['num_coarse_classes', 'num_pseudo_classes', 'input_dim',
                                                    'num_samples', 'n_s', 'dropped_count', 'source_indices'])
        (coarse, pseudo), features = Dataloader._read_csv(path, ['coarse_label', 'pseudo_fine_label'], manifest)
        if len(manifest['source_indices']) != manifest['num_samples']:
            raise FormatError(f'{path}: one source index per sample is required')
        if pseudo.size and (pseudo.min() < 0 or pseudo.max() >= manifest['num_pseudo_classes']):
            raise FormatError(f'{path}: pseudo-fine label out of range')
        return PseudoDataset(features=features,
                             coarse_labels=coarse,
                             pseudo_labels=pseudo,
                             source_indices=np.asarray(manifest['source_indices'], dtype=np.int64),
                             num_pseudo_classes=manifest['num_pseudo_classes'],
                             num_coarse_classes=manifest['num_coarse_classes'],
                             n_s=manifest['n_s'],
                             dropped_count=manifest['dropped_count'])

    @staticmethod
    def _write_csv(path: str, label_columns: dict, features: np.ndarray) -> None:
        frame = pd.DataFrame({name: np.asarray(values, dtype=np.int64) for name, values in label_columns.items()})
        x_columns = pd.DataFrame(features, columns=[f'x_{i}' for i in range(features.shape[1])])
        frame = pd.concat([frame, x_columns], axis=1)
        logger.info('Writing to file: %s', path)
        try:
            frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        except OSError as e:
            raise DatasetIoError(f'cannot write {path}: {e}') from e

    @staticmethod
    def _read_manifest(path: str, required: List[str]) -> dict:
        manifest_path = Dataloader.manifest_path(path)
        try:
            manifest = JsonHelper.read(manifest_path)
        except OSError as e:
            raise DatasetIoError(f'cannot read {manifest_path}: {e}') from e
        except json.JSONDecodeError as e:
            raise FormatError(f'{manifest_path}: malformed JSON: {e}') from e
        missing = [key for key in required if key not in manifest]
        if missing:
            raise FormatError(f'{manifest_path}: missing keys {missing}')
        if manifest.get('split', 'train') not in SPLITS:
            raise FormatError(f'{manifest_path}: unknown split {manifest["split"]!r}')
        return manifest

    @staticmethod
    def _read_csv(path: str, label_names: List[str], manifest: dict) -> Tuple[List[np.ndarray], np.ndarray]:
        input_dim = manifest['input_dim']
        expected = label_names + [f'x_{i}' for i in range(input_dim)]
        try:
            data = pd.read_csv(path, float_precision='round_trip')
        except OSError as e:
            raise DatasetIoError(f'cannot read {path}: {e}') from e
        except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
            raise FormatError(f'{path}: {e}') from e

        if list(data.columns) != expected:
            raise FormatError(f'{path}: header does not match {len(label_names)} label columns '
                              f'and input_dim={input_dim}')
        if data.shape[0] != manifest['num_samples']:
            raise FormatError(f'{path}: {data.shape[0]} rows, manifest says {manifest["num_samples"]}')
        try:
            values = data.to_numpy(dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise FormatError(f'{path}: non-numeric field: {e}') from e
        if not np.all(np.isfinite(values)):
            raise FormatError(f'{path}: missing or non-finite fields (truncated file?)')

        labels = []
        for i, name in enumerate(label_names):
            column = values[:, i]
            if not np.array_equal(column, np.round(column)):
                raise FormatError(f'{path}: non-integer {name}')
            labels.append(column.astype(np.int64))
        return labels, np.ascontiguousarray(values[:, len(label_names):])


save_dataset = Dataloader.save_dataset
load_dataset = Dataloader.load_dataset
