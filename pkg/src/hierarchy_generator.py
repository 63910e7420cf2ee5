from typing import Iterable, Tuple
import logging

import numpy as np

from src.dataset import CoarseDataset, FineDataset, HIDDEN, SynthSpec
from src.exceptions import EmptySplit, IncompleteSplit, OverlappingSplit
from src.numerics import SeededRng

logger = logging.getLogger(__name__)


def generate_hierarchical(spec: SynthSpec) -> CoarseDataset:
    """
    Draws a dataset with coarse classes that each nest `fine_per_coarse` Gaussian fine clusters

    Samples come out grouped by coarse class, then by fine class. Fine ids are global:
    fine id = coarse id * fine_per_coarse + local fine index.

    :param SynthSpec spec: The generator parameters
    :return CoarseDataset: The dataset, hidden fine labels populated
    """
    spec.validate()
    rng = SeededRng(spec.seed)
    informative = spec.informative_dim
    coarse_only = informative - spec.fine_subspace_dim
    per_coarse = spec.fine_per_coarse * spec.samples_per_fine
    total = spec.num_coarse_classes * per_coarse

    coarse_centers = rng.normal(scale=spec.coarse_spread, size=(spec.num_coarse_classes, informative))
    if spec.fine_subspace_dim:
        coarse_centers[:, coarse_only:] = 0.0
    features = np.empty((total, spec.input_dim), dtype=np.float64)
    coarse_labels = np.empty(total, dtype=np.int64)
    fine_labels = np.empty(total, dtype=np.int64)

    row = 0
    for c in range(spec.num_coarse_classes):
        offsets = rng.normal(scale=spec.fine_spread, size=(spec.fine_per_coarse, informative))
        if spec.fine_subspace_dim:
            offsets[:, :coarse_only] = 0.0
        fine_centers = coarse_centers[c] + offsets
        for f in range(spec.fine_per_coarse):
            block = slice(row, row + spec.samples_per_fine)
            features[block, :informative] = fine_centers[f] + rng.normal(scale=spec.noise_sigma,
                                                                         size=(spec.samples_per_fine, informative))
            if spec.nuisance_dim:
                features[block, informative:] = rng.normal(scale=spec.nuisance_sigma,
                                                           size=(spec.samples_per_fine, spec.nuisance_dim))
            if spec.brightness_sigma:
                features[block] += rng.normal(scale=spec.brightness_sigma, size=(spec.samples_per_fine, 1))
            coarse_labels[block] = c
            fine_labels[block] = c * spec.fine_per_coarse + f
            row += spec.samples_per_fine

    logger.info('Generated %d samples: %d coarse x %d fine x %d', total, spec.num_coarse_classes,
                spec.fine_per_coarse, spec.samples_per_fine)
    return CoarseDataset(features=features,
                         coarse_labels=coarse_labels,
                         num_coarse_classes=spec.num_coarse_classes,
                         hidden_fine_labels=fine_labels,
                         seed=spec.seed,
                         split='train')


def split_meta(dataset: CoarseDataset,
               train_coarse: Iterable[int],
               val_coarse: Iterable[int],
               test_coarse: Iterable[int]) -> Tuple[CoarseDataset, FineDataset, FineDataset]:
    """
    Splits a dataset into disjoint meta-train, meta-validation and meta-test class sets

    The training split keeps coarse labels only, remapped to 0..|train|-1 in ascending original order, with its
    fine labels still hidden. The validation and test splits drop coarse labels and expose fine labels, remapped
    to 0..F-1 in ascending original fine id.

    :param CoarseDataset dataset: The full dataset with hidden fine labels
    :param Iterable[int] train_coarse: Coarse ids of the meta-training split
    :param Iterable[int] val_coarse: Coarse ids of the meta-validation split
    :param Iterable[int] test_coarse: Coarse ids of the meta-test split
    :return Tuple[CoarseDataset, FineDataset, FineDataset]: train, val and test splits
    """
    splits = [set(int(c) for c in s) for s in (train_coarse, val_coarse, test_coarse)]
    for name, ids in zip(('train', 'val', 'test'), splits):
        if not ids:
            raise EmptySplit(f'the {name} split has no coarse classes')
    for a in range(3):
        for b in range(a + 1, 3):
            shared = splits[a] & splits[b]
            if shared:
                raise OverlappingSplit(f'coarse classes {sorted(shared)} appear in two splits')
    union = splits[0] | splits[1] | splits[2]
    if union != set(range(dataset.num_coarse_classes)):
        raise IncompleteSplit(f'splits must partition [0, {dataset.num_coarse_classes}), got {sorted(union)}')

    train_ids = sorted(splits[0])
    train_mask = np.isin(dataset.coarse_labels, train_ids)
    remap = {c: i for i, c in enumerate(train_ids)}
    train = CoarseDataset(features=dataset.features[train_mask],
                          coarse_labels=np.array([remap[c] for c in dataset.coarse_labels[train_mask]],
                                                 dtype=np.int64),
                          num_coarse_classes=len(train_ids),
                          hidden_fine_labels=dataset.reveal_fine_labels()[train_mask],
                          seed=dataset.seed,
                          split='train')
    val = _fine_split(dataset, sorted(splits[1]), 'val')
    test = _fine_split(dataset, sorted(splits[2]), 'test')
    logger.info('Split %d samples into train=%d val=%d test=%d', len(dataset), len(train), len(val), len(test))
    return train, val, test


def _fine_split(dataset: CoarseDataset, coarse_ids: list, split: str) -> FineDataset:
    mask = np.isin(dataset.coarse_labels, coarse_ids)
    fine = dataset.reveal_fine_labels()[mask]
    if np.any(fine == HIDDEN):
        raise EmptySplit(f'the {split} split needs fine labels on every sample')
    fine_ids = np.unique(fine)
    return FineDataset(features=dataset.features[mask],
                       fine_labels=np.searchsorted(fine_ids, fine),
                       num_fine_classes=fine_ids.size,
                       seed=dataset.seed,
                       split=split)
