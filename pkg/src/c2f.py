from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List
import logging

import numpy as np
from joblib import Parallel, delayed

from src.dataset import CoarseDataset
from src.exceptions import EmbeddingDimMismatch, EmptyDataset, InvalidNs
from src.measure_time import measure_time
from src.numerics import SeededRng, gram, l2_normalize

logger = logging.getLogger(__name__)

Embedding = Callable[[np.ndarray], np.ndarray]


@dataclass
class PseudoSample:
    """A sample annotated with its coarse class and the pseudo-fine class it was grouped into."""
    x: np.ndarray
    coarse_label: int
    pseudo_fine_label: int
    source_index: int


class PseudoDataset:
    """The output of coarse-to-fine pseudo-labeling.

    Rows are stored in creation order: pseudo-class 0 first (its seed, then its members by decreasing similarity),
    then pseudo-class 1, and so on. Every pseudo-class has exactly `n_s` members sharing one coarse label.
    """
    def __init__(self, features: np.ndarray, coarse_labels: np.ndarray, pseudo_labels: np.ndarray,
                 source_indices: np.ndarray, num_pseudo_classes: int, num_coarse_classes: int, n_s: int,
                 dropped_count: int) -> None:
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        self.coarse_labels = np.asarray(coarse_labels, dtype=np.int64)
        self.pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
        self.source_indices = np.asarray(source_indices, dtype=np.int64)
        self.num_pseudo_classes = int(num_pseudo_classes)
        self.num_coarse_classes = int(num_coarse_classes)
        self.n_s = int(n_s)
        self.dropped_count = int(dropped_count)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, idx: int) -> PseudoSample:
        return PseudoSample(x=self.features[idx], coarse_label=int(self.coarse_labels[idx]),
                            pseudo_fine_label=int(self.pseudo_labels[idx]),
                            source_index=int(self.source_indices[idx]))

    def __iter__(self) -> Iterator[PseudoSample]:
        for idx in range(len(self)):
            yield self[idx]

    def class_samples(self) -> Dict[int, np.ndarray]:
        """
        :return Dict[int, np.ndarray]: pseudo-fine id -> feature rows, used as episode classes
        """
        return {
            c: self.features[self.pseudo_labels == c]
            for c in range(self.num_pseudo_classes)
        }

    def equals(self, other: 'PseudoDataset') -> bool:
        return (isinstance(other, PseudoDataset)
                and (self.num_pseudo_classes, self.num_coarse_classes, self.n_s, self.dropped_count)
                == (other.num_pseudo_classes, other.num_coarse_classes, other.n_s, other.dropped_count)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.coarse_labels, other.coarse_labels)
                and np.array_equal(self.pseudo_labels, other.pseudo_labels)
                and np.array_equal(self.source_indices, other.source_indices))


def pixels_embed(x: np.ndarray) -> np.ndarray:
    """
    The raw-feature embedding of the pixel baseline: the input itself, l2-normalized

    :param np.ndarray x: A raw input vector
    :return np.ndarray: The unit vector parallel to x
    """
    return l2_normalize(x)


def group_by_similarity(similarity: np.ndarray, n_s: int, rng: SeededRng) -> List[List[int]]:
    """
    Greedy grouping of one coarse class

    While at least `n_s` samples remain: draw a seed uniformly among them, absorb the `n_s - 1` remaining samples
    most similar to it (ties to the lowest index) and remove the group. Leftovers are dropped.

    :param np.ndarray similarity: The M×M similarity matrix of the class, computed once
    :param int n_s: Group size
    :param SeededRng rng: The stream of seed draws
    :return List[List[int]]: Groups of local indices, seed first, in creation order
    """
    m = similarity.shape[0]
    remaining = np.ones(m, dtype=bool)
    groups = []
    while remaining.sum() >= n_s:
        candidates = np.flatnonzero(remaining)
        seed = int(candidates[rng.integers(candidates.size)])
        others = candidates[candidates != seed]
        order = np.lexsort((others, -similarity[seed, others]))
        group = [seed] + others[order[:n_s - 1]].tolist()
        remaining[group] = False
        groups.append(group)
    return groups


def _label_coarse_class(features: np.ndarray, embed: Embedding, n_s: int, rng: SeededRng) -> List[List[int]]:
    embeddings = [np.asarray(embed(x), dtype=np.float64).reshape(-1) for x in features]
    dims = {e.size for e in embeddings}
    if len(dims) != 1:
        raise EmbeddingDimMismatch(f'embedding returned vectors of lengths {sorted(dims)}')
    return group_by_similarity(gram(np.stack(embeddings, axis=1)), n_s, rng)


@measure_time
def pseudo_label(dataset: CoarseDataset, embed: Embedding, n_s: int, rng: SeededRng, n_jobs: int = 1) -> PseudoDataset:
    """
    Splits every coarse class into pseudo-fine classes of exactly `n_s` samples

    Coarse class c draws its seeds from `rng.derive(c)`, so classes are independent and the result is the same
    whether they run sequentially or on `n_jobs` threads. Pseudo-fine ids are assigned in creation order,
    coarse class by coarse class.

    :param CoarseDataset dataset: The coarse-labeled training split
    :param Embedding embed: Maps a raw vector to a unit-norm embedding of fixed length
    :param int n_s: Samples per pseudo-fine class
    :param SeededRng rng: The pseudo-labeling stream; only its seed is used
    :param int n_jobs: Threads for the per-class work
    :return PseudoDataset: The pseudo-labeled dataset
    """
    if len(dataset) == 0:
        raise EmptyDataset('cannot pseudo-label an empty dataset')
    if int(n_s) != n_s or n_s < 1:
        raise InvalidNs(f'N_s must be a positive integer, got {n_s}')
    n_s = int(n_s)

    class_indices = dataset.class_indices()
    jobs = (delayed(_label_coarse_class)(dataset.features[idx], embed, n_s, rng.derive(c))
            for c, idx in class_indices.items())
    per_class = Parallel(n_jobs=n_jobs, prefer='threads')(jobs)

    rows, coarse, pseudo = [], [], []
    dropped = 0
    next_id = 0
    for (c, idx), groups in zip(class_indices.items(), per_class):
        for group in groups:
            rows.extend(idx[group].tolist())
            coarse.extend([c] * n_s)
            pseudo.extend([next_id] * n_s)
            next_id += 1
        dropped += idx.size - len(groups) * n_s
        logger.debug('coarse class %d: %d samples -> %d pseudo-classes', c, idx.size, len(groups))

    rows = np.asarray(rows, dtype=np.int64)
    logger.info('Pseudo-labeling with N_s=%d: %d pseudo-classes, %d samples dropped', n_s, next_id, dropped)
    return PseudoDataset(features=dataset.features[rows] if rows.size else np.zeros((0, dataset.input_dim)),
                         coarse_labels=np.asarray(coarse, dtype=np.int64),
                         pseudo_labels=np.asarray(pseudo, dtype=np.int64),
                         source_indices=rows,
                         num_pseudo_classes=next_id,
                         num_coarse_classes=dataset.num_coarse_classes,
                         n_s=n_s,
                         dropped_count=dropped)
