from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional
import logging

import numpy as np

from src.exceptions import DimensionMismatch, InvalidSpec

logger = logging.getLogger(__name__)

HIDDEN = -1


@dataclass
class CoarseSample:
    """One coarsely-labeled training sample.

    The hidden fine label travels with the sample for evaluation only; the training path never reads it.
    """
    x: np.ndarray
    coarse_label: int
    hidden_fine_label: Optional[int] = None

    def __str__(self) -> str:
        return f'({self.coarse_label}, dim={self.x.shape[0]})'


class CoarseDataset:
    """This class stores samples that carry only a coarse label.

    Features are kept as one N×D_in array. The fine labels of a synthetic dataset are stored but gated: the only
    accessor is `reveal_fine_labels`, called by evaluation code and never by embedding, pseudo-labeling, episode or
    meta-training code.
    """
    def __init__(self,
                 features: np.ndarray,
                 coarse_labels: np.ndarray,
                 num_coarse_classes: int,
                 hidden_fine_labels: Optional[np.ndarray] = None,
                 seed: Optional[int] = None,
                 split: str = 'train') -> None:
        """
        Constructor for CoarseDataset class

        :param np.ndarray features: N×D_in array of samples
        :param np.ndarray coarse_labels: N integer labels in [0, C)
        :param int num_coarse_classes: C
        :param Optional[np.ndarray] hidden_fine_labels: N global fine ids, -1 where absent
        :param Optional[int] seed: The seed that generated the data, kept for the manifest
        :param str split: 'train', 'val' or 'test'
        """
        features = np.ascontiguousarray(features, dtype=np.float64)
        coarse_labels = np.asarray(coarse_labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != coarse_labels.shape[0]:
            raise DimensionMismatch(f'{features.shape} features for {coarse_labels.shape[0]} labels')
        if hidden_fine_labels is None:
            hidden_fine_labels = np.full(coarse_labels.shape[0], HIDDEN, dtype=np.int64)
        hidden_fine_labels = np.asarray(hidden_fine_labels, dtype=np.int64)
        if hidden_fine_labels.shape != coarse_labels.shape:
            raise DimensionMismatch('one hidden fine label per sample is required')
        if num_coarse_classes < 1:
            raise InvalidSpec('a dataset needs at least one coarse class')
        if coarse_labels.size and (coarse_labels.min() < 0 or coarse_labels.max() >= num_coarse_classes):
            raise InvalidSpec(f'coarse labels must lie in [0, {num_coarse_classes})')
        missing = set(range(num_coarse_classes)) - set(np.unique(coarse_labels).tolist())
        if missing:
            raise InvalidSpec(f'coarse classes without samples: {sorted(missing)}')
        if not np.all(np.isfinite(features)):
            raise InvalidSpec('features must be finite')

        self.features = features
        self.coarse_labels = coarse_labels
        self.num_coarse_classes = int(num_coarse_classes)
        self._hidden_fine_labels = hidden_fine_labels
        self.seed = seed
        self.split = split

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, idx: int) -> CoarseSample:
        fine = int(self._hidden_fine_labels[idx])
        return CoarseSample(x=self.features[idx],
                            coarse_label=int(self.coarse_labels[idx]),
                            hidden_fine_label=None if fine == HIDDEN else fine)

    def __iter__(self) -> Iterator[CoarseSample]:
        for idx in range(len(self)):
            yield self[idx]

    def has_fine_labels(self) -> bool:
        return bool(np.any(self._hidden_fine_labels != HIDDEN))

    def reveal_fine_labels(self) -> np.ndarray:
        """
        Evaluation-only access to the hidden fine labels

        :return np.ndarray: N global fine ids, -1 where absent
        """
        return self._hidden_fine_labels.copy()

    def class_indices(self) -> Dict[int, np.ndarray]:
        """
        :return Dict[int, np.ndarray]: coarse id -> ascending sample indices
        """
        return {
            c: np.flatnonzero(self.coarse_labels == c)
            for c in range(self.num_coarse_classes)
        }

    def class_samples(self) -> Dict[int, np.ndarray]:
        """
        :return Dict[int, np.ndarray]: coarse id -> feature rows of that class, used as episode classes
        """
        return {c: self.features[idx] for c, idx in self.class_indices().items()}

    def equals(self, other: 'CoarseDataset') -> bool:
        """Bit-exact comparison including hidden labels and split metadata."""
        return (isinstance(other, CoarseDataset)
                and self.num_coarse_classes == other.num_coarse_classes
                and self.seed == other.seed
                and self.split == other.split
                and self.features.shape == other.features.shape
                and np.array_equal(self.features.view(np.uint64), other.features.view(np.uint64))
                and np.array_equal(self.coarse_labels, other.coarse_labels)
                and np.array_equal(self._hidden_fine_labels, other._hidden_fine_labels))


class FineDataset:
    """Fine-labeled samples of the meta-validation or meta-test split."""
    def __init__(self,
                 features: np.ndarray,
                 fine_labels: np.ndarray,
                 num_fine_classes: int,
                 seed: Optional[int] = None,
                 split: str = 'test') -> None:
        features = np.ascontiguousarray(features, dtype=np.float64)
        fine_labels = np.asarray(fine_labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != fine_labels.shape[0]:
            raise DimensionMismatch(f'{features.shape} features for {fine_labels.shape[0]} labels')
        if fine_labels.size and (fine_labels.min() < 0 or fine_labels.max() >= num_fine_classes):
            raise InvalidSpec(f'fine labels must lie in [0, {num_fine_classes})')
        self.features = features
        self.fine_labels = fine_labels
        self.num_fine_classes = int(num_fine_classes)
        self.seed = seed
        self.split = split

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def class_sizes(self) -> List[int]:
        return np.bincount(self.fine_labels, minlength=self.num_fine_classes).tolist()

    def class_samples(self) -> Dict[int, np.ndarray]:
        return {
            c: self.features[self.fine_labels == c]
            for c in range(self.num_fine_classes)
        }

    def equals(self, other: 'FineDataset') -> bool:
        return (isinstance(other, FineDataset)
                and self.num_fine_classes == other.num_fine_classes
                and self.seed == other.seed
                and self.split == other.split
                and self.features.shape == other.features.shape
                and np.array_equal(self.features.view(np.uint64), other.features.view(np.uint64))
                and np.array_equal(self.fine_labels, other.fine_labels))


@dataclass
class SynthSpec:
    """Parameters of the synthetic coarse⊃fine benchmark.

    Spreads are per-coordinate standard deviations: coarse centers ~ N(0, coarse_spread²·I), fine centers ~
    N(coarse center, fine_spread²·I), samples ~ N(fine center, noise_sigma²·I). The last `nuisance_dim` coordinates
    carry no class signal, only N(0, nuisance_sigma²) noise.

    With `fine_subspace_dim` > 0 the last `fine_subspace_dim` informative coordinates hold the fine offsets of every
    coarse class and the coarse centers sit on the remaining ones, so fine attributes are shared across coarse
    classes. `brightness_sigma` adds one N(0, brightness_sigma²) offset per sample to all of its coordinates.
    """
    num_coarse_classes: int = 13
    fine_per_coarse: int = 4
    samples_per_fine: int = 40
    input_dim: int = 32
    coarse_spread: float = 4.0
    fine_spread: float = 0.5
    noise_sigma: float = 0.2
    nuisance_dim: int = 0
    nuisance_sigma: float = 0.0
    fine_subspace_dim: int = 0
    brightness_sigma: float = 0.0
    seed: int = 0

    @property
    def informative_dim(self) -> int:
        return self.input_dim - self.nuisance_dim

    def validate(self) -> None:
        counts = {
            'num_coarse_classes': self.num_coarse_classes,
            'fine_per_coarse': self.fine_per_coarse,
            'samples_per_fine': self.samples_per_fine,
            'input_dim': self.input_dim,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise InvalidSpec(f'{name} must be a positive integer, got {value}')
        for name in ('coarse_spread', 'fine_spread', 'noise_sigma', 'nuisance_sigma', 'brightness_sigma'):
            if not getattr(self, name) >= 0:
                raise InvalidSpec(f'{name} must be nonnegative')
        if not self.fine_spread < self.coarse_spread:
            raise InvalidSpec('fine_spread must be smaller than coarse_spread')
        if not 0 <= self.nuisance_dim < self.input_dim:
            raise InvalidSpec('nuisance_dim must leave at least one informative coordinate')
        if not 0 <= self.fine_subspace_dim < self.informative_dim:
            raise InvalidSpec('fine_subspace_dim must leave at least one coordinate for the coarse centers')

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> 'SynthSpec':
        return SynthSpec(**d)
