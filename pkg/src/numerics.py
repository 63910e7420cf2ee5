from typing import Callable, Optional, Sequence, Union
import logging

import numpy as np
from scipy import special

from src.exceptions import DimensionMismatch, EmptyInput, NonFiniteFunction, ZeroNorm

logger = logging.getLogger(__name__)

EPS = 1e-12
FD_STEP = 1e-5


class SeededRng:
    """A single-owner random stream.

    Wraps a numpy `Generator` on the PCG64 bit generator, whose output stream is documented to be identical across
    platforms for a given seed. Hand it over, never share it: two owners drawing from one instance make both
    sequences depend on call interleaving.
    """
    def __init__(self, seed: int) -> None:
        """
        Constructor for SeededRng class

        :param int seed: A 64-bit unsigned seed
        """
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, salt: int) -> 'SeededRng':
        """
        Returns a fresh, independent stream seeded with `seed XOR salt`. Does not advance this stream.

        :param int salt: The value mixed into the seed (e.g. a coarse class id)
        :return SeededRng: The derived stream
        """
        return SeededRng(self.seed ^ (int(salt) & 0xFFFFFFFFFFFFFFFF))

    def normal(self, scale: float = 1.0, size=None) -> Union[float, np.ndarray]:
        return self.generator.normal(loc=0.0, scale=scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> Union[float, np.ndarray]:
        return self.generator.uniform(low=low, high=high, size=size)

    def integers(self, high: int) -> int:
        return int(self.generator.integers(0, high))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """Draws `size` distinct indices from range(n), uniformly and in random order."""
        return self.generator.choice(n, size=size, replace=False)


def as_vector(values: Union[Sequence[float], np.ndarray]) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(-1)


def l2_normalize(v: Union[Sequence[float], np.ndarray]) -> np.ndarray:
    """
    Scales a vector to unit Euclidean length

    :param v: The vector to normalize
    :return np.ndarray: The unit vector parallel to v
    """
    v = as_vector(v)
    norm = np.sqrt(np.dot(v, v))
    if not norm > EPS:
        raise ZeroNorm(f'cannot normalize a vector of norm {norm:.3e}')
    return v / norm


def l2_normalize_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise `l2_normalize` of a 2-D array."""
    norms = np.sqrt(np.einsum('ij,ij->i', a, a))
    if np.any(~(norms > EPS)):
        raise ZeroNorm(f'{int(np.sum(~(norms > EPS)))} row(s) with norm <= {EPS}')
    return a / norms[:, None]


def softmax(scores: Union[Sequence[float], np.ndarray], axis: Optional[int] = None) -> np.ndarray:
    """
    Softmax with max-subtraction

    :param scores: A nonempty array of finite scores
    :param Optional[int] axis: The axis to normalize over; None means the whole (1-D) input
    :return np.ndarray: Positive entries summing to 1 along `axis`
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInput('softmax of an empty score vector')
    return special.softmax(scores, axis=axis)


def log_softmax(scores: np.ndarray, axis: int = 0) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInput('log_softmax of an empty score array')
    return scores - special.logsumexp(scores, axis=axis, keepdims=True)


def gram(f: np.ndarray) -> np.ndarray:
    """
    Similarity matrix S = FᵀF of unit-norm columns

    `einsum` without path optimization runs its own fixed-order loops, so the result does not depend on BLAS
    threading.

    :param np.ndarray f: A D×M matrix whose columns are unit-norm embeddings
    :return np.ndarray: The symmetric M×M cosine similarity matrix
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionMismatch(f'gram expects a 2-D D×M matrix, got shape {f.shape}')
    s = np.einsum('dm,dn->mn', f, f, optimize=False)
    # exact symmetry
    return 0.5 * (s + s.T)


def check_gradient(f: Callable[[np.ndarray], float],
                   grad_f: Callable[[np.ndarray], np.ndarray],
                   point: Union[Sequence[float], np.ndarray],
                   h: float = FD_STEP) -> float:
    """
    Compares an analytic gradient against central finite differences

    :param Callable f: A scalar function of a parameter vector
    :param Callable grad_f: Its analytic gradient
    :param point: The parameter vector to check at
    :param float h: The finite difference step
    :return float: max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    point = as_vector(point).copy()
    analytic = as_vector(grad_f(point.copy()))
    if analytic.shape != point.shape:
        raise DimensionMismatch(f'gradient has {analytic.size} entries, point has {point.size}')
    worst = 0.0
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] = point[i] + h
        f_plus = float(f(shifted))
        shifted[i] = point[i] - h
        f_minus = float(f(shifted))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteFunction(f'f is not finite around coordinate {i}')
        numeric = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    logger.debug('gradient check over %d coordinates: max relative error %.3e', point.size, worst)
    return worst
