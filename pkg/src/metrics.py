from dataclasses import asdict, dataclass
from typing import Optional, Sequence
import logging
import math

import numpy as np
from sklearn.metrics import adjusted_rand_score

from src.exceptions import EmptyInput, EmptyTrainSet, LengthMismatch, MetricsError
from src.numerics import l2_normalize, l2_normalize_rows

logger = logging.getLogger(__name__)

Z_95 = 1.96
KNN_WEIGHTS = ('cosine', 'exp')


@dataclass
class EvalReport:
    """Mean per-episode accuracy with its 95% normal-approximation confidence half-width."""
    mean_accuracy: float
    ci95: float
    episodes: int
    n_way: Optional[int] = None
    k_shot: Optional[int] = None
    q_query: Optional[int] = None
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> 'EvalReport':
        return EvalReport(**{key: d.get(key) for key in EvalReport.__dataclass_fields__})

    def format(self) -> str:
        """
        :return str: The accuracy in percent, e.g. '88.85 ± 0.54'
        """
        return f'{100.0 * self.mean_accuracy:.2f} ± {100.0 * self.ci95:.2f}'


def accuracy_ci(accuracies: Sequence[float], n_way: Optional[int] = None, k_shot: Optional[int] = None,
                q_query: Optional[int] = None, seed: Optional[int] = None) -> EvalReport:
    """
    Aggregates per-episode accuracies into mean ± 1.96 * s / sqrt(n), s with the n - 1 denominator

    :param Sequence[float] accuracies: One accuracy per episode
    :return EvalReport: The aggregate, echoing the episode shape when given
    """
    values = np.asarray(accuracies, dtype=np.float64).reshape(-1)
    n = values.size
    if n == 0:
        raise EmptyInput('accuracy_ci needs at least one episode')
    if np.all(values == values[0]):
        mean, std = float(values[0]), 0.0
    else:
        mean = math.fsum(values) / n
        std = math.sqrt(math.fsum((values - mean) ** 2) / (n - 1))
    return EvalReport(mean_accuracy=mean, ci95=Z_95 * std / math.sqrt(n), episodes=n, n_way=n_way,
                      k_shot=k_shot, q_query=q_query, seed=seed)


def _vote(similarities: np.ndarray, train_labels: np.ndarray, k: int, weight: str, knn_tau: float) -> int:
    m = similarities.size
    # descending similarity, ties to the lower training index
    nearest = np.lexsort((np.arange(m), -similarities))[:min(k, m)]
    if weight == 'cosine':
        votes = similarities[nearest]
    else:
        votes = np.exp(similarities[nearest] / knn_tau)
    labels, inverse = np.unique(train_labels[nearest], return_inverse=True)
    totals = np.bincount(inverse, weights=votes, minlength=labels.size)
    return int(labels[np.argmax(totals)])


def _check_knn_args(train_embeddings: np.ndarray, train_labels: np.ndarray, k: int, weight: str) -> None:
    if train_embeddings.ndim != 2 or train_embeddings.shape[0] == 0:
        raise EmptyTrainSet('weighted kNN needs a nonempty training set')
    if train_labels.shape != (train_embeddings.shape[0],):
        raise LengthMismatch('one label per training embedding is required')
    if k < 1:
        raise MetricsError(f'k must be at least 1, got {k}')
    if weight not in KNN_WEIGHTS:
        raise MetricsError(f'weight must be one of {KNN_WEIGHTS}, got {weight!r}')
    if k > train_embeddings.shape[0]:
        logger.debug('k=%d truncated to the %d training embeddings', k, train_embeddings.shape[0])


def weighted_knn_predict(train_embeddings: np.ndarray, train_labels: np.ndarray, query: np.ndarray, k: int = 200,
                         weight: str = 'cosine', knn_tau: float = 0.07) -> int:
    """
    Weighted vote of the k most cosine-similar training embeddings

    With weight='cosine' each neighbor votes with its raw cosine similarity (negative similarities vote
    negatively); with weight='exp' it votes with exp(similarity / knn_tau). The label with the largest total wins,
    ties going to the lowest label id.

    :param np.ndarray train_embeddings: M×D embeddings
    :param np.ndarray train_labels: M labels
    :param np.ndarray query: The length D embedding to classify
    :param int k: Number of neighbors, truncated to M
    :param str weight: 'cosine' or 'exp'
    :param float knn_tau: Temperature of the 'exp' weight
    :return int: The predicted label
    """
    train_embeddings = np.asarray(train_embeddings, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    _check_knn_args(train_embeddings, train_labels, k, weight)
    similarities = l2_normalize_rows(train_embeddings) @ l2_normalize(query)
    return _vote(similarities, train_labels, k, weight, knn_tau)


def knn_accuracy(train_embeddings: np.ndarray, train_labels: np.ndarray, query_embeddings: np.ndarray,
                 query_labels: np.ndarray, k: int = 200, weight: str = 'cosine', knn_tau: float = 0.07) -> float:
    """
    Fraction of queries whose weighted kNN prediction matches their label

    :return float: Accuracy in [0, 1]
    """
    train_embeddings = np.asarray(train_embeddings, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    query_labels = np.asarray(query_labels, dtype=np.int64)
    _check_knn_args(train_embeddings, train_labels, k, weight)
    if query_labels.size == 0:
        raise EmptyInput('knn_accuracy needs at least one query')
    similarities = l2_normalize_rows(np.asarray(query_embeddings, dtype=np.float64)) @ \
        l2_normalize_rows(train_embeddings).T
    hits = sum(
        _vote(row, train_labels, k, weight, knn_tau) == label
        for row, label in zip(similarities, query_labels)
    )
    return hits / query_labels.size


def adjusted_rand_index(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """
    Chance-corrected pair-counting agreement of two partitions

    :param Sequence[int] labels_a: One cluster id per item
    :param Sequence[int] labels_b: One cluster id per item
    :return float: ARI in [-1, 1], 1 for identical partitions up to renaming
    """
    labels_a = np.asarray(labels_a).reshape(-1)
    labels_b = np.asarray(labels_b).reshape(-1)
    if labels_a.size != labels_b.size:
        raise LengthMismatch(f'{labels_a.size} vs {labels_b.size} labels')
    if labels_a.size < 2:
        raise LengthMismatch('ARI needs at least two items')
    return float(adjusted_rand_score(labels_a, labels_b))
