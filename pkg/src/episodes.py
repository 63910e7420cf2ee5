from dataclasses import dataclass
from typing import Iterator, List, Mapping, Tuple, Union
import logging

import numpy as np

from src.exceptions import EpisodeError, InsufficientClasses, InsufficientSamples
from src.numerics import SeededRng

logger = logging.getLogger(__name__)

ClassSamples = Mapping[int, np.ndarray]


@dataclass
class Episode:
    """One N-way K-shot task with Q queries per class.

    Support and query arrays are ordered by episode label. `class_map[label]` is the source class behind an episode
    label; `support_index`/`query_index` hold (source class, row) pairs identifying every drawn sample.
    """
    n_way: int
    k_shot: int
    q_query: int
    support_x: np.ndarray
    support_labels: np.ndarray
    query_x: np.ndarray
    query_labels: np.ndarray
    class_map: List[int]
    support_index: List[Tuple[int, int]]
    query_index: List[Tuple[int, int]]


def _as_class_samples(source: Union[ClassSamples, object]) -> ClassSamples:
    if hasattr(source, 'class_samples'):
        return source.class_samples()
    return source


def eligible_classes(classes: ClassSamples, k_shot: int, q_query: int) -> List[int]:
    need = k_shot + q_query
    eligible = sorted(c for c, rows in classes.items() if len(rows) >= need)
    excluded = len(classes) - len(eligible)
    if excluded:
        logger.warning('%d class(es) with fewer than K+Q=%d samples excluded from episodes', excluded, need)
    return eligible


def _draw(classes: ClassSamples, eligible: List[int], n_way: int, k_shot: int, q_query: int,
          rng: SeededRng) -> Episode:
    chosen = [eligible[i] for i in rng.choice(len(eligible), n_way)]
    labels = rng.permutation(n_way)
    class_map = [0] * n_way
    for c, label in zip(chosen, labels):
        class_map[int(label)] = c

    need = k_shot + q_query
    picks = {c: rng.choice(len(classes[c]), need) for c in chosen}
    support_x, query_x, support_index, query_index = [], [], [], []
    for label, c in enumerate(class_map):
        rows = classes[c]
        pick = picks[c]
        support_x.append(rows[pick[:k_shot]])
        query_x.append(rows[pick[k_shot:]])
        support_index.extend((c, int(r)) for r in pick[:k_shot])
        query_index.extend((c, int(r)) for r in pick[k_shot:])
    return Episode(n_way=n_way, k_shot=k_shot, q_query=q_query,
                   support_x=np.concatenate(support_x),
                   support_labels=np.repeat(np.arange(n_way), k_shot),
                   query_x=np.concatenate(query_x),
                   query_labels=np.repeat(np.arange(n_way), q_query),
                   class_map=class_map, support_index=support_index, query_index=query_index)


def _check_shape(classes: ClassSamples, n_way: int, k_shot: int, q_query: int) -> List[int]:
    if min(n_way, k_shot, q_query) < 1:
        raise EpisodeError('N, K and Q must be positive')
    if len(classes) < n_way:
        raise InsufficientClasses(f'{n_way}-way episodes need {n_way} classes, only {len(classes)} available')
    eligible = eligible_classes(classes, k_shot, q_query)
    if len(eligible) < n_way:
        raise InsufficientSamples(f'only {len(eligible)} class(es) have K+Q={k_shot + q_query} samples, '
                                  f'{n_way} needed')
    return eligible


def sample_episode(classes: Union[ClassSamples, object], n_way: int, k_shot: int, q_query: int,
                   rng: SeededRng) -> Episode:
    """
    Draws one episode

    N distinct eligible classes are drawn uniformly, then K+Q distinct rows uniformly within each (the first K
    go to the support set); the episode labels are a uniform random permutation of 0..N-1 over the chosen classes.

    :param classes: class id -> sample rows, or any object with a `class_samples()` method
    :param int n_way: N
    :param int k_shot: K
    :param int q_query: Q
    :param SeededRng rng: The stream to draw from
    :return Episode: The episode
    """
    classes = _as_class_samples(classes)
    eligible = _check_shape(classes, n_way, k_shot, q_query)
    return _draw(classes, eligible, n_way, k_shot, q_query, rng)


class EpisodeSampler:
    """Iterable over `count` episodes drawn from one seeded stream."""
    def __init__(self, source: Union[ClassSamples, object], n_way: int, k_shot: int, q_query: int, count: int,
                 seed: int) -> None:
        self.classes = _as_class_samples(source)
        self.n_way = n_way
        self.k_shot = k_shot
        self.q_query = q_query
        self.count = count
        self.seed = seed
        self.eligible = _check_shape(self.classes, n_way, k_shot, q_query)

    def __iter__(self) -> Iterator[Episode]:
        rng = SeededRng(self.seed)
        for _ in range(self.count):
            yield _draw(self.classes, self.eligible, self.n_way, self.k_shot, self.q_query, rng)

    def __len__(self) -> int:
        return self.count


def episode_stream(source: Union[ClassSamples, object], n_way: int, k_shot: int, q_query: int, count: int,
                   seed: int) -> Iterator[Episode]:
    """
    :return Iterator[Episode]: `count` episodes from one generator seeded with `seed`
    """
    return iter(EpisodeSampler(source, n_way, k_shot, q_query, count, seed))
