from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Union
import logging

import numpy as np
from tqdm import tqdm

from src.dataset import FineDataset
from src.encoder import EncoderParams
from src.episodes import Episode, episode_stream
from src.exceptions import ConfigError, DimensionMismatch, DivergenceDetected, EmptyClass
from src.measure_time import measure_time
from src.metrics import EvalReport, accuracy_ci
from src.numerics import SeededRng, log_softmax, softmax
from src.optimizer import SgdMomentum

logger = logging.getLogger(__name__)

MetaEncoderParams = EncoderParams
BatchEmbedding = Callable[[np.ndarray], np.ndarray]


@dataclass
class MetaTrainConfig:
    episodes_per_epoch: int = 100
    epochs: int = 20
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    warm_start: Optional[str] = None
    hidden_dim: int = 64
    embedding_dim: int = 32
    distance_scale: float = 1.0
    val_episodes: int = 200

    def validate(self) -> None:
        counts = (self.episodes_per_epoch, self.epochs, self.n_way, self.k_shot, self.q_query)
        if min(counts) < 1:
            raise ConfigError('episode counts, epochs, N, K and Q must be positive')
        if self.lr < 0:
            raise ConfigError('lr must be nonnegative')
        if not self.distance_scale > 0:
            raise ConfigError('distance_scale must be positive')

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpisodeLoss:
    value: float
    grads: Dict[str, np.ndarray]
    accuracy: float


@dataclass
class EmbeddingLoss:
    value: float
    grad_support: np.ndarray
    grad_query: np.ndarray
    probs: np.ndarray


@dataclass
class MetaTrainResult:
    params: MetaEncoderParams
    trace: List[dict]
    best_epoch: int
    val_accuracy: Optional[float] = None


def prototypes(support: np.ndarray, labels: np.ndarray, n_way: int) -> np.ndarray:
    """
    Class prototypes as plain means of the support embeddings (no re-normalization)

    :param np.ndarray support: n×D support embeddings
    :param np.ndarray labels: n episode labels in [0, N)
    :param int n_way: N
    :return np.ndarray: D×N matrix, column c is the prototype of class c
    """
    support = np.asarray(support, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if support.ndim != 2 or labels.shape != (support.shape[0],):
        raise DimensionMismatch('one label per support embedding is required')
    counts = np.bincount(labels, minlength=n_way)
    if counts.size > n_way or np.any(counts[:n_way] == 0):
        raise EmptyClass(f'every one of the {n_way} classes needs a support embedding')
    sums = np.zeros((n_way, support.shape[1]))
    np.add.at(sums, labels, support)
    return (sums / counts[:, None]).T


def _squared_distances(queries: np.ndarray, protos: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - protos.T[None, :, :]
    return np.einsum('qnd,qnd->qn', diff, diff)


def classify_query(f: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """
    :param np.ndarray f: A length D query embedding
    :param np.ndarray protos: D×N prototypes
    :return np.ndarray: softmax over -||f - p_n||², length N
    """
    f = np.asarray(f, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    if protos.ndim != 2 or f.shape != (protos.shape[0],):
        raise DimensionMismatch(f'query {f.shape} against prototypes {protos.shape}')
    return softmax(-_squared_distances(f[None, :], protos)[0])


def episode_loss_from_embeddings(support: np.ndarray, support_labels: np.ndarray, query: np.ndarray,
                                 query_labels: np.ndarray, n_way: int,
                                 distance_scale: float = 1.0) -> EmbeddingLoss:
    """
    Mean query cross-entropy of the prototype classifier, with gradients w.r.t. every embedding

    :param np.ndarray support: n_s×D support embeddings
    :param np.ndarray support_labels: Their episode labels
    :param np.ndarray query: n_q×D query embeddings
    :param np.ndarray query_labels: Their episode labels
    :param int n_way: N
    :param float distance_scale: Multiplier on the negative squared distances
    :return EmbeddingLoss: Value, gradients and query probabilities
    """
    query = np.asarray(query, dtype=np.float64)
    query_labels = np.asarray(query_labels, dtype=np.int64)
    support_labels = np.asarray(support_labels, dtype=np.int64)
    protos = prototypes(support, support_labels, n_way)
    if query.ndim != 2 or query.shape[1] != protos.shape[0]:
        raise DimensionMismatch(f'queries {query.shape} against {protos.shape[0]}-dim prototypes')
    n_q = query.shape[0]

    diff = query[:, None, :] - protos.T[None, :, :]
    log_p = log_softmax(-distance_scale * np.einsum('qnd,qnd->qn', diff, diff), axis=1)
    value = -float(np.mean(log_p[np.arange(n_q), query_labels]))

    probs = np.exp(log_p)
    d_logits = probs.copy()
    d_logits[np.arange(n_q), query_labels] -= 1.0
    d_logits /= n_q
    # logits = -s * |q - p|²
    grad_query = -2.0 * distance_scale * np.einsum('qn,qnd->qd', d_logits, diff)
    grad_protos = 2.0 * distance_scale * np.einsum('qn,qnd->nd', d_logits, diff)
    counts = np.bincount(support_labels, minlength=n_way)
    grad_support = grad_protos[support_labels] / counts[support_labels][:, None]
    return EmbeddingLoss(value=value, grad_support=grad_support, grad_query=grad_query, probs=probs)


def episode_loss(params: MetaEncoderParams, episode: Episode, distance_scale: float = 1.0) -> EpisodeLoss:
    """
    Prototypical-network loss of one episode, backpropagated through the encoder

    :param MetaEncoderParams params: The encoder
    :param Episode episode: The task
    :param float distance_scale: Multiplier on the negative squared distances
    :return EpisodeLoss: Value, gradient keyed like `params.named_arrays()` and query accuracy
    """
    n_support = episode.support_x.shape[0]
    embeddings, cache = params.forward(np.concatenate([episode.support_x, episode.query_x]))
    result = episode_loss_from_embeddings(embeddings[:n_support], episode.support_labels,
                                          embeddings[n_support:], episode.query_labels, episode.n_way,
                                          distance_scale)
    grads = params.backward(cache, np.concatenate([result.grad_support, result.grad_query]))
    accuracy = float(np.mean(np.argmax(result.probs, axis=1) == episode.query_labels))
    return EpisodeLoss(value=result.value, grads=grads, accuracy=accuracy)


def _embedder(params: Union[MetaEncoderParams, BatchEmbedding]) -> BatchEmbedding:
    if hasattr(params, 'encode_batch'):
        return params.encode_batch
    return params


def episode_accuracy(embed: BatchEmbedding, episode: Episode) -> float:
    protos = prototypes(embed(episode.support_x), episode.support_labels, episode.n_way)
    # argmax of -d², ties to the lowest episode label
    predictions = np.argmax(-_squared_distances(embed(episode.query_x), protos), axis=1)
    return float(np.mean(predictions == episode.query_labels))


@measure_time
def meta_eval(params: Union[MetaEncoderParams, BatchEmbedding], fine_dataset: FineDataset, n_way: int, k_shot: int,
              q_query: int, count: int = 1000, seed: int = 0, verbose: bool = False) -> EvalReport:
    """
    Mean episode accuracy of nearest-prototype classification with its 95% confidence interval

    :param params: An encoder, or any function mapping a b×D_in batch to b embeddings
    :param FineDataset fine_dataset: The fine-labeled evaluation split
    :param int n_way: N
    :param int k_shot: K
    :param int q_query: Q
    :param int count: Number of episodes
    :param int seed: Seed of the episode stream
    :param bool verbose: Show a progress bar
    :return EvalReport: The aggregate
    """
    embed = _embedder(params)
    stream = episode_stream(fine_dataset, n_way, k_shot, q_query, count, seed)
    accuracies = [episode_accuracy(embed, episode)
                  for episode in tqdm(stream, total=count, desc=f'eval {k_shot}-shot', disable=not verbose)]
    report = accuracy_ci(accuracies, n_way=n_way, k_shot=k_shot, q_query=q_query, seed=seed)
    logger.info('%d-way %d-shot over %d episodes: %s', n_way, k_shot, count, report.format())
    return report


@measure_time
def meta_train(source, cfg: MetaTrainConfig, val: Optional[FineDataset] = None,
               init: Optional[MetaEncoderParams] = None, verbose: bool = False) -> MetaTrainResult:
    """
    Episodic SGD + momentum training of a prototypical-network encoder

    Episodes come from one stream seeded by the config; each episode is one optimizer step. When a fine-labeled
    validation split is given, every epoch is scored on `val_episodes` validation episodes and the best-scoring
    parameters are returned (earlier epoch on ties).

    :param source: Episode classes: a PseudoDataset, a CoarseDataset or a class id -> rows mapping
    :param MetaTrainConfig cfg: Hyperparameters
    :param Optional[FineDataset] val: Fine-labeled split for model selection
    :param Optional[MetaEncoderParams] init: Warm-start encoder, copied before training
    :param bool verbose: Show a progress bar
    :return MetaTrainResult: The parameters and the per-epoch trace
    """
    cfg.validate()
    rng = SeededRng(cfg.seed)
    stream = episode_stream(source, cfg.n_way, cfg.k_shot, cfg.q_query, cfg.epochs * cfg.episodes_per_epoch,
                            rng.derive(2).seed)
    first = next(stream)
    input_dim = first.support_x.shape[1]
    if init is not None:
        if init.input_dim != input_dim:
            raise DimensionMismatch(f'warm start expects width {init.input_dim}, episodes have {input_dim}')
        params = init.copy()
    else:
        params = EncoderParams.initialize(input_dim, cfg.hidden_dim, cfg.embedding_dim, rng.derive(1))
    optimizer = SgdMomentum(params.named_arrays(), momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    def episodes():
        yield first
        yield from stream

    trace = []
    best_params, best_epoch, best_accuracy = None, cfg.epochs - 1, None
    it = episodes()
    for epoch in tqdm(range(cfg.epochs), desc='meta', disable=not verbose):
        losses, accuracies = [], []
        for _ in range(cfg.episodes_per_epoch):
            result = episode_loss(params, next(it), cfg.distance_scale)
            if not (np.isfinite(result.value) and all(np.all(np.isfinite(g)) for g in result.grads.values())):
                raise DivergenceDetected(f'non-finite episode loss at epoch {epoch}: {result.value!r}')
            optimizer.step(result.grads, cfg.lr)
            losses.append(result.value)
            accuracies.append(result.accuracy)
        entry = {'epoch': epoch, 'loss': float(np.mean(losses)), 'train_accuracy': float(np.mean(accuracies))}
        if val is not None:
            report = meta_eval(params, val, cfg.n_way, cfg.k_shot, cfg.q_query, cfg.val_episodes,
                               seed=rng.derive(3).seed)
            entry['val_accuracy'] = report.mean_accuracy
            if best_accuracy is None or report.mean_accuracy > best_accuracy:
                best_params, best_epoch, best_accuracy = params.copy(), epoch, report.mean_accuracy
        logger.debug('meta epoch %d loss=%.4f acc=%.4f', epoch, entry['loss'], entry['train_accuracy'])
        trace.append(entry)

    return MetaTrainResult(params=best_params if best_params is not None else params, trace=trace,
                           best_epoch=best_epoch, val_accuracy=best_accuracy)
