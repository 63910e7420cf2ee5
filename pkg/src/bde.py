from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np
from tqdm import tqdm

from src.dataset import CoarseDataset
from src.encoder import EncoderParams
from src.exceptions import (ConfigError, DimensionMismatch, DivergenceDetected, EmptyInput, InvalidLabel,
                            NonPositiveTemperature)
from src.measure_time import measure_time
from src.metrics import knn_accuracy
from src.numerics import SeededRng, log_softmax, softmax
from src.optimizer import LrSchedule, SgdMomentum

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class AugmentConfig:
    """Vector-space augmentation: additive Gaussian noise, coordinate dropout, then a global scale jitter.

    `shift_sigma` adds one N(0, shift_sigma²) offset to every coordinate of a view, the vector analog of a
    brightness jitter.
    """
    noise_sigma: float = 0.1
    dropout_prob: float = 0.1
    scale_jitter: float = 0.05
    shift_sigma: float = 0.0

    def validate(self) -> None:
        if self.noise_sigma < 0 or self.scale_jitter < 0 or self.shift_sigma < 0:
            raise ConfigError('noise_sigma, scale_jitter and shift_sigma must be nonnegative')
        if not 0 <= self.dropout_prob < 1:
            raise ConfigError('dropout_prob must lie in [0, 1)')


@dataclass
class TrainConfig:
    """Optimization and model hyperparameters of BDE learning.

    Schedule defaults follow the full-scale recipe: 200 epochs of batches of 128, lr 0.3 cut to 0.3*0.1 at epoch
    120 and 0.3*0.01 at epoch 160, momentum 0.9, weight decay 5e-4.
    """
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.3
    lr_milestones: List[int] = field(default_factory=lambda: [120, 160])
    lr_factors: List[float] = field(default_factory=lambda: [0.1, 0.01])
    lr_mode: str = 'factor'
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hidden_dim: int = 64
    embedding_dim: int = 32
    tau: float = 0.1
    m: float = 1.0
    n: float = 10.0
    visual_on: bool = True
    semantic_on: bool = True
    holdout_fraction: float = 0.0
    select_every: int = 1
    knn_k: int = 200
    knn_weight: str = 'cosine'

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError('epochs and batch_size must be positive')
        if any(m >= self.epochs for m in self.lr_milestones):
            raise ConfigError('lr milestones must be smaller than epochs')
        if self.tau <= 0:
            raise NonPositiveTemperature('tau must be positive')
        if self.m < 0 or self.n < 0:
            raise ConfigError('trade-off parameters m and n must be nonnegative')
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError('holdout_fraction must lie in [0, 1)')
        if self.select_every < 1:
            raise ConfigError('select_every must be positive')
        self.schedule()

    def schedule(self) -> LrSchedule:
        return LrSchedule(base_lr=self.base_lr, milestones=self.lr_milestones, factors=self.lr_factors,
                          mode=self.lr_mode)

    def to_dict(self) -> dict:
        return asdict(self)


class BdeParams:
    """Encoder weights plus the auxiliary bias-free linear classifier W (D×C) and the loss constants τ, m, n."""
    def __init__(self, encoder: EncoderParams, classifier: np.ndarray, tau: float = 0.1, m: float = 1.0,
                 n: float = 10.0) -> None:
        classifier = np.asarray(classifier, dtype=np.float64)
        if classifier.ndim != 2 or classifier.shape[0] != encoder.output_dim:
            raise DimensionMismatch(f'classifier must be {encoder.output_dim}×C, got {classifier.shape}')
        if not tau > 0:
            raise NonPositiveTemperature(f'tau must be positive, got {tau}')
        self.encoder = encoder
        self.classifier = classifier
        self.tau = float(tau)
        self.m = float(m)
        self.n = float(n)

    @staticmethod
    def initialize(input_dim: int, num_classes: int, rng: SeededRng, hidden_dim: int = 64,
                   embedding_dim: int = 32, tau: float = 0.1, m: float = 1.0, n: float = 10.0) -> 'BdeParams':
        encoder = EncoderParams.initialize(input_dim, hidden_dim, embedding_dim, rng)
        classifier = rng.normal(scale=0.01, size=(embedding_dim, num_classes))
        return BdeParams(encoder, classifier, tau=tau, m=m, n=n)

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[1]

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        named = [(f'encoder.{name}', a) for name, a in self.encoder.named_arrays()]
        named.append(('classifier.W', self.classifier))
        return named

    def copy(self) -> 'BdeParams':
        return BdeParams(self.encoder.copy(), self.classifier.copy(), tau=self.tau, m=self.m, n=self.n)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])

    def with_vector(self, vector: np.ndarray) -> 'BdeParams':
        """Returns a copy whose arrays are filled from a flat vector laid out like `to_vector`."""
        params = self.copy()
        offset = 0
        for _, a in params.named_arrays():
            a[...] = np.reshape(vector[offset:offset + a.size], a.shape)
            offset += a.size
        if offset != len(vector):
            raise DimensionMismatch(f'vector has {len(vector)} entries, parameters need {offset}')
        return params

    def flatten_grads(self, grads: Dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[name].ravel() for name, _ in self.named_arrays()])


@dataclass
class VisualLoss:
    value: float
    grad_f: np.ndarray
    grad_f_hat: np.ndarray
    clamp_events: int = 0


@dataclass
class SemanticLoss:
    value: float
    grad_w: np.ndarray
    grad_f: np.ndarray
    grad_f_hat: np.ndarray


@dataclass
class JointLoss:
    value: float
    grads: Dict[str, np.ndarray]
    visual: Optional[float] = None
    semantic: Optional[float] = None
    clamp_events: int = 0


@dataclass
class BdeTrainResult:
    params: BdeParams
    loss_trace: List[dict]
    best_epoch: int
    clamp_events: int
    holdout_accuracy: Optional[float] = None


def encode(params: BdeParams, x: np.ndarray) -> np.ndarray:
    """
    Maps one input vector to its unit-norm embedding

    :param BdeParams params: The trained or fresh parameters
    :param np.ndarray x: A length D_in vector
    :return np.ndarray: The length D embedding
    """
    return params.encoder.encode(x)


def augment(x: np.ndarray, cfg: AugmentConfig, rng: SeededRng) -> np.ndarray:
    """
    Draws one augmented view x̂ = scale * (x + noise + shift) with coordinates zeroed at rate dropout_prob

    :param np.ndarray x: The input vector
    :param AugmentConfig cfg: The augmentation strengths; all zeros gives back x
    :param SeededRng rng: The stream the draws come from
    :return np.ndarray: The augmented vector
    """
    x = np.asarray(x, dtype=np.float64)
    return augment_batch(x[None, :], cfg, rng)[0]


def augment_batch(x: np.ndarray, cfg: AugmentConfig, rng: SeededRng) -> np.ndarray:
    x_hat = np.array(x, dtype=np.float64, copy=True)
    if cfg.noise_sigma > 0:
        x_hat = x_hat + rng.normal(scale=cfg.noise_sigma, size=x_hat.shape)
    if cfg.shift_sigma > 0:
        x_hat = x_hat + rng.normal(scale=cfg.shift_sigma, size=(x_hat.shape[0], 1))
    if cfg.dropout_prob > 0:
        x_hat = x_hat * (rng.uniform(size=x_hat.shape) >= cfg.dropout_prob)
    if cfg.scale_jitter > 0:
        x_hat = x_hat * rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter, size=(x_hat.shape[0], 1))
    return x_hat


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise NonPositiveTemperature(f'tau must be positive, got {tau}')


def _as_columns(f: np.ndarray, name: str) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionMismatch(f'{name} must be a D×m matrix, got shape {f.shape}')
    return f


def instance_match_probs(f: np.ndarray, f_query: np.ndarray, tau: float) -> np.ndarray:
    """
    Softmax matching of a query embedding against m instances, P(i | query) ∝ exp(f_iᵀ query / τ)

    :param np.ndarray f: D×m instance embeddings, one per column
    :param np.ndarray f_query: The length D query embedding
    :param float tau: The temperature
    :return np.ndarray: A length m probability vector
    """
    _check_tau(tau)
    f = _as_columns(f, 'F')
    f_query = np.asarray(f_query, dtype=np.float64)
    if f_query.shape != (f.shape[0],):
        raise DimensionMismatch(f'query of shape {f_query.shape} against {f.shape[0]}-dim instances')
    return softmax(f.T @ f_query / tau)


def loss_visual(f: np.ndarray, f_hat: np.ndarray, tau: float) -> VisualLoss:
    """
    Instance-wise discrimination loss over a batch

    L_D = -sum_i log P(i | x̂_i) - sum_i sum_{j != i} log(1 - P(i | x_j)), where P(i | x̂_i) matches the augmented
    view of i against all originals and P(i | x_j) matches original j against all originals. 1 - P is clamped at
    1e-12; clamped terms contribute no gradient and are counted in `clamp_events`.

    :param np.ndarray f: D×m embeddings of the original samples
    :param np.ndarray f_hat: D×m embeddings of their augmentations
    :param float tau: The temperature
    :return VisualLoss: The value and the gradients w.r.t. f and f_hat
    """
    _check_tau(tau)
    f = _as_columns(f, 'F')
    f_hat = _as_columns(f_hat, 'F_hat')
    if f.shape != f_hat.shape:
        raise DimensionMismatch(f'F is {f.shape} but F_hat is {f_hat.shape}')
    m = f.shape[1]
    eye = np.eye(m)

    # a[k, i] = f_kᵀ f̂_i / τ, column i is the matching of augmented sample i
    a = f.T @ f_hat / tau
    log_p1 = log_softmax(a, axis=0)
    value = -float(np.trace(log_p1))
    d_a = np.exp(log_p1) - eye
    grad_f = f_hat @ d_a.T / tau
    grad_f_hat = f @ d_a / tau

    # p2[i, j] = P(i | x_j)
    b = f.T @ f / tau
    p2 = softmax(b, axis=0)
    off = eye == 0
    q = 1.0 - p2
    clamped = off & (q <= PROB_CLAMP)
    clamp_events = int(np.sum(clamped))
    if clamp_events:
        logger.warning('log(1 - P) clamped at %g for %d pair(s)', PROB_CLAMP, clamp_events)
    q = np.where(clamped, PROB_CLAMP, np.where(off, q, 1.0))
    value -= float(np.sum(np.log(q[off])))
    g = np.where(off & ~clamped, 1.0 / q, 0.0)
    d_b = p2 * (g - np.sum(g * p2, axis=0, keepdims=True))
    grad_f = grad_f + f @ (d_b + d_b.T) / tau

    return VisualLoss(value=value, grad_f=grad_f, grad_f_hat=grad_f_hat, clamp_events=clamp_events)


def class_probs(w: np.ndarray, f: np.ndarray) -> np.ndarray:
    """
    Untempered softmax of the auxiliary classifier, P(c | x) ∝ exp(W_cᵀ f)

    :param np.ndarray w: D×C classifier
    :param np.ndarray f: A length D embedding
    :return np.ndarray: A length C probability vector
    """
    w = _as_columns(w, 'W')
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (w.shape[0],):
        raise DimensionMismatch(f'embedding of shape {f.shape} against a {w.shape[0]}-row classifier')
    return softmax(w.T @ f)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= num_classes)):
        raise InvalidLabel(f'labels must be a vector of ids in [0, {num_classes})')
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


def loss_semantic(w: np.ndarray, f: np.ndarray, f_hat: np.ndarray, labels: np.ndarray) -> SemanticLoss:
    """
    Coarse classification loss on both views: L_C = -sum_i sum_j y_ij log[P(j | x_i) P(j | x̂_i)]

    :param np.ndarray w: D×C classifier
    :param np.ndarray f: D×m original embeddings
    :param np.ndarray f_hat: D×m augmented embeddings
    :param np.ndarray labels: m×C one-hot rows
    :return SemanticLoss: The value and the gradients w.r.t. W, f and f_hat
    """
    w = _as_columns(w, 'W')
    f = _as_columns(f, 'F')
    f_hat = _as_columns(f_hat, 'F_hat')
    labels = np.asarray(labels, dtype=np.float64)
    if f.shape != f_hat.shape or f.shape[0] != w.shape[0]:
        raise DimensionMismatch(f'W {w.shape}, F {f.shape} and F_hat {f_hat.shape} do not fit')
    if labels.shape != (f.shape[1], w.shape[1]):
        raise DimensionMismatch(f'labels must be {f.shape[1]}×{w.shape[1]}, got {labels.shape}')
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise InvalidLabel('every label row must be one-hot')

    value = 0.0
    grad_w = np.zeros_like(w)
    grads = []
    for view in (f, f_hat):
        log_p = log_softmax(w.T @ view, axis=0)
        value -= float(np.sum(labels.T * log_p))
        d_z = np.exp(log_p) - labels.T
        grad_w += view @ d_z.T
        grads.append(w @ d_z)
    return SemanticLoss(value=value, grad_w=grad_w, grad_f=grads[0], grad_f_hat=grads[1])


def joint_loss_on_views(params: BdeParams, x: np.ndarray, x_hat: np.ndarray, labels: np.ndarray) -> JointLoss:
    """
    L = m * L_D + n * L_C for a batch whose augmented views are already drawn

    Both views go through the same encoder weights; the gradient sums the two backward passes. A zero trade-off
    coefficient skips its term entirely.

    :param BdeParams params: The parameters to evaluate
    :param np.ndarray x: b×D_in original inputs
    :param np.ndarray x_hat: b×D_in augmented inputs
    :param np.ndarray labels: b coarse ids
    :return JointLoss: The value and the full gradient keyed like `params.named_arrays()`
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput('loss_joint needs a nonempty b×D_in batch')
    y = one_hot(labels, params.num_classes)
    f_rows, cache = params.encoder.forward(x)
    f_hat_rows, cache_hat = params.encoder.forward(x_hat)

    value = 0.0
    grad_f = np.zeros_like(f_rows)
    grad_f_hat = np.zeros_like(f_hat_rows)
    grad_w = np.zeros_like(params.classifier)
    visual_value = semantic_value = None
    clamp_events = 0
    if params.m != 0:
        visual = loss_visual(f_rows.T, f_hat_rows.T, params.tau)
        visual_value = visual.value
        clamp_events = visual.clamp_events
        value += params.m * visual.value
        grad_f += params.m * visual.grad_f.T
        grad_f_hat += params.m * visual.grad_f_hat.T
    if params.n != 0:
        semantic = loss_semantic(params.classifier, f_rows.T, f_hat_rows.T, y)
        semantic_value = semantic.value
        value += params.n * semantic.value
        grad_f += params.n * semantic.grad_f.T
        grad_f_hat += params.n * semantic.grad_f_hat.T
        grad_w += params.n * semantic.grad_w

    enc = params.encoder.backward(cache, grad_f)
    enc_hat = params.encoder.backward(cache_hat, grad_f_hat)
    grads = {f'encoder.{name}': enc[name] + enc_hat[name] for name in enc}
    grads['classifier.W'] = grad_w
    return JointLoss(value=value, grads=grads, visual=visual_value, semantic=semantic_value,
                     clamp_events=clamp_events)


def loss_joint(params: BdeParams, x: np.ndarray, labels: np.ndarray, aug: AugmentConfig,
               rng: SeededRng) -> JointLoss:
    """
    Augments a batch and evaluates the joint loss on the (original, augmented) pair

    :param BdeParams params: The parameters to evaluate
    :param np.ndarray x: b×D_in inputs
    :param np.ndarray labels: b coarse ids
    :param AugmentConfig aug: The augmentation strengths
    :param SeededRng rng: The augmentation stream
    :return JointLoss: The value and the full gradient
    """
    x = np.asarray(x, dtype=np.float64)
    return joint_loss_on_views(params, x, augment_batch(x, aug, rng), labels)


def holdout_split(dataset: CoarseDataset, fraction: float, rng: SeededRng) -> Tuple[np.ndarray, np.ndarray]:
    """
    Holds out `fraction` of every coarse class, keeping at least one training sample per class

    :return Tuple[np.ndarray, np.ndarray]: ascending train indices and ascending held-out indices
    """
    train, held = [], []
    for c, idx in dataset.class_indices().items():
        n_held = min(int(round(fraction * idx.size)), idx.size - 1)
        order = idx[rng.permutation(idx.size)]
        held.append(order[:n_held])
        train.append(order[n_held:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


@measure_time
def train_bde(dataset: CoarseDataset, cfg: TrainConfig, aug: AugmentConfig, verbose: bool = False) -> BdeTrainResult:
    """
    Trains the embedding with SGD + momentum on the batch-mean of the joint loss

    With `holdout_fraction > 0` the held-out share of every coarse class scores the embedding by weighted kNN on
    coarse labels every `select_every` epochs, and the best-scoring parameters are returned instead of the last.

    :param CoarseDataset dataset: The coarse-labeled training split
    :param TrainConfig cfg: Optimization and model hyperparameters
    :param AugmentConfig aug: Augmentation strengths
    :param bool verbose: Show a progress bar
    :return BdeTrainResult: The parameters, the per-epoch trace and the selection outcome
    """
    if len(dataset) == 0:
        raise EmptyInput('cannot train on an empty dataset')
    cfg.validate()
    aug.validate()
    schedule = cfg.schedule()
    rng = SeededRng(cfg.seed)
    init_rng, shuffle_rng, aug_rng, holdout_rng = rng.derive(1), rng.derive(2), rng.derive(3), rng.derive(4)

    params = BdeParams.initialize(dataset.input_dim, dataset.num_coarse_classes, init_rng,
                                  hidden_dim=cfg.hidden_dim, embedding_dim=cfg.embedding_dim, tau=cfg.tau,
                                  m=cfg.m if cfg.visual_on else 0.0, n=cfg.n if cfg.semantic_on else 0.0)
    optimizer = SgdMomentum(params.named_arrays(), momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    if cfg.holdout_fraction > 0:
        train_idx, held_idx = holdout_split(dataset, cfg.holdout_fraction, holdout_rng)
    else:
        train_idx, held_idx = np.arange(len(dataset)), np.zeros(0, dtype=np.int64)
    x_all, y_all = dataset.features, dataset.coarse_labels
    logger.info('BDE training on %d samples (%d held out), m=%g n=%g tau=%g', train_idx.size, held_idx.size,
                params.m, params.n, params.tau)

    trace = []
    total_clamps = 0
    best_params, best_epoch, best_accuracy = None, cfg.epochs - 1, None
    for epoch in tqdm(range(cfg.epochs), desc='bde', disable=not verbose):
        lr = schedule.lr_at(epoch)
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        epoch_loss, epoch_clamps = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            result = loss_joint(params, x_all[batch], y_all[batch], aug, aug_rng)
            scale = 1.0 / batch.size
            grads = {name: g * scale for name, g in result.grads.items()}
            if not (np.isfinite(result.value) and all(np.all(np.isfinite(g)) for g in grads.values())):
                raise DivergenceDetected(f'non-finite loss/gradient at epoch {epoch}, batch offset {start}, '
                                         f'lr={lr:g}, loss={result.value!r}')
            optimizer.step(grads, lr)
            epoch_loss += result.value
            epoch_clamps += result.clamp_events
        total_clamps += epoch_clamps
        entry = {'epoch': epoch, 'lr': lr, 'loss': epoch_loss / order.size, 'clamp_events': epoch_clamps}

        if held_idx.size and ((epoch + 1) % cfg.select_every == 0 or epoch == cfg.epochs - 1):
            accuracy = knn_accuracy(params.encoder.encode_batch(x_all[train_idx]), y_all[train_idx],
                                    params.encoder.encode_batch(x_all[held_idx]), y_all[held_idx],
                                    k=cfg.knn_k, weight=cfg.knn_weight)
            entry['holdout_knn_accuracy'] = accuracy
            if best_accuracy is None or accuracy > best_accuracy:
                best_params, best_epoch, best_accuracy = params.copy(), epoch, accuracy
        logger.debug('bde epoch %d lr=%g loss=%.6f', epoch, lr, entry['loss'])
        trace.append(entry)

    if best_params is None:
        best_params = params
    if total_clamps:
        logger.warning('%d clamp event(s) in log(1 - P) during training', total_clamps)
    logger.info('BDE done: final loss %.6f, selected epoch %d', trace[-1]['loss'], best_epoch)
    return BdeTrainResult(params=best_params, loss_trace=trace, best_epoch=best_epoch, clamp_events=total_clamps,
                          holdout_accuracy=best_accuracy)
