import math

import numpy as np
import pytest

import src.bde as bde
from src.bde import (AugmentConfig, BdeParams, JointLoss, SemanticLoss, TrainConfig, VisualLoss, augment,
                     augment_batch, class_probs, encode, holdout_split, instance_match_probs, joint_loss_on_views,
                     loss_joint, loss_semantic, loss_visual, one_hot, train_bde)
from src.dataset import CoarseDataset
from src.exceptions import (ConfigError, DimensionMismatch, DivergenceDetected, InvalidLabel, NonPositiveTemperature,
                            ZeroNorm)
from src.numerics import SeededRng, check_gradient, softmax
from tests.conftest import unit_columns


def _dot(a, b):
    return math.fsum(float(a[k]) * float(b[k]) for k in range(len(a)))


def visual_oracle(f, f_hat, tau):
    m = f.shape[1]
    total = 0.0
    for i in range(m):
        denom = math.fsum(math.exp(_dot(f[:, k], f_hat[:, i]) / tau) for k in range(m))
        total -= math.log(math.exp(_dot(f[:, i], f_hat[:, i]) / tau) / denom)
        for j in range(m):
            if j != i:
                denom_j = math.fsum(math.exp(_dot(f[:, k], f[:, j]) / tau) for k in range(m))
                total -= math.log(1.0 - math.exp(_dot(f[:, i], f[:, j]) / tau) / denom_j)
    return total


def semantic_oracle(w, f, f_hat, labels):
    total = 0.0
    for view in (f, f_hat):
        for i in range(view.shape[1]):
            scores = [_dot(w[:, c], view[:, i]) for c in range(w.shape[1])]
            log_denom = math.log(math.fsum(math.exp(s) for s in scores))
            total -= scores[int(labels[i])] - log_denom
    return total


# instance matching

def test_instance_match_single_instance():
    np.testing.assert_array_equal(instance_match_probs(np.array([[1.0], [0.0]]), np.array([0.0, 1.0]), 0.1), [1.0])


def test_instance_match_symmetric_is_uniform():
    f = np.array([[1.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    np.testing.assert_allclose(instance_match_probs(f, np.array([0.0, 0.0]), 0.1), [1 / 3] * 3)


def test_instance_match_closed_form():
    p = instance_match_probs(np.eye(2), np.array([1.0, 0.0]), 0.1)
    e = math.exp(-10.0)
    np.testing.assert_allclose(p, [1 / (1 + e), e / (1 + e)], rtol=1e-12)
    assert abs(p.sum() - 1.0) < 1e-9


def test_instance_match_errors():
    with pytest.raises(NonPositiveTemperature):
        instance_match_probs(np.eye(2), np.array([1.0, 0.0]), 0.0)
    with pytest.raises(DimensionMismatch):
        instance_match_probs(np.eye(2), np.array([1.0, 0.0, 0.0]), 0.1)


# visual discrimination

def test_loss_visual_single_instance_is_zero(rng):
    f = unit_columns(rng, 4, 1)
    assert loss_visual(f, unit_columns(rng, 4, 1), 0.1).value == pytest.approx(0.0, abs=1e-12)


def test_loss_visual_orthonormal_closed_form():
    result = loss_visual(np.eye(2), np.eye(2), 0.1)
    e10 = math.exp(10.0)
    expected = -2 * math.log(e10 / (e10 + 1)) - 2 * math.log(1 - 1 / (e10 + 1))
    assert result.value == pytest.approx(expected, rel=1e-12)
    assert result.value == pytest.approx(visual_oracle(np.eye(2), np.eye(2), 0.1), rel=1e-12)


def test_loss_visual_matches_scalar_oracle(rng):
    for _ in range(5):
        f, f_hat = unit_columns(rng, 5, 4), unit_columns(rng, 5, 4)
        result = loss_visual(f, f_hat, 0.1)
        assert result.value >= 0
        assert result.value == pytest.approx(visual_oracle(f, f_hat, 0.1), rel=1e-9)


def test_loss_visual_gradients(rng):
    for _ in range(20):
        d, m = 8, int(rng.integers(4)) + 2
        f, f_hat = unit_columns(rng, d, m), unit_columns(rng, d, m)
        size = d * m

        def value(v):
            return loss_visual(v[:size].reshape(d, m), v[size:].reshape(d, m), 0.1).value

        def grad(v):
            result = loss_visual(v[:size].reshape(d, m), v[size:].reshape(d, m), 0.1)
            return np.concatenate([result.grad_f.ravel(), result.grad_f_hat.ravel()])

        assert check_gradient(value, grad, np.concatenate([f.ravel(), f_hat.ravel()])) < 1e-4


def test_loss_visual_clamps_certain_probabilities():
    # P(0 | x_1) underflows to 1 when column 0 dominates column 1's own score
    f = np.array([[100.0, 1.0], [0.0, 0.0]])
    result = loss_visual(f, f, 0.01)
    assert result.clamp_events >= 1
    assert np.isfinite(result.value)
    assert result.value >= -math.log(bde.PROB_CLAMP) - 1e-6


def test_loss_visual_shape_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        loss_visual(unit_columns(rng, 3, 2), unit_columns(rng, 3, 3), 0.1)


# semantic discrimination

def test_class_probs_examples(rng):
    f = unit_columns(rng, 4, 1)[:, 0]
    np.testing.assert_array_equal(class_probs(rng.normal(size=(4, 1)), f), [1.0])
    np.testing.assert_allclose(class_probs(np.zeros((4, 3)), f), [1 / 3] * 3)
    w = rng.normal(size=(4, 5))
    np.testing.assert_allclose(class_probs(w, f), softmax(w.T @ f), rtol=1e-12)
    with pytest.raises(DimensionMismatch):
        class_probs(w, np.ones(3))


def test_loss_semantic_examples(rng):
    f, f_hat = unit_columns(rng, 4, 6), unit_columns(rng, 4, 6)
    labels = np.array([0, 1, 2, 0, 1, 2])
    assert loss_semantic(rng.normal(size=(4, 1)), f, f_hat, one_hot(np.zeros(6, dtype=int), 1)).value == \
        pytest.approx(0.0, abs=1e-12)
    assert loss_semantic(np.zeros((4, 3)), f, f_hat, one_hot(labels, 3)).value == \
        pytest.approx(2 * 6 * math.log(3), rel=1e-12)
    w = rng.normal(size=(4, 3))
    result = loss_semantic(w, f, f_hat, one_hot(labels, 3))
    assert result.value >= 0
    assert result.value == pytest.approx(semantic_oracle(w, f, f_hat, labels), rel=1e-9)


def test_loss_semantic_is_sum_of_two_cross_entropies(rng):
    f, f_hat = unit_columns(rng, 4, 5), unit_columns(rng, 4, 5)
    labels = np.array([0, 1, 1, 0, 1])
    w = rng.normal(size=(4, 2))
    y = one_hot(labels, 2)
    ce = sum(-math.log(class_probs(w, view[:, i])[labels[i]]) for view in (f, f_hat) for i in range(5))
    assert loss_semantic(w, f, f_hat, y).value == pytest.approx(ce, abs=1e-9)


def test_loss_semantic_gradients(rng):
    for _ in range(20):
        d, m, c = 4, 3, int(rng.integers(3)) + 2
        labels = one_hot(np.array([rng.integers(c) for _ in range(m)]), c)
        parts = [rng.normal(size=(d, c)), unit_columns(rng, d, m), unit_columns(rng, d, m)]
        sizes = np.cumsum([p.size for p in parts])

        def split(v):
            return v[:sizes[0]].reshape(d, c), v[sizes[0]:sizes[1]].reshape(d, m), v[sizes[1]:].reshape(d, m)

        def value(v):
            return loss_semantic(*split(v), labels).value

        def grad(v):
            result = loss_semantic(*split(v), labels)
            return np.concatenate([result.grad_w.ravel(), result.grad_f.ravel(), result.grad_f_hat.ravel()])

        assert check_gradient(value, grad, np.concatenate([p.ravel() for p in parts])) < 1e-4


def test_invalid_labels(rng):
    f = unit_columns(rng, 4, 2)
    with pytest.raises(InvalidLabel):
        loss_semantic(np.zeros((4, 2)), f, f, np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(InvalidLabel):
        one_hot(np.array([0, 2]), 2)


# joint loss

def _small_params(rng, m=1.0, n=10.0):
    return BdeParams.initialize(6, 2, rng, hidden_dim=5, embedding_dim=4, m=m, n=n)


def test_joint_loss_zero_coefficients(rng):
    params = _small_params(rng, m=0.0, n=0.0)
    x = rng.normal(size=(3, 6))
    result = joint_loss_on_views(params, x, x + 0.1, np.array([0, 1, 0]))
    assert result.value == 0.0
    assert all(np.all(g == 0) for g in result.grads.values())


def test_joint_loss_combines_stubbed_components(rng, monkeypatch):
    params = _small_params(rng)
    x = rng.normal(size=(3, 6))

    def fake_visual(f, f_hat, tau):
        return VisualLoss(value=2.0, grad_f=np.zeros_like(f), grad_f_hat=np.zeros_like(f_hat))

    def fake_semantic(w, f, f_hat, labels):
        return SemanticLoss(value=0.5, grad_w=np.zeros_like(w), grad_f=np.zeros_like(f),
                            grad_f_hat=np.zeros_like(f_hat))

    monkeypatch.setattr(bde, 'loss_visual', fake_visual)
    monkeypatch.setattr(bde, 'loss_semantic', fake_semantic)
    assert joint_loss_on_views(params, x, x, np.array([0, 1, 1])).value == pytest.approx(7.0)


def test_joint_loss_without_visual_term_is_pure_classification(rng):
    params = _small_params(rng, m=0.0, n=10.0)
    x = rng.normal(size=(4, 6))
    x_hat = augment_batch(x, AugmentConfig(), rng)
    labels = np.array([0, 1, 1, 0])
    result = joint_loss_on_views(params, x, x_hat, labels)
    f, f_hat = params.encoder.encode_batch(x).T, params.encoder.encode_batch(x_hat).T
    assert result.visual is None
    assert result.value == pytest.approx(10.0 * loss_semantic(params.classifier, f, f_hat,
                                                              one_hot(labels, 2)).value, rel=1e-12)


def test_joint_loss_end_to_end_gradients():
    for seed in range(20):
        rng = SeededRng(seed)
        params = _small_params(rng)
        x = rng.normal(size=(3, 6))
        x_hat = augment_batch(x, AugmentConfig(), rng)
        labels = np.array([0, 1, int(rng.integers(2))])

        def value(v):
            return joint_loss_on_views(params.with_vector(v), x, x_hat, labels).value

        def grad(v):
            p = params.with_vector(v)
            return p.flatten_grads(joint_loss_on_views(p, x, x_hat, labels).grads)

        assert check_gradient(value, grad, params.to_vector()) < 1e-4


def test_loss_joint_draws_augmentation_from_rng(rng):
    params = _small_params(rng)
    x = rng.normal(size=(3, 6))
    a = loss_joint(params, x, np.array([0, 1, 0]), AugmentConfig(), SeededRng(5))
    b = loss_joint(params, x, np.array([0, 1, 0]), AugmentConfig(), SeededRng(5))
    assert a.value == b.value


# encoder and augmentation

def test_encode_unit_norm_and_pure(rng):
    params = _small_params(rng)
    x = rng.normal(size=6)
    f = encode(params, x)
    assert f.shape == (4,)
    assert abs(np.dot(f, f) - 1.0) < 1e-9
    np.testing.assert_array_equal(encode(params, x), f)
    with pytest.raises(DimensionMismatch):
        encode(params, np.ones(5))


def test_encode_zero_activation(rng):
    params = _small_params(rng)
    params.encoder.weights[-1][...] = 0.0
    with pytest.raises(ZeroNorm):
        encode(params, np.ones(6))


def test_augment_identity_and_determinism(rng):
    x = rng.normal(size=8)
    np.testing.assert_array_equal(augment(x, AugmentConfig(0.0, 0.0, 0.0), rng), x)
    np.testing.assert_array_equal(augment(x, AugmentConfig(), SeededRng(3)), augment(x, AugmentConfig(), SeededRng(3)))


def test_augment_is_unbiased_on_kept_coordinates():
    x = np.array([1.0, -2.0, 0.5])
    draws = augment_batch(np.tile(x, (10_000, 1)), AugmentConfig(), SeededRng(11))
    for k in range(3):
        kept = draws[:, k] != 0
        diff = draws[kept, k] - x[k]
        assert abs(diff.mean()) < 4 * diff.std() / math.sqrt(kept.sum())
    dropped = np.mean(draws == 0)
    assert abs(dropped - 0.1) < 0.02


def test_shift_moves_every_coordinate_of_a_view_together():
    x = np.array([[1.0, -2.0, 0.5, 3.0], [0.0, 0.0, 0.0, 0.0]])
    shift = augment_batch(x, AugmentConfig(0.0, 0.0, 0.0, shift_sigma=1.0), SeededRng(2)) - x
    np.testing.assert_allclose(shift, np.repeat(shift[:, :1], 4, axis=1), atol=1e-12)
    assert shift[0, 0] != shift[1, 0]
    with pytest.raises(ConfigError):
        AugmentConfig(shift_sigma=-0.5).validate()


# training

def _four_samples():
    features = SeededRng(0).normal(size=(4, 3))
    return CoarseDataset(features, np.array([0, 0, 1, 1]), num_coarse_classes=2)


def test_zero_lr_keeps_initial_params():
    cfg = TrainConfig(epochs=1, batch_size=4, base_lr=0.0, lr_milestones=[], lr_factors=[], weight_decay=0.0,
                      hidden_dim=3, embedding_dim=2, seed=4)
    result = train_bde(_four_samples(), cfg, AugmentConfig())
    initial = BdeParams.initialize(3, 2, SeededRng(4).derive(1), hidden_dim=3, embedding_dim=2)
    np.testing.assert_array_equal(result.params.to_vector(), initial.to_vector())


def test_training_is_deterministic_and_reduces_loss(small_dataset):
    cfg = TrainConfig(epochs=20, batch_size=16, base_lr=0.1, lr_milestones=[], lr_factors=[], hidden_dim=16,
                      embedding_dim=8, seed=1)
    first = train_bde(small_dataset, cfg, AugmentConfig())
    second = train_bde(small_dataset, cfg, AugmentConfig())
    np.testing.assert_array_equal(first.params.to_vector(), second.params.to_vector())
    losses = [entry['loss'] for entry in first.loss_trace]
    assert len(losses) == 20 and all(np.isfinite(losses))
    assert losses[-1] < losses[0]
    f = first.params.encoder.encode_batch(small_dataset.features)
    np.testing.assert_allclose(np.einsum('ij,ij->i', f, f), 1.0, atol=1e-9)


def test_holdout_selection_returns_best_epoch(small_dataset):
    cfg = TrainConfig(epochs=4, batch_size=16, base_lr=0.1, lr_milestones=[], lr_factors=[], hidden_dim=8,
                      embedding_dim=4, holdout_fraction=0.25, knn_k=10)
    result = train_bde(small_dataset, cfg, AugmentConfig())
    accuracies = [entry['holdout_knn_accuracy'] for entry in result.loss_trace]
    assert result.holdout_accuracy == max(accuracies)
    assert result.best_epoch == accuracies.index(max(accuracies))


def test_ablation_switches_zero_the_coefficients(small_dataset):
    cfg = TrainConfig(epochs=1, batch_size=16, lr_milestones=[], lr_factors=[], hidden_dim=8, embedding_dim=4,
                      visual_on=False)
    assert train_bde(small_dataset, cfg, AugmentConfig()).params.m == 0.0
    cfg.visual_on, cfg.semantic_on = True, False
    assert train_bde(small_dataset, cfg, AugmentConfig()).params.n == 0.0


def test_divergence_is_detected(small_dataset, monkeypatch):
    def exploding(params, x, labels, aug, rng):
        return JointLoss(value=float('nan'), grads={name: np.zeros_like(a) for name, a in params.named_arrays()})

    monkeypatch.setattr(bde, 'loss_joint', exploding)
    cfg = TrainConfig(epochs=1, batch_size=16, lr_milestones=[], lr_factors=[], hidden_dim=8, embedding_dim=4)
    with pytest.raises(DivergenceDetected):
        train_bde(small_dataset, cfg, AugmentConfig())


def test_holdout_split_keeps_every_class(small_dataset):
    train, held = holdout_split(small_dataset, 0.2, SeededRng(0))
    assert len(set(train) & set(held)) == 0
    assert len(train) + len(held) == len(small_dataset)
    assert len(held) == 12
    assert set(small_dataset.coarse_labels[train]) == {0, 1}
