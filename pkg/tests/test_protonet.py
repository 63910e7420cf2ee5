import math

import numpy as np
import pytest

import src.protonet as protonet
from src.dataset import FineDataset
from src.encoder import EncoderParams
from src.episodes import episode_stream, sample_episode
from src.exceptions import ConfigError, DimensionMismatch, DivergenceDetected, EmptyClass
from src.protonet import (EpisodeLoss, MetaTrainConfig, classify_query, episode_accuracy, episode_loss,
                          episode_loss_from_embeddings, meta_eval, meta_train, prototypes)
from src.numerics import SeededRng, check_gradient, softmax


def _with_flat(params, vector):
    out = params.copy()
    offset = 0
    for _, a in out.named_arrays():
        a[...] = vector[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    return out


def _flat(params):
    return np.concatenate([a.ravel() for _, a in params.named_arrays()])


def _separated_fine(num_classes=6, per_class=8, dim=8, seed=0):
    rng = SeededRng(seed)
    centers = 10.0 * np.eye(dim)[:num_classes]
    labels = np.repeat(np.arange(num_classes), per_class)
    features = centers[labels] + rng.normal(scale=0.01, size=(labels.size, dim))
    return FineDataset(features, labels, num_fine_classes=num_classes, seed=seed, split='test')


# prototypes

def test_prototype_examples():
    np.testing.assert_array_equal(prototypes(np.array([[0.3, 0.4]]), np.array([0]), 1), [[0.3], [0.4]])
    np.testing.assert_array_equal(prototypes(np.array([[0.6, 0.8], [0.6, 0.8]]), np.array([0, 0]), 1),
                                  [[0.6], [0.8]])
    np.testing.assert_allclose(prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]), 1), [[0.5], [0.5]])


def test_prototype_errors():
    with pytest.raises(EmptyClass):
        prototypes(np.ones((2, 3)), np.array([0, 0]), 2)
    with pytest.raises(DimensionMismatch):
        prototypes(np.ones((2, 3)), np.array([0]), 1)


# query classification

def test_classify_query_examples():
    protos = np.array([[1.0, 10.0, -10.0], [0.0, 0.0, 0.0]])
    assert int(np.argmax(classify_query(np.array([1.0, 0.0]), protos))) == 0
    np.testing.assert_allclose(classify_query(np.array([0.2, 0.3]), np.ones((2, 4))), [0.25] * 4)
    p = classify_query(np.array([0.0, 0.0]), np.array([[0.0, math.sqrt(2.0)], [0.0, 0.0]]))
    np.testing.assert_allclose(p, [1 / (1 + math.exp(-2.0)), math.exp(-2.0) / (1 + math.exp(-2.0))], rtol=1e-12)


def test_classify_query_properties(rng):
    for _ in range(10):
        protos = rng.normal(size=(4, 5))
        f = rng.normal(size=4)
        p = classify_query(f, protos)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p > 0)
        distances = np.sum((protos - f[:, None]) ** 2, axis=0)
        np.testing.assert_allclose(p, softmax(-distances), rtol=1e-12)
        # closer prototypes are more probable
        order = np.argsort(distances)
        assert np.all(np.diff(p[order]) <= 1e-15)


# episode loss

def test_identical_embeddings_give_log_n():
    support = np.ones((5, 3))
    result = episode_loss_from_embeddings(support, np.arange(5), np.ones((10, 3)), np.repeat(np.arange(5), 2), 5)
    assert result.value == pytest.approx(math.log(5))


def test_saturated_loss():
    support = 10.0 * np.eye(4)
    labels = np.arange(4)
    result = episode_loss_from_embeddings(support, labels, support.copy(), labels, 4)
    assert result.value < 1e-3


def test_untrained_encoder_is_near_uniform():
    # one Gaussian cloud split at random into two classes: labels carry no signal
    features = SeededRng(3).normal(size=(200, 8))
    classes = {0: features[:100], 1: features[100:]}
    params = EncoderParams.initialize(8, 64, 32, SeededRng(0))
    values = [episode_loss(params, e).value for e in episode_stream(classes, 2, 1, 5, 100, seed=0)]
    assert abs(np.mean(values) - math.log(2)) < 0.5


def test_embedding_gradients(rng):
    for _ in range(10):
        support, query = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
        support_labels, query_labels = np.array([0, 1, 2, 0, 1, 2]), np.array([2, 0, 1, 1])

        def value(v):
            return episode_loss_from_embeddings(v[:18].reshape(6, 3), support_labels, v[18:].reshape(4, 3),
                                                query_labels, 3, distance_scale=0.7).value

        def grad(v):
            result = episode_loss_from_embeddings(v[:18].reshape(6, 3), support_labels, v[18:].reshape(4, 3),
                                                  query_labels, 3, distance_scale=0.7)
            return np.concatenate([result.grad_support.ravel(), result.grad_query.ravel()])

        assert check_gradient(value, grad, np.concatenate([support.ravel(), query.ravel()])) < 1e-4


def test_episode_loss_gradients_through_encoder(small_dataset):
    params = EncoderParams.initialize(8, 5, 4, SeededRng(2))
    episode = sample_episode(small_dataset, n_way=2, k_shot=2, q_query=2, rng=SeededRng(3))

    def value(v):
        return episode_loss(_with_flat(params, v), episode).value

    def grad(v):
        p = _with_flat(params, v)
        grads = episode_loss(p, episode).grads
        return np.concatenate([grads[name].ravel() for name, _ in p.named_arrays()])

    assert check_gradient(value, grad, _flat(params)) < 1e-4


# training

def _tiny_meta(**overrides):
    cfg = dict(episodes_per_epoch=3, epochs=2, n_way=2, k_shot=1, q_query=2, hidden_dim=4, embedding_dim=3, seed=5)
    cfg.update(overrides)
    return MetaTrainConfig(**cfg)


def test_zero_lr_keeps_initial_params(small_dataset):
    result = meta_train(small_dataset, _tiny_meta(lr=0.0))
    initial = EncoderParams.initialize(8, 4, 3, SeededRng(5).derive(1))
    np.testing.assert_array_equal(_flat(result.params), _flat(initial))


def test_meta_train_is_deterministic(small_dataset):
    a = meta_train(small_dataset, _tiny_meta())
    b = meta_train(small_dataset, _tiny_meta())
    np.testing.assert_array_equal(_flat(a.params), _flat(b.params))
    assert a.trace == b.trace
    assert [entry['epoch'] for entry in a.trace] == [0, 1]


def test_warm_start_is_copied(small_dataset):
    init = EncoderParams.initialize(8, 4, 3, SeededRng(1))
    before = _flat(init)
    result = meta_train(small_dataset, _tiny_meta(), init=init)
    np.testing.assert_array_equal(_flat(init), before)
    assert not np.array_equal(_flat(result.params), before)
    with pytest.raises(DimensionMismatch):
        meta_train(small_dataset, _tiny_meta(), init=EncoderParams.initialize(5, 4, 3, SeededRng(1)))


def test_validation_selects_best_epoch(small_dataset):
    result = meta_train(small_dataset, _tiny_meta(epochs=3, val_episodes=5), val=_separated_fine(num_classes=3))
    accuracies = [entry['val_accuracy'] for entry in result.trace]
    assert result.val_accuracy == max(accuracies)
    assert result.best_epoch == accuracies.index(max(accuracies))


def test_divergence_is_detected(small_dataset, monkeypatch):
    def exploding(params, episode, distance_scale=1.0):
        return EpisodeLoss(value=float('inf'), grads={name: np.zeros_like(a) for name, a in params.named_arrays()},
                           accuracy=0.0)

    monkeypatch.setattr(protonet, 'episode_loss', exploding)
    with pytest.raises(DivergenceDetected):
        meta_train(small_dataset, _tiny_meta())


def test_invalid_config():
    with pytest.raises(ConfigError):
        _tiny_meta(lr=-0.1).validate()
    with pytest.raises(ConfigError):
        _tiny_meta(n_way=0).validate()


# evaluation

def test_oracle_embedding_is_perfect():
    report = meta_eval(lambda x: x, _separated_fine(), n_way=5, k_shot=1, q_query=3, count=50, seed=0)
    assert report.mean_accuracy == 1.0
    assert report.ci95 == 0.0
    assert report.episodes == 50 and report.n_way == 5 and report.k_shot == 1


def test_constant_encoder_is_chance():
    report = meta_eval(lambda x: np.ones((len(x), 4)), _separated_fine(), n_way=5, k_shot=1, q_query=3, count=50)
    assert report.mean_accuracy == pytest.approx(1 / 5)


def test_meta_eval_accepts_encoder_and_is_deterministic():
    params = EncoderParams.initialize(8, 6, 4, SeededRng(0))
    fine = _separated_fine()
    a = meta_eval(params, fine, n_way=3, k_shot=2, q_query=2, count=30, seed=7)
    b = meta_eval(params.encode_batch, fine, n_way=3, k_shot=2, q_query=2, count=30, seed=7)
    assert a == b
    assert 0.0 <= a.mean_accuracy <= 1.0


def test_episode_accuracy_ties_go_to_lowest_label():
    episode = sample_episode(_separated_fine(), n_way=4, k_shot=1, q_query=2, rng=SeededRng(0))
    assert episode_accuracy(lambda x: np.zeros((len(x), 2)), episode) == pytest.approx(0.25)
