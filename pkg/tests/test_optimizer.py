import numpy as np
import pytest

from src.exceptions import ConfigError
from src.optimizer import LrSchedule, SgdMomentum


def test_factor_schedule():
    schedule = LrSchedule(0.3, [120, 160], [0.1, 0.01])
    assert schedule.lr_at(0) == 0.3
    assert schedule.lr_at(119) == 0.3
    assert schedule.lr_at(120) == pytest.approx(0.03)
    assert schedule.lr_at(160) == pytest.approx(0.003)


def test_compound_schedule():
    schedule = LrSchedule(0.3, [120, 160], [0.1, 0.01], mode='compound')
    assert schedule.lr_at(130) == pytest.approx(0.03)
    assert schedule.lr_at(199) == pytest.approx(0.0003)


@pytest.mark.parametrize('milestones, factors, mode', [
    ([160, 120], [0.1, 0.01], 'factor'),
    ([120, 160], [0.01, 0.1], 'factor'),
    ([120], [0.1, 0.01], 'factor'),
    ([120, 160], [0.1, 0.01], 'cosine'),
])
def test_invalid_schedule(milestones, factors, mode):
    with pytest.raises(ConfigError):
        LrSchedule(0.3, milestones, factors, mode=mode)


def test_zero_momentum_is_gradient_descent():
    w = np.array([1.0, -2.0])
    reference = w.copy()
    optimizer = SgdMomentum([('W', w)], momentum=0.0, weight_decay=0.0)
    for step in range(5):
        grad = np.array([0.5, 0.25]) * (step + 1)
        optimizer.step({'W': grad}, lr=0.1)
        reference = reference - 0.1 * grad
        np.testing.assert_allclose(w, reference, atol=1e-12)


def test_momentum_and_weight_decay():
    w = np.array([1.0])
    b = np.array([1.0])
    optimizer = SgdMomentum([('layer.W0', w), ('layer.b0', b)], momentum=0.9, weight_decay=0.5)
    zero = {'layer.W0': np.zeros(1), 'layer.b0': np.zeros(1)}
    optimizer.step(zero, lr=0.1)
    # weights decay, biases do not
    assert w[0] == pytest.approx(1.0 - 0.1 * 0.5)
    assert b[0] == 1.0
    optimizer.step(zero, lr=0.1)
    v = 0.9 * 0.5 + 0.5 * 0.95
    assert w[0] == pytest.approx(0.95 - 0.1 * v)


def test_zero_lr_leaves_params_unchanged():
    w = np.array([[1.0, 2.0]])
    optimizer = SgdMomentum([('W', w)], momentum=0.9, weight_decay=5e-4)
    optimizer.step({'W': np.ones_like(w)}, lr=0.0)
    np.testing.assert_array_equal(w, [[1.0, 2.0]])
