"""Gradient kernels: analytic gradients against central differences, the two
backends against each other, and hand-computed fixed points."""

import numpy as np
import pytest

from fedex_sim import _backend, _kernels_py
from fedex_sim.learning import LearningTask, loss_and_grad

RNG = np.random.default_rng(1234)


def numeric_gradient(f, w, eps=1e-6):
    g = np.zeros_like(w)
    for i in range(w.size):
        up, down = w.copy(), w.copy()
        up[i] += eps
        down[i] -= eps
        g[i] = (f(up) - f(down)) / (2 * eps)
    return g


def random_case(kind, l2=0.0):
    if kind == "quadratic":
        task = LearningTask(kind=kind, input_dim=7, num_classes=3, l2_reg=l2)
    else:
        task = LearningTask(kind=kind, input_dim=5, num_classes=4, hidden_dim=6,
                            l2_reg=l2)
    X = RNG.normal(size=(9, task.input_dim))
    y = RNG.integers(0, task.num_classes, size=9).astype(np.int64)
    w = RNG.normal(size=task.param_dim) * 0.6
    return task, w, X, y


@pytest.mark.parametrize("kind", ["logistic", "mlp", "quadratic"])
@pytest.mark.parametrize("l2", [0.0, 0.37])
def test_analytic_gradient_matches_central_difference(kind, l2):
    task, w, X, y = random_case(kind, l2)
    loss, grad, _ = loss_and_grad(task, w, X, y)

    def f(v):
        return loss_and_grad(task, v, X, y)[0]

    num = numeric_gradient(f, w)
    scale = max(1.0, np.abs(num).max())
    assert np.abs(grad - num).max() / scale < 1e-5


@pytest.mark.parametrize("kind", ["logistic", "mlp"])
def test_backends_agree(kind):
    if _backend.BACKEND != "compiled":
        pytest.skip("compiled backend not built")
    from fedex_sim import _ckernels

    for trial in range(20):
        task, w, X, y = random_case(kind, l2=0.1 * (trial % 3))
        if kind == "logistic":
            args = (w, X, y, task.num_classes, task.l2_reg)
            ref = _kernels_py.logistic_loss_grad(*args)
            out = _ckernels.logistic_loss_grad(*args)
        else:
            args = (w, X, y, task.num_classes, task.hidden_dim, task.l2_reg)
            ref = _kernels_py.mlp_loss_grad(*args)
            out = _ckernels.mlp_loss_grad(*args)
        assert abs(ref[0] - out[0]) < 1e-12
        assert np.abs(np.asarray(ref[1]) - np.asarray(out[1])).max() < 1e-12
        assert np.abs(np.asarray(ref[2]) - np.asarray(out[2])).max() < 1e-12


def test_quadratic_backends_agree():
    if _backend.BACKEND != "compiled":
        pytest.skip("compiled backend not built")
    from fedex_sim import _ckernels

    w = RNG.normal(size=11)
    ref = _kernels_py.quadratic_loss_grad(w, 5, 0.25)
    out = _ckernels.quadratic_loss_grad(w, 5, 0.25)
    assert abs(ref[0] - out[0]) < 1e-12
    assert np.abs(np.asarray(ref[1]) - np.asarray(out[1])).max() < 1e-12
    assert np.abs(np.asarray(ref[2]) - np.asarray(out[2])).max() < 1e-12


def test_quadratic_fixed_point():
    # ||w||^2/2 at w=(3,4) is 12.5; gradient is w itself
    task = LearningTask(kind="quadratic", input_dim=2, num_classes=2)
    loss, grad, per_sample = loss_and_grad(
        task, np.array([3.0, 4.0]), np.zeros((4, 2)), np.zeros(4, dtype=np.int64)
    )
    assert loss == pytest.approx(12.5, abs=1e-12)
    assert np.allclose(grad, [3.0, 4.0], atol=1e-12)
    assert per_sample.shape == (4,)
    assert np.allclose(per_sample, 12.5, atol=1e-12)


def test_quadratic_l2_scales_loss_and_grad():
    task = LearningTask(kind="quadratic", input_dim=2, num_classes=2, l2_reg=0.5)
    loss, grad, per_sample = loss_and_grad(
        task, np.array([3.0, 4.0]), np.zeros((2, 2)), np.zeros(2, dtype=np.int64)
    )
    assert loss == pytest.approx(12.5 * 1.5, abs=1e-12)
    assert np.allclose(grad, [4.5, 6.0], atol=1e-12)
    # the per-sample record stays the raw data term
    assert np.allclose(per_sample, 12.5, atol=1e-12)


def test_logistic_zero_model_gives_log_c():
    task = LearningTask(kind="logistic", input_dim=3, num_classes=5)
    X = RNG.normal(size=(6, 3))
    y = RNG.integers(0, 5, size=6).astype(np.int64)
    loss, _, per_sample = loss_and_grad(task, np.zeros(task.param_dim), X, y)
    assert loss == pytest.approx(np.log(5), abs=1e-12)
    assert np.allclose(per_sample, np.log(5), atol=1e-12)


def test_per_sample_losses_mean_equals_loss_without_l2():
    for kind in ("logistic", "mlp"):
        task, w, X, y = random_case(kind, l2=0.0)
        loss, _, per_sample = loss_and_grad(task, w, X, y)
        assert loss == pytest.approx(per_sample.mean(), abs=1e-12)
        assert np.all(per_sample >= 0)


def test_empty_batch_rejected(logistic_task):
    with pytest.raises(Exception):
        loss_and_grad(
            logistic_task,
            np.zeros(logistic_task.param_dim),
            np.zeros((0, logistic_task.input_dim)),
            np.zeros(0, dtype=np.int64),
        )
