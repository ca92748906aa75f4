"""Margin/reconstruction losses and the Adam optimizer."""

import numpy as np
import pytest

from rescaps import autodiff as ad
from rescaps.autodiff import Tensor
from rescaps.losses import (
    Adam,
    DivergedRunError,
    margin_loss,
    one_hot,
    reconstruction_loss,
    total_loss,
)


def test_margin_zero_when_margins_satisfied():
    a = Tensor(np.array([[0.95, 0.05, 0.1], [0.02, 0.9, 0.06]]))
    t = one_hot([0, 1], 3)
    assert margin_loss(a, t).item() == 0.0


def test_margin_all_zero_activations_costs_081():
    a = Tensor(np.zeros((2, 10)))
    t = one_hot([3, 7], 10)
    np.testing.assert_allclose(margin_loss(a, t).item(), 0.81, rtol=1e-7)


def test_margin_single_wrong_class_at_06():
    # true class satisfied, one absent class at 0.6: 0.5 * (0.6 - 0.1)^2
    a = Tensor(np.array([[0.95, 0.6, 0.05]]))
    t = one_hot([0], 3)
    np.testing.assert_allclose(margin_loss(a, t).item(), 0.125, rtol=1e-6)


def test_margin_nonnegative_and_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.uniform(0, 1, size=(4, 6))
        labels = rng.integers(0, 6, size=4)
        loss = margin_loss(Tensor(a), one_hot(labels, 6)).item()
        assert loss >= 0.0
        perm = rng.permutation(6)
        permuted = margin_loss(
            Tensor(a[:, perm]), one_hot([np.argsort(perm)[l] for l in labels], 6)
        ).item()
        # same loss when classes are renamed consistently
        inv = np.empty_like(perm)
        inv[perm] = np.arange(6)
        permuted = margin_loss(Tensor(a[:, perm]), one_hot(inv[labels], 6)).item()
        np.testing.assert_allclose(permuted, loss, rtol=1e-6)


def test_margin_rejects_bad_labels():
    with pytest.raises(ValueError):
        one_hot([11], 10)


def test_reconstruction_loss_values():
    img = np.random.default_rng(1).uniform(size=(2, 4, 4, 1))
    assert reconstruction_loss(Tensor(img), img).item() == 0.0

    bumped = img.copy()
    bumped[0, 2, 1, 0] += 0.5
    np.testing.assert_allclose(
        reconstruction_loss(Tensor(bumped), img).item(), 0.25 / 2, rtol=1e-6
    )  # one pixel off by 0.5 in one of two batch rows

    with pytest.raises(ad.ShapeError):
        reconstruction_loss(Tensor(img), img[:, :3])


def test_total_objective_weighting():
    m = Tensor(np.array(0.5))
    r = Tensor(np.array(2000.0))
    np.testing.assert_allclose(total_loss(m, r, 1e-5).item(), 0.5 + 0.02, rtol=1e-6)


# -- adam ------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.zeros(2)
    before = p.data.copy()
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_is_minus_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-4)
    p.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-1e-4], rtol=1e-6)


def test_adam_converges_on_quadratic_bowl():
    p = Tensor(np.array([0.1]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-4)
    for _ in range(2000):
        p.grad = 2.0 * p.data
        opt.step()
    assert abs(p.data[0]) < 1e-2


def test_adam_nan_gradient_aborts_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam({"p": p, "q": q})
    p.grad = np.array([np.nan])
    q.grad = np.array([1.0])
    with pytest.raises(DivergedRunError):
        opt.step()
    np.testing.assert_array_equal(q.data, [2.0])  # aborted before any update


def test_adam_update_is_elementwise_in_any_layout():
    rng = np.random.default_rng(2)
    values = rng.normal(size=12)
    grads = rng.normal(size=12)

    flat = Tensor(values.copy(), requires_grad=True)
    grid = Tensor(values.reshape(3, 4).copy(), requires_grad=True)
    opt1 = Adam({"p": flat}, lr=1e-3)
    opt2 = Adam({"p": grid}, lr=1e-3)
    for _ in range(5):
        flat.grad = grads.copy()
        grid.grad = grads.reshape(3, 4).copy()
        opt1.step()
        opt2.step()
    np.testing.assert_allclose(grid.data.reshape(-1), flat.data, rtol=1e-12)
