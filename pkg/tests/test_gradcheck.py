"""Finite-difference oracle for the analytic gradients."""
from __future__ import annotations

import numpy as np
import pytest

from lpb import autodiff as ad
from lpb import gradcheck, nn
from lpb.autodiff import Tensor
from lpb.errors import ContractError, NumericError


def test_relative_error_formula():
    a = np.array([1.0, 0.0, 2.0])
    f = np.array([1.0, 0.0, 1.0])
    err = gradcheck.relative_error(a, f)
    assert err[0] == pytest.approx(0.0, abs=1e-8)
    assert err[1] == pytest.approx(0.0, abs=1e-8)
    assert err[2] == pytest.approx(1.0 / 3.0, rel=1e-6)


def test_max_relative_error_skips_nan_fd_entries():
    analytic = [np.array([1.0, 5.0])]
    fd = [np.array([1.0, np.nan])]
    assert gradcheck.max_relative_error(analytic, fd) == pytest.approx(0.0, abs=1e-8)


def test_gradcheck_passes_on_small_net(rng):
    net = nn.mlp_init([4, 8, 3], activation="softplus", rng=rng)
    x = Tensor(rng.normal(size=(5, 4)))
    err = gradcheck.gradcheck(net, lambda out, tape: ad.mean(ad.mul(out, out, tape), tape), x)
    assert err < 1e-4


def test_gradcheck_catches_a_planted_gradient_bug(rng):
    # a corrupted analytic gradient must register as disagreement with FD
    net = nn.mlp_init([3, 6, 2], activation="tanh", rng=rng)
    x = Tensor(rng.normal(size=(4, 3)))

    def loss_fn(out, tape):
        return ad.mean(ad.mul(out, out, tape), tape)

    tape = ad.Tape()
    loss = loss_fn(nn.forward(net, x, tape), tape)
    grads = tape.backward(loss)
    analytic = [grads[p].data.astype(np.float64) for p in net.parameters()]
    analytic[0][0, 0] += 0.5
    fd = gradcheck.fd_param_grads(net, loss_fn, x, fd_step=1e-3)
    assert gradcheck.max_relative_error(analytic, fd) > 1e-3


def test_gradcheck_sampled_coordinates(rng):
    net = nn.mlp_init([6, 12, 1], activation="relu", rng=rng)
    x = Tensor(rng.normal(size=(8, 6)))
    err = gradcheck.gradcheck(net, lambda out, tape: ad.mean(out, tape), x,
                              sample=10, rng=np.random.default_rng(1))
    assert err < 1e-4


def test_gradcheck_rejects_nonscalar_and_bad_step(rng):
    net = nn.mlp_init([3, 2], rng=rng)
    x = Tensor(rng.normal(size=(2, 3)))
    with pytest.raises(ContractError):
        gradcheck.gradcheck(net, lambda out, tape: out, x)
    with pytest.raises(ContractError):
        gradcheck.gradcheck(net, lambda out, tape: ad.mean(out, tape), x, fd_step=0.0)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_gradcheck_flags_nonfinite_loss(rng):
    net = nn.mlp_init([3, 2], rng=rng)
    x = Tensor(rng.normal(size=(2, 3)))

    def loss_fn(out, tape):
        return ad.mean(ad.scale(out, float("inf"), tape), tape)

    with pytest.raises(NumericError):
        gradcheck.gradcheck(net, loss_fn, x)


def test_gradcheck_input_quadratic_exact():
    x = Tensor(np.array([0.5, -1.5, 2.0]))
    err = gradcheck.gradcheck_input(lambda t, tape: ad.sq_dist(t, Tensor(np.zeros(3)), tape), x)
    assert err < 1e-6


def test_fd_param_grads_linear_function(rng):
    # d(mean(xW + b)) / dW is constant, so FD is exact up to rounding
    net = nn.mlp_init([3, 2], rng=rng)
    x = Tensor(rng.normal(size=(4, 3)))
    fd = gradcheck.fd_param_grads(net, lambda out, tape: ad.mean(out, tape), x, fd_step=1e-4)
    want_w = np.repeat(x.data.mean(axis=0)[:, None], 2, axis=1) / 2.0
    np.testing.assert_allclose(fd[0], want_w, atol=1e-7)
    np.testing.assert_allclose(fd[1], np.full(2, 0.5), atol=1e-7)
