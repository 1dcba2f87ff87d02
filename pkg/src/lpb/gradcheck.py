"""Finite-difference verification of reverse-mode gradients.

The analytic side runs the regular float32 tape. The finite-difference side
re-evaluates the same forward/loss code on float64 copies so the checker's
own rounding does not mask gradient bugs. Loss callables must therefore be
built from lpb.autodiff ops (those are dtype-generic internally).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .errors import ContractError, NumericError

LossFn = Callable[[Tensor, Tape | None], Tensor]


def _check_scalar_finite(loss: Tensor) -> float:
    if loss.data.size != 1:
        raise ContractError(f"gradcheck: loss must be scalar, got shape {loss.shape}")
    val = float(loss.data.reshape(())[()])
    if not np.isfinite(val):
        raise NumericError(f"gradcheck: non-finite loss {val}")
    return val


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> np.ndarray:
    return np.abs(analytic - fd) / (np.abs(analytic) + np.abs(fd) + 1e-8)


def _coord_iter(arr: np.ndarray, sample: int | None, rng: np.random.Generator | None):
    flat_n = arr.size
    if sample is None or sample >= flat_n:
        return range(flat_n)
    rng = rng or np.random.default_rng(0)
    return rng.choice(flat_n, size=sample, replace=False)


def fd_param_grads(
    net: nn.Mlp,
    loss_fn: LossFn,
    x: Tensor,
    fd_step: float,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """Central-difference parameter gradients in float64.

    With ``sample`` set, only that many seeded coordinates per parameter
    tensor are evaluated; the rest are NaN and skipped by comparisons.
    """
    net64 = nn.to_float64(net)
    x64 = Tensor._wrap(x.data.astype(np.float64))

    def evaluate() -> float:
        return float(loss_fn(nn.forward(net64, x64, None), None).data.reshape(())[()])

    grads = []
    for p in net64.parameters():
        flat = p.data.reshape(-1)
        g = np.full(flat.shape, np.nan)
        for i in _coord_iter(flat, sample, rng):
            orig = flat[i]
            flat[i] = orig + fd_step
            up = evaluate()
            flat[i] = orig - fd_step
            down = evaluate()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * fd_step)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_relative_error(analytic: list[np.ndarray], fd: list[np.ndarray]) -> float:
    worst = 0.0
    for a, f in zip(analytic, fd):
        mask = np.isfinite(f)
        if not mask.any():
            continue
        worst = max(worst, float(relative_error(a[mask], f[mask]).max()))
    return worst


def gradcheck(
    net: nn.Mlp,
    loss_fn: LossFn,
    x: Tensor,
    fd_step: float = 1e-3,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over (checked) parameters of the relative analytic/FD gap."""
    if fd_step <= 0:
        raise ContractError(f"gradcheck: fd_step must be positive, got {fd_step}")
    tape = Tape()
    loss = loss_fn(nn.forward(net, x, tape), tape)
    _check_scalar_finite(loss)
    grads = tape.backward(loss)
    analytic = [grads[p].data.astype(np.float64) for p in net.parameters()]
    fd = fd_param_grads(net, loss_fn, x, fd_step, sample=sample, rng=rng)
    return max_relative_error(analytic, fd)


def gradcheck_input(
    fn: Callable[[Tensor, Tape | None], Tensor],
    x: Tensor,
    fd_step: float = 1e-3,
) -> float:
    """Same check, but for the gradient with respect to the input vector.

    ``fn`` maps an input tensor to a scalar and must be dtype-generic
    (autodiff ops only), like the guidance objective is.
    """
    if fd_step <= 0:
        raise ContractError(f"gradcheck_input: fd_step must be positive, got {fd_step}")
    tape = Tape()
    loss = fn(x, tape)
    _check_scalar_finite(loss)
    analytic = tape.backward(loss)[x].data.astype(np.float64)

    x64 = x.data.astype(np.float64)
    flat = x64.reshape(-1)
    fd = np.empty(flat.shape)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + fd_step
        up = float(fn(Tensor._wrap(x64), None).data.reshape(())[()])
        flat[i] = orig - fd_step
        down = float(fn(Tensor._wrap(x64), None).data.reshape(())[()])
        flat[i] = orig
        fd[i] = (up - down) / (2.0 * fd_step)
    fd = fd.reshape(x64.shape)
    return float(relative_error(analytic, fd).max())
