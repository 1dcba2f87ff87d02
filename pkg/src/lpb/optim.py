"""Adaptive-moment optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericError


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ContractError(f"adam_init: learning rate must be positive, got {lr}")
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params: list[Tensor], grads: list[Tensor], state: AdamState) -> tuple[list[Tensor], AdamState]:
    """One bias-corrected update, applied to ``params`` in place.

    All gradients are validated first so a non-finite gradient leaves every
    parameter untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"state of size {len(state.m)}"
        )
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractError(f"adam_step: param {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g.data)):
            raise NumericError("adam_step: non-finite gradient; parameters untouched")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g.data
        v *= state.beta2
        v += (1.0 - state.beta2) * (g.data * g.data)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return params, state
