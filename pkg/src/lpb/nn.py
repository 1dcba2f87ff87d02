"""Small fully-connected networks on top of the autodiff ops."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, ShapeError

_ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "softplus": ad.softplus,
    "identity": lambda x, tape=None: x,
}


@dataclass
class Mlp:
    """Dense layers widths[0] -> ... -> widths[-1]; the named activation is
    applied after every layer except the last."""

    widths: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "tanh"

    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def clone(self) -> "Mlp":
        return Mlp(
            widths=list(self.widths),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
        return h.hexdigest()


def mlp_init(widths: list[int], activation: str = "tanh", rng: np.random.Generator | None = None) -> Mlp:
    """Uniform(-s, s) weight init with s = sqrt(6 / (fan_in + fan_out)), zero biases."""
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ContractError(f"mlp_init: bad widths {widths}")
    if activation not in _ACTIVATIONS:
        raise ContractError(f"mlp_init: unknown activation {activation!r}")
    rng = rng or np.random.default_rng(0)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-s, s, size=(fan_in, fan_out))))
        biases.append(Tensor(np.zeros(fan_out)))
    return Mlp(widths=list(widths), weights=weights, biases=biases, activation=activation)


def forward(net: Mlp, x: Tensor, tape: Tape | None = None) -> Tensor:
    """Run the network; records onto ``tape`` when one is given."""
    if x.shape[-1] != net.widths[0]:
        raise ShapeError(
            f"forward: input shape {x.shape} does not end in first layer width "
            f"({net.widths[0]},)"
        )
    act = _ACTIVATIONS[net.activation]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = ad.add_bias(ad.matmul(h, w, tape), b, tape)
        if i < last:
            h = act(h, tape)
    return h


def to_float64(net: Mlp) -> Mlp:
    """Float64 copy for finite-difference oracles; not for deployment."""
    return Mlp(
        widths=list(net.widths),
        weights=[Tensor._wrap(w.data.astype(np.float64)) for w in net.weights],
        biases=[Tensor._wrap(b.data.astype(np.float64)) for b in net.biases],
        activation=net.activation,
    )
