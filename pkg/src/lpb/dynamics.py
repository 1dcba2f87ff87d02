"""Action-conditioned latent dynamics model with a frozen encoder.

The predictor maps (current latent, action chunk) to the latent expected
T_p steps later. The encoder is the base policy's and is never updated
here; latents are therefore precomputed once per training run. Both the
input and target latents use the single-frame convention (current frame
replicated across the T_o stack) so training matches how the steering
layer queries the model at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import nn
from . import optim
from . import policy as polmod
from .autodiff import Tape, Tensor
from .errors import ContractError

DEFAULT_DYN_BATCH = 64
DEFAULT_DYN_LR = 5e-4
DEFAULT_DYN_EPOCHS = 100


@dataclass
class DynamicsModel:
    encoder: nn.Mlp          # shared frozen reference to the policy encoder
    predictor: nn.Mlp        # (D + T_p*2) -> D
    t_o: int
    t_p: int
    obs_dim: int
    latent_dim: int
    encoder_checksum: str = ""

    def __post_init__(self):
        expect_in = self.latent_dim + self.t_p * 2
        if self.predictor.widths[0] != expect_in or self.predictor.widths[-1] != self.latent_dim:
            raise ContractError(
                f"predictor widths {self.predictor.widths} incompatible with latent "
                f"{self.latent_dim} and chunk {self.t_p}x2")
        if not self.encoder_checksum:
            self.encoder_checksum = self.encoder.checksum()

    def clone(self) -> "DynamicsModel":
        return DynamicsModel(
            encoder=self.encoder, predictor=self.predictor.clone(),
            t_o=self.t_o, t_p=self.t_p, obs_dim=self.obs_dim,
            latent_dim=self.latent_dim, encoder_checksum=self.encoder_checksum)


@dataclass
class DynTrainConfig:
    batch_size: int = DEFAULT_DYN_BATCH
    lr: float = DEFAULT_DYN_LR
    epochs: int = DEFAULT_DYN_EPOCHS
    holdout_frac: float = 0.1
    seed: int = 0
    mixture_weights: list[float] | None = None  # per-dataset; None = plain concat

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 1:
            raise ContractError("dynamics training config values must be positive")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ContractError(f"holdout fraction must lie in [0, 1), got {self.holdout_frac}")
        if self.mixture_weights is not None:
            w = np.asarray(self.mixture_weights, dtype=np.float64)
            if np.any(w <= 0) or abs(float(w.sum()) - 1.0) > 1e-9:
                raise ContractError(f"mixture weights must be positive and sum to 1, got {self.mixture_weights}")


@dataclass
class DynTrainLog:
    losses: list[float]
    holdout_mse: float
    n_train: int
    n_holdout: int
    seed: int


def make_dynamics(policy: polmod.DiffusionPolicy, seed: int = 0,
                  hidden: tuple[int, ...] = (256, 256),
                  encoder: nn.Mlp | None = None) -> DynamicsModel:
    """Predictor over the policy's latent space; ``encoder`` swaps in an
    alternative latent space of the same width (default: the policy's own)."""
    rng = np.random.default_rng(seed)
    enc = policy.encoder if encoder is None else encoder
    D = enc.widths[-1]
    predictor = nn.mlp_init((D + policy.t_p * 2, *hidden, D), rng=rng)
    return DynamicsModel(
        encoder=enc, predictor=predictor,
        t_o=policy.t_o, t_p=policy.t_p, obs_dim=policy.obs_dim, latent_dim=D)


def encode_frame(model: DynamicsModel, obs_flat: np.ndarray) -> np.ndarray:
    """Replicated-frame latent of a single observation (the convention the
    steering layer uses for z_t)."""
    stack = np.tile(np.asarray(obs_flat, dtype=np.float32).reshape(-1), model.t_o)
    return nn.forward(model.encoder, Tensor(stack), None).data


def encode_frames(model: DynamicsModel, frames: np.ndarray) -> np.ndarray:
    stacks = np.tile(np.asarray(frames, dtype=np.float32), (1, model.t_o))
    return nn.forward(model.encoder, Tensor(stacks), None).data


def _flatten_chunk(a, t_p: int) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float32)
    if arr.shape[-2:] == (t_p, 2):
        arr = arr.reshape(*arr.shape[:-2], t_p * 2)
    if arr.shape[-1] != t_p * 2:
        raise ContractError(f"action chunk shape {np.asarray(a).shape} incompatible with T_p={t_p}")
    return arr


def predict(model: DynamicsModel, z, a_chunk, tape: Tape | None = None) -> Tensor:
    """Predicted latent T_p steps ahead; differentiable in the chunk when
    taped. Accepts single vectors or batches."""
    z_t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    a_t = a_chunk if isinstance(a_chunk, Tensor) else Tensor(_flatten_chunk(a_chunk, model.t_p))
    if z_t.shape[-1] != model.latent_dim:
        raise ContractError(f"latent dim {z_t.shape[-1]} != model dim {model.latent_dim}")
    x = ad.concat([z_t, a_t], tape)
    return nn.forward(model.predictor, x, tape)


def _gather_windows(model: DynamicsModel, datasets) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """(current frames, flat chunks, future frames, per-dataset counts)."""
    if isinstance(datasets, datamod.CuratedDataset):
        datasets = [datasets]
    frames, chunks, futures, counts = [], [], [], []
    for ds in datasets:
        if len(ds) == 0:
            counts.append(0)
            continue
        stacks, a, fut = datamod.dyn_windows(ds.trajectories, model.t_o, model.t_p)
        frames.append(stacks[:, -model.obs_dim:])  # last frame of the stack is o_t
        chunks.append(a.reshape(a.shape[0], -1))
        futures.append(fut)
        counts.append(a.shape[0])
    if not frames:
        raise ContractError("dynamics training needs at least one nonempty dataset")
    return (np.concatenate(frames), np.concatenate(chunks), np.concatenate(futures), counts)


def _apply_mixture(frames, chunks, futures, counts, weights, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if weights is None:
        return frames, chunks, futures
    if len(weights) != len(counts):
        raise ContractError(f"{len(weights)} mixture weights for {len(counts)} datasets")
    total = frames.shape[0]
    pick = []
    offset = 0
    for cnt, w in zip(counts, weights):
        want = int(round(w * total))
        if cnt == 0 and want > 0:
            raise ContractError("cannot weight an empty dataset")
        if cnt > 0:
            pick.append(rng.choice(np.arange(offset, offset + cnt), size=want, replace=True))
        offset += cnt
    idx = np.concatenate(pick)
    return frames[idx], chunks[idx], futures[idx]


def dyn_train(model: DynamicsModel, datasets, config: DynTrainConfig | None = None) -> tuple[DynamicsModel, DynTrainLog]:
    """Latent-MSE training of the predictor; the encoder is read, never
    written, and all latents are precomputed up front."""
    cfg = config or DynTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    frames, chunks, futures, counts = _gather_windows(model, datasets)
    frames, chunks, futures = _apply_mixture(frames, chunks, futures, counts, cfg.mixture_weights, rng)
    n = frames.shape[0]
    checksum_before = model.encoder.checksum()
    z_in = encode_frames(model, frames)
    z_tgt = encode_frames(model, futures)

    order = rng.permutation(n)
    n_hold = int(n * cfg.holdout_frac)
    hold, train = order[:n_hold], order[n_hold:]
    if train.size == 0:
        raise ContractError("holdout split left no training windows")

    params = model.predictor.parameters()
    state = optim.adam_init(params, lr=cfg.lr)
    losses = []
    for _ in range(cfg.epochs):
        perm = train[rng.permutation(train.size)]
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, perm.size, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            tape = Tape()
            pred = predict(model, Tensor(z_in[idx]), Tensor(chunks[idx]), tape)
            loss = ad.mse(pred, Tensor(z_tgt[idx]), tape)
            grads = tape.backward(loss)
            optim.adam_step(params, [grads[p] for p in params], state)
            epoch_loss += loss.item()
            n_batches += 1
        losses.append(epoch_loss / n_batches)

    if model.encoder.checksum() != checksum_before:
        raise ContractError("encoder parameters changed during dynamics training")
    if hold.size:
        pred = predict(model, Tensor(z_in[hold]), Tensor(chunks[hold])).data
        holdout_mse = float(np.mean(np.sum((pred - z_tgt[hold]) ** 2, axis=1) / model.latent_dim))
    else:
        holdout_mse = float("nan")
    log = DynTrainLog(losses=losses, holdout_mse=holdout_mse,
                      n_train=int(train.size), n_holdout=int(hold.size), seed=cfg.seed)
    return model, log


def mse_stats(pred: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-window mean squared error and its mean; both inputs (N, D)."""
    pred = np.atleast_2d(pred)
    targets = np.atleast_2d(targets)
    if pred.shape != targets.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {targets.shape}")
    per_window = np.mean((pred.astype(np.float64) - targets.astype(np.float64)) ** 2, axis=1)
    return float(per_window.mean()), per_window


def eval_dynamics(model: DynamicsModel, datasets) -> tuple[float, np.ndarray]:
    """Held-out-style evaluation on whole datasets: returns (mean MSE,
    per-window MSE distribution)."""
    frames, chunks, futures, _ = _gather_windows(model, datasets)
    z_in = encode_frames(model, frames)
    z_tgt = encode_frames(model, futures)
    pred = predict(model, Tensor(z_in), Tensor(chunks)).data
    return mse_stats(pred, z_tgt)
