"""Diffusion-policy behavior cloning and inference-time sampling.

The policy is an observation encoder plus a noise-prediction MLP trained
with the standard denoising objective over action chunks. Sampling runs
the DDPM posterior chain (or a deterministic DDIM subset) and exposes a
per-step hook through which steering can replace the predicted noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import env as envmod
from . import nn
from . import optim
from .autodiff import Tape, Tensor
from .errors import ContractError

EMBED_DIM = 16
DEFAULT_K = 100


@dataclass(frozen=True)
class DdpmSchedule:
    """Noise schedule; betas[i] is the variance of step k=i+1 and
    alpha_bars[k] the cumulative product, with alpha_bars[0] = 1."""

    K: int
    betas: np.ndarray        # (K,) float64, step k at index k-1
    alphas: np.ndarray       # (K,)
    alpha_bars: np.ndarray   # (K+1,), index k directly

    def beta(self, k: int) -> float:
        return float(self.betas[k - 1])

    def alpha(self, k: int) -> float:
        return float(self.alphas[k - 1])

    def abar(self, k: int) -> float:
        return float(self.alpha_bars[k])


def cosine_schedule(K: int = DEFAULT_K, offset: float = 0.008) -> DdpmSchedule:
    """Squared-cosine cumulative schedule with the usual small offset;
    per-step beta is clipped to 0.999 and alpha_bar recomputed so the
    stored arrays stay mutually consistent."""
    if K < 1:
        raise ContractError(f"diffusion step count must be >= 1, got {K}")
    ks = np.arange(K + 1, dtype=np.float64)
    f = np.cos((ks / K + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    abar = f / f[0]
    betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    alphas = 1.0 - betas
    abar = np.concatenate([[1.0], np.cumprod(alphas)])
    if not np.all(np.diff(abar) < 0.0):
        raise ContractError("alpha_bar must be strictly decreasing")
    return DdpmSchedule(K=K, betas=betas, alphas=alphas, alpha_bars=abar)


def timestep_embedding(k, dim: int = EMBED_DIM) -> np.ndarray:
    """Sinusoidal features of the (integer) diffusion step; accepts a
    scalar or a vector of steps and returns (dim,) or (B, dim) float32."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = np.atleast_1d(np.asarray(k, dtype=np.float64))[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
    return emb[0] if np.isscalar(k) or np.ndim(k) == 0 else emb


@dataclass
class DiffusionPolicy:
    encoder: nn.Mlp
    noise_net: nn.Mlp
    schedule: DdpmSchedule
    t_o: int
    t_p: int
    t_a: int
    obs_mode: str
    obs_dim: int             # per-frame observation size
    latent_dim: int

    def __post_init__(self):
        if self.t_a > self.t_p:
            raise ContractError(f"executed horizon T_a={self.t_a} may not exceed predicted T_p={self.t_p}")
        expect_enc_in = self.t_o * self.obs_dim
        if self.encoder.widths[0] != expect_enc_in or self.encoder.widths[-1] != self.latent_dim:
            raise ContractError(
                f"encoder widths {self.encoder.widths} incompatible with "
                f"{self.t_o} frames of {self.obs_dim} dims -> {self.latent_dim}")
        expect_nn_in = self.t_p * 2 + self.latent_dim + EMBED_DIM
        if self.noise_net.widths[0] != expect_nn_in or self.noise_net.widths[-1] != self.t_p * 2:
            raise ContractError(
                f"noise net widths {self.noise_net.widths} incompatible with chunk "
                f"{self.t_p}x2 and latent {self.latent_dim}")

    @property
    def chunk_dim(self) -> int:
        return self.t_p * 2

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.noise_net.parameters()

    def clone(self) -> "DiffusionPolicy":
        return DiffusionPolicy(
            encoder=self.encoder.clone(), noise_net=self.noise_net.clone(),
            schedule=self.schedule, t_o=self.t_o, t_p=self.t_p, t_a=self.t_a,
            obs_mode=self.obs_mode, obs_dim=self.obs_dim, latent_dim=self.latent_dim)

    def checksum(self) -> str:
        return self.encoder.checksum() + ":" + self.noise_net.checksum()


@dataclass
class TrainRunLog:
    losses: list[float]
    checkpoint_epochs: list[int]
    seed: int

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.checkpoint_epochs[1:], self.checkpoint_epochs)):
            raise ContractError(f"checkpoint epochs must be strictly increasing: {self.checkpoint_epochs}")


def make_policy(
    obs_mode: str = envmod.VECTOR,
    seed: int = 0,
    t_o: int = 2,
    t_p: int = 16,
    t_a: int = 8,
    latent_dim: int | None = None,
    enc_hidden: tuple[int, ...] = (128, 128),
    nn_hidden: tuple[int, ...] = (256, 256),
    K: int = DEFAULT_K,
    activation: str = "softplus",
) -> DiffusionPolicy:
    odim = envmod.obs_dim(obs_mode)
    D = latent_dim if latent_dim is not None else (32 if obs_mode == envmod.VECTOR else 64)
    rng = np.random.default_rng(seed)
    encoder = nn.mlp_init((t_o * odim, *enc_hidden, D), activation=activation, rng=rng)
    noise_net = nn.mlp_init((t_p * 2 + D + EMBED_DIM, *nn_hidden, t_p * 2), activation=activation, rng=rng)
    return DiffusionPolicy(
        encoder=encoder, noise_net=noise_net, schedule=cosine_schedule(K),
        t_o=t_o, t_p=t_p, t_a=t_a, obs_mode=obs_mode, obs_dim=odim, latent_dim=D)


def encode_stack(policy: DiffusionPolicy, stack: Tensor | np.ndarray, tape: Tape | None = None) -> Tensor:
    """Encode an already-flattened stack of T_o frames; accepts (in,) or (B, in)."""
    x = stack if isinstance(stack, Tensor) else Tensor(stack)
    return nn.forward(policy.encoder, x, tape)


def encode(policy: DiffusionPolicy, observations: list[envmod.Observation]) -> np.ndarray:
    """Encode exactly T_o observations of the policy's mode into a latent."""
    if len(observations) != policy.t_o:
        raise ContractError(f"encode expects exactly {policy.t_o} observations, got {len(observations)}")
    for obs in observations:
        if obs.mode != policy.obs_mode:
            raise ContractError(f"observation mode {obs.mode!r} != policy mode {policy.obs_mode!r}")
    stack = np.concatenate([obs.flat for obs in observations]).astype(np.float32)
    return encode_stack(policy, stack).data


def encode_single(policy: DiffusionPolicy, obs_flat: np.ndarray) -> np.ndarray:
    """Latent of the current frame alone, replicated to fill the T_o stack.

    This is the single-frame convention used by the barrier score and the
    dynamics model, which consume z_t = h(o_t)."""
    stack = np.tile(np.asarray(obs_flat, dtype=np.float32).reshape(-1), policy.t_o)
    return encode_stack(policy, stack).data


def noise_pred(
    policy: DiffusionPolicy,
    a_flat: Tensor,
    z: Tensor,
    emb: Tensor,
    tape: Tape | None = None,
) -> Tensor:
    """Forward the noise net on [noisy chunk, latent, step embedding]."""
    x = ad.concat([a_flat, z, emb], tape)
    return nn.forward(policy.noise_net, x, tape)


def bc_train(
    policy: DiffusionPolicy,
    dataset: datamod.CuratedDataset,
    epochs: int,
    seed: int = 0,
    batch_size: int = 64,
    lr: float = 1e-4,
    checkpoint_epochs: list[int] | None = None,
    lr_final: float | None = None,
) -> tuple[DiffusionPolicy, TrainRunLog, dict[int, DiffusionPolicy]]:
    """Denoising behavior cloning; snapshots policy clones at the requested
    epochs (on top of always saving the final state under epoch=epochs).
    ``lr_final`` turns on a linear per-epoch learning-rate ramp from ``lr``."""
    if len(dataset) == 0:
        raise ContractError("bc_train needs a nonempty dataset")
    if epochs < 1:
        raise ContractError(f"epochs must be >= 1, got {epochs}")
    if lr_final is not None and lr_final <= 0:
        raise ContractError(f"final learning rate must be positive, got {lr_final}")
    stacks, chunks = datamod.bc_windows(dataset.trajectories, policy.t_o, policy.t_p)
    n = stacks.shape[0]
    chunks_flat = chunks.reshape(n, -1)
    sched = policy.schedule
    rng = np.random.default_rng(seed)
    params = policy.parameters()
    state = optim.adam_init(params, lr=lr)
    want_ckpt = sorted(set(checkpoint_epochs or []))
    checkpoints: dict[int, DiffusionPolicy] = {}
    losses: list[float] = []
    for epoch in range(1, epochs + 1):
        if lr_final is not None and epochs > 1:
            state.lr = lr + (lr_final - lr) * (epoch - 1) / (epochs - 1)
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            b = idx.shape[0]
            ks = rng.integers(1, sched.K + 1, size=b)
            eps = rng.standard_normal((b, policy.chunk_dim), dtype=np.float32)
            sa = np.sqrt(sched.alpha_bars[ks]).astype(np.float32)[:, None]
            sn = np.sqrt(1.0 - sched.alpha_bars[ks]).astype(np.float32)[:, None]
            noisy = sa * chunks_flat[idx] + sn * eps
            tape = Tape()
            z = encode_stack(policy, Tensor(stacks[idx]), tape)
            pred = noise_pred(policy, Tensor(noisy), z, Tensor(timestep_embedding(ks)), tape)
            loss = ad.mse(pred, Tensor(eps), tape)
            grads = tape.backward(loss)
            optim.adam_step(params, [grads[p] for p in params], state)
            epoch_loss += loss.item()
            n_batches += 1
        losses.append(epoch_loss / n_batches)
        if epoch in want_ckpt:
            checkpoints[epoch] = policy.clone()
    checkpoints.setdefault(epochs, policy.clone())
    log = TrainRunLog(losses=losses, checkpoint_epochs=sorted(checkpoints), seed=seed)
    return policy, log, checkpoints


GuidanceHook = "Callable[[np.ndarray, int, np.ndarray], np.ndarray]"


def _apply_hook(hook, a_flat: np.ndarray, k: int, eps: np.ndarray) -> np.ndarray:
    out = np.asarray(hook(a_flat, k, eps))
    if out.shape != eps.shape:
        raise ContractError(f"guidance hook returned shape {out.shape}, expected {eps.shape}")
    return out.astype(np.float32)


def _eps_batch(policy: DiffusionPolicy, a: np.ndarray, z: np.ndarray, k: int, hook) -> np.ndarray:
    b = a.shape[0]
    emb = np.repeat(timestep_embedding(k)[None, :], b, axis=0)
    eps = noise_pred(policy, Tensor(a), Tensor._wrap(z), Tensor(emb)).data
    if hook is not None:
        eps = np.stack([_apply_hook(hook, a[i], k, eps[i]) for i in range(b)])
    return eps


def ddpm_sample_batch(
    policy: DiffusionPolicy,
    stacks: np.ndarray,
    rng: np.random.Generator,
    hook=None,
) -> np.ndarray:
    """Full DDPM chain for a batch of observation stacks; returns (B, T_p, 2)
    chunks clamped to action bounds. Random draws do not depend on whether a
    hook is present, so a no-op hook reproduces the hook-free chain exactly."""
    stacks = np.atleast_2d(np.asarray(stacks, dtype=np.float32))
    b = stacks.shape[0]
    sched = policy.schedule
    z = encode_stack(policy, Tensor(stacks)).data
    a = rng.standard_normal((b, policy.chunk_dim), dtype=np.float32)
    for k in range(sched.K, 0, -1):
        eps = _eps_batch(policy, a, z, k, hook)
        abar_k = sched.abar(k)
        c1 = float(1.0 / math.sqrt(sched.alpha(k)))
        c2 = float(sched.beta(k) / math.sqrt(1.0 - abar_k))
        a = c1 * (a - c2 * eps)
        if k > 1:
            sigma = math.sqrt(sched.beta(k) * (1.0 - sched.abar(k - 1)) / (1.0 - abar_k))
            a = a + float(sigma) * rng.standard_normal((b, policy.chunk_dim), dtype=np.float32)
    return np.clip(a, -1.0, 1.0).reshape(b, policy.t_p, 2)


def ddpm_sample(policy: DiffusionPolicy, stack: np.ndarray, rng: np.random.Generator, hook=None) -> np.ndarray:
    return ddpm_sample_batch(policy, stack, rng, hook)[0]


def ddim_steps(K: int, n_steps: int) -> list[int]:
    """Evenly spaced descending step subset from K down to 1."""
    if n_steps < 1 or n_steps > K:
        raise ContractError(f"DDIM needs 1 <= n_steps <= K, got {n_steps} vs K={K}")
    raw = np.linspace(K, 1, n_steps)
    return [int(math.floor(v + 0.5)) for v in raw]


def ddim_sample_batch(
    policy: DiffusionPolicy,
    stacks: np.ndarray,
    rng: np.random.Generator,
    n_steps: int = 16,
    hook=None,
) -> np.ndarray:
    """Deterministic DDIM update over an evenly spaced subset of steps."""
    stacks = np.atleast_2d(np.asarray(stacks, dtype=np.float32))
    b = stacks.shape[0]
    sched = policy.schedule
    ks = ddim_steps(sched.K, n_steps)
    z = encode_stack(policy, Tensor(stacks)).data
    a = rng.standard_normal((b, policy.chunk_dim), dtype=np.float32)
    for i, k in enumerate(ks):
        k_prev = ks[i + 1] if i + 1 < len(ks) else 0
        eps = _eps_batch(policy, a, z, k, hook)
        abar_k = sched.abar(k)
        abar_prev = sched.abar(k_prev)
        a0 = (a - float(math.sqrt(1.0 - abar_k)) * eps) * float(1.0 / math.sqrt(abar_k))
        # chunks are bounded, so the clean-action estimate is too; without this
        # clamp the 1/sqrt(abar) factor at high k amplifies any eps error
        a0 = np.clip(a0, -1.0, 1.0)
        a = float(math.sqrt(abar_prev)) * a0 + float(math.sqrt(1.0 - abar_prev)) * eps
    return np.clip(a, -1.0, 1.0).reshape(b, policy.t_p, 2)


def ddim_sample(policy, stack, rng, n_steps: int = 16, hook=None) -> np.ndarray:
    return ddim_sample_batch(policy, stack, rng, n_steps, hook)[0]


def sample_chunk(policy, stack, rng, sampler: str = "ddpm", n_ddim: int = 16, hook=None) -> np.ndarray:
    if sampler == "ddpm":
        return ddpm_sample(policy, stack, rng, hook)
    if sampler == "ddim":
        return ddim_sample(policy, stack, rng, n_ddim, hook)
    raise ContractError(f"unknown sampler {sampler!r}")


@dataclass
class RolloutResult:
    trajectory: datamod.Trajectory
    n_plans: int


def act_receding_horizon(
    policy: DiffusionPolicy,
    seed: int,
    init_mode: str = envmod.IN_DIST,
    max_steps: int = envmod.STEP_CAP,
    sampler: str = "ddpm",
    n_ddim: int = 16,
    hook_provider=None,
    perturb_spec: envmod.PerturbSpec | None = None,
    perturb_rng: np.random.Generator | None = None,
) -> RolloutResult:
    """Receding-horizon execution: sample a chunk, run its first T_a actions,
    replan. ``hook_provider(stack, obs_flat) -> hook | None`` is consulted at
    every replan so steering can condition on the current observation."""
    state, obs = envmod.reset(seed, init_mode, policy.obs_mode)
    rng = np.random.default_rng(seed)
    history = [obs.flat] * policy.t_o
    obs_list = [obs.flat]
    acts: list[np.ndarray] = []
    success = False
    n_plans = 0
    while len(acts) < max_steps and not success:
        stack = np.concatenate(history).astype(np.float32)
        hook = hook_provider(stack, history[-1]) if hook_provider is not None else None
        chunk = sample_chunk(policy, stack, rng, sampler, n_ddim, hook)
        n_plans += 1
        for action in chunk[:policy.t_a]:
            action = np.asarray(action, dtype=np.float64)
            if perturb_spec is not None:
                action = envmod.perturb(action, perturb_spec, perturb_rng)
            state, obs, success = envmod.step(state, action, policy.obs_mode)
            history = history[1:] + [obs.flat]
            obs_list.append(obs.flat)
            acts.append(action)
            if success or len(acts) >= max_steps:
                break
    traj = datamod.Trajectory(
        obs=np.stack(obs_list),
        actions=np.array(acts, dtype=np.float32).reshape(len(acts), 2),
        success=success,
        seed=seed,
        init_mode=init_mode,
        obs_mode=policy.obs_mode,
    )
    return RolloutResult(trajectory=traj, n_plans=n_plans)
