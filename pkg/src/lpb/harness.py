"""Seeded evaluation campaigns, ablation sweeps, and steering traces.

Every campaign derives episode seeds as ``seed_base + episode_index``, so any
two methods evaluated with the same spec face identical environment draws and
identical perturbation streams; differences in outcome are attributable to the
method. Reports carry per-episode outcomes so paired statistics stay exact.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import barrier as barmod
from . import data as datamod
from . import dynamics as dynmod
from . import env as envmod
from . import nn, optim, plotting
from . import policy as polmod
from .errors import ContractError

EXPERT_BC = "EXPERT_BC"
MIXED_BC = "MIXED_BC"
FILTERED_BC = "FILTERED_BC"
LPB = "LPB"
LPB_MPC = "LPB_MPC"
LPB_GD = "LPB_GD"
METHODS = (EXPERT_BC, MIXED_BC, FILTERED_BC, LPB, LPB_MPC, LPB_GD)
_BC_METHODS = (EXPERT_BC, MIXED_BC, FILTERED_BC)
_LPB_METHODS = (LPB, LPB_MPC, LPB_GD)

PERTURB_P = "PERTURB_P"
DEMO_FRACTION = "DEMO_FRACTION"
ROLLOUT_COUNT = "ROLLOUT_COUNT"
ETA = "ETA"
K_GUIDE = "K_GUIDE"
SWEEP_AXES = (PERTURB_P, DEMO_FRACTION, ROLLOUT_COUNT, ETA, K_GUIDE)

# Scripted-controller sentinel: protocol tests can drop it into a checkpoint
# slot to evaluate the environment's built-in expert through the same plumbing.
SCRIPTED = "scripted"

# Dedicated stream tag so perturbation noise is decoupled from the policy's
# own sampling randomness but still fully determined by the episode seed.
_PERTURB_STREAM = 0x5EED


@dataclass(frozen=True)
class EvalSpec:
    """What to evaluate: method, campaign size, initial-state distribution,
    optional action perturbation, seeding, and how many of the final
    checkpoints to average over."""
    method: str
    episodes: int
    init_mode: str = envmod.IN_DIST
    perturbation: envmod.PerturbSpec | None = None
    seed_base: int = 0
    final_k: int = 3
    max_steps: int = envmod.STEP_CAP

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.episodes < 1:
            raise ContractError(f"episode count must be >= 1, got {self.episodes}")
        if self.final_k < 1:
            raise ContractError(f"checkpoint selection must keep >= 1 checkpoints, got {self.final_k}")
        if self.init_mode not in (envmod.IN_DIST, envmod.OOD):
            raise ContractError(f"unknown init mode {self.init_mode!r}")


@dataclass
class EvalArtifacts:
    """Trained pieces a campaign runs on. BC methods only need checkpoints;
    the steering variants additionally need the dynamics model, the expert
    latent index, and a guidance configuration."""
    checkpoints: dict
    dynamics: dynmod.DynamicsModel | None = None
    index: barmod.ExpertLatentIndex | None = None
    guidance: barmod.GuidanceConfig | None = None


@dataclass
class SuccessReport:
    method: str
    init_mode: str
    episodes: int
    seed_base: int
    perturb_p: float
    perturb_sigma: float
    checkpoint_epochs: list[int]
    rates: list[float]
    mean: float
    std: float
    outcomes: np.ndarray          # (n_checkpoints, episodes) float32 in {0,1}
    seeds: np.ndarray             # (episodes,) int64
    wall_clock_s: float = 0.0

    def __post_init__(self):
        self.outcomes = np.asarray(self.outcomes, dtype=np.float32)
        self.seeds = np.asarray(self.seeds, dtype=np.int64)
        if self.outcomes.shape != (len(self.checkpoint_epochs), self.episodes):
            raise ContractError(
                f"outcome table shape {self.outcomes.shape} != "
                f"({len(self.checkpoint_epochs)}, {self.episodes})")
        for r in self.rates:
            if not 0.0 <= r <= 1.0:
                raise ContractError(f"success rate {r} outside [0, 1]")


def _recompute_summary(rates: list[float]) -> tuple[float, float]:
    arr = np.asarray(rates, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def perturb_rng_for(seed: int) -> np.random.Generator:
    """The perturbation stream other modules must use to stay paired with
    harness campaigns at the same episode seed."""
    return np.random.default_rng([seed, _PERTURB_STREAM])


def _require(artifacts: EvalArtifacts, method: str) -> None:
    if not artifacts.checkpoints:
        raise ContractError(f"missing artifact: policy checkpoints (method {method})")
    if method in _LPB_METHODS:
        if artifacts.dynamics is None:
            raise ContractError(f"missing artifact: dynamics model (method {method})")
        if artifacts.index is None:
            raise ContractError(f"missing artifact: expert latent index (method {method})")
        if artifacts.guidance is None:
            raise ContractError(f"missing artifact: guidance config (method {method})")


def _chunked_rollout(policy, chunk_fn, seed, init_mode, max_steps, perturb_spec, perturb_rng) -> bool:
    """Receding-horizon loop around an arbitrary chunk producer."""
    state, obs = envmod.reset(seed, init_mode, policy.obs_mode)
    rng = np.random.default_rng(seed)
    history = [obs.flat] * policy.t_o
    steps = 0
    success = False
    while steps < max_steps and not success:
        stack = np.concatenate(history).astype(np.float32)
        chunk = chunk_fn(stack, history[-1], rng)
        for action in chunk[:policy.t_a]:
            action = np.asarray(action, dtype=np.float64)
            if perturb_spec is not None:
                action = envmod.perturb(action, perturb_spec, perturb_rng)
            state, obs, success = envmod.step(state, action, policy.obs_mode)
            history = history[1:] + [obs.flat]
            steps += 1
            if success or steps >= max_steps:
                break
    return success


def _run_episode(
    spec: EvalSpec,
    artifacts: EvalArtifacts,
    policy,
    seed: int,
    mpc_candidates: int,
    gd_steps: int,
    gd_step_size: float,
) -> bool:
    prng = perturb_rng_for(seed) if spec.perturbation is not None else None
    if isinstance(policy, str) and policy == SCRIPTED:
        traj = datamod.run_episode(
            lambda state, obs: envmod.scripted_expert(state),
            seed=seed, init_mode=spec.init_mode, max_steps=spec.max_steps,
            perturb_spec=spec.perturbation, perturb_rng=prng)
        return traj.success
    if spec.method in _BC_METHODS:
        result = polmod.act_receding_horizon(
            policy, seed=seed, init_mode=spec.init_mode, max_steps=spec.max_steps,
            perturb_spec=spec.perturbation, perturb_rng=prng)
        return result.trajectory.success
    model, index, cfg = artifacts.dynamics, artifacts.index, artifacts.guidance
    if spec.method == LPB:
        result, _ = barmod.lpb_rollout(
            policy, model, index, cfg, seed=seed, init_mode=spec.init_mode,
            max_steps=spec.max_steps, perturb_spec=spec.perturbation, perturb_rng=prng)
        return result.trajectory.success
    if spec.method == LPB_MPC:
        def chunk_fn(stack, obs_flat, rng):
            return barmod.mpc_act(policy, model, index, mpc_candidates,
                                  stack, obs_flat, rng, cfg.sampler, cfg.n_ddim)
    else:
        def chunk_fn(stack, obs_flat, rng):
            return barmod.gd_act(policy, model, index, gd_steps, gd_step_size,
                                 stack, obs_flat, rng, cfg.sampler, cfg.n_ddim)
    return _chunked_rollout(policy, chunk_fn, seed, spec.init_mode,
                            spec.max_steps, spec.perturbation, prng)


def run_eval(
    spec: EvalSpec,
    artifacts: EvalArtifacts,
    mpc_candidates: int = 16,
    gd_steps: int = 8,
    gd_step_size: float = 0.05,
) -> SuccessReport:
    """One campaign: the final ``spec.final_k`` checkpoints each run
    ``spec.episodes`` seeded episodes; rates are averaged across checkpoints.
    Identical specs and artifacts give identical reports (wall-clock aside)."""
    _require(artifacts, spec.method)
    t0 = time.perf_counter()
    epochs = sorted(artifacts.checkpoints)[-spec.final_k:]
    seeds = np.arange(spec.episodes, dtype=np.int64) + spec.seed_base
    outcomes = np.zeros((len(epochs), spec.episodes), dtype=np.float32)
    for ci, epoch in enumerate(epochs):
        policy = artifacts.checkpoints[epoch]
        for i, seed in enumerate(seeds):
            ok = _run_episode(spec, artifacts, policy, int(seed),
                              mpc_candidates, gd_steps, gd_step_size)
            outcomes[ci, i] = 1.0 if ok else 0.0
    rates = [float(outcomes[ci].mean()) for ci in range(len(epochs))]
    mean, std = _recompute_summary(rates)
    p = spec.perturbation.probability if spec.perturbation is not None else 0.0
    sigma = spec.perturbation.sigma if spec.perturbation is not None else 0.0
    return SuccessReport(
        method=spec.method, init_mode=spec.init_mode, episodes=spec.episodes,
        seed_base=spec.seed_base, perturb_p=float(p), perturb_sigma=float(sigma),
        checkpoint_epochs=[int(e) for e in epochs], rates=rates, mean=mean, std=std,
        outcomes=outcomes, seeds=seeds, wall_clock_s=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# statistics helpers

def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion (95% by default)."""
    if n <= 0:
        raise ContractError("interval needs n >= 1")
    phat = successes / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return center - half, center + half


def _ranks(v: np.ndarray) -> np.ndarray:
    """Average ranks (ties share the mean of their positional ranks)."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Rank correlation with average-rank tie handling."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ContractError(f"rank correlation needs two equal 1-d arrays of length >= 2, got {x.shape} and {y.shape}")
    rx, ry = _ranks(x), _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return 0.0
    return float(rx @ ry) / denom


def paired_gap_ci95(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """Mean difference a - b over paired binary outcomes with a normal-
    approximation 95% interval on the paired differences."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or len(a) < 2:
        raise ContractError("paired gap needs two aligned outcome vectors of length >= 2")
    d = a - b
    mean = float(d.mean())
    half = 1.959963984540054 * float(d.std(ddof=1)) / math.sqrt(len(d))
    return mean, mean - half, mean + half


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class SweepCell:
    value: float
    report: SuccessReport | None
    error: str = ""


def _cell_spec(axis: str, value, base: EvalSpec) -> EvalSpec:
    if axis == PERTURB_P:
        old = base.perturbation
        sigma = old.sigma if old is not None else 0.3
        pseed = old.seed if old is not None else 0
        return dataclasses.replace(
            base, perturbation=envmod.PerturbSpec(probability=float(value), sigma=sigma, seed=pseed))
    return base


def _cell_artifacts(axis: str, value, artifacts: EvalArtifacts, builder) -> EvalArtifacts:
    if axis in (DEMO_FRACTION, ROLLOUT_COUNT):
        if builder is None:
            raise ContractError(f"axis {axis} retrains artifacts; pass builder=callable(value)")
        return builder(value)
    if axis == ETA:
        g = dataclasses.replace(artifacts.guidance, eta=float(value)) if artifacts.guidance else None
        return dataclasses.replace(artifacts, guidance=g)
    if axis == K_GUIDE:
        g = dataclasses.replace(artifacts.guidance, k_guide=int(value)) if artifacts.guidance else None
        return dataclasses.replace(artifacts, guidance=g)
    return artifacts


def sweep(
    axis: str,
    values,
    base_spec: EvalSpec,
    artifacts: EvalArtifacts,
    builder=None,
    out_dir: str | None = None,
    stem: str | None = None,
) -> list[SweepCell]:
    """One campaign per axis value with shared episode seeds across values.
    A failing cell records its error and the sweep moves on. When ``out_dir``
    is given, a CSV table and an SVG curve are written next to each other."""
    if axis not in SWEEP_AXES:
        raise ContractError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ContractError("sweep needs at least one value")
    cells: list[SweepCell] = []
    for value in values:
        try:
            spec = _cell_spec(axis, value, base_spec)
            arts = _cell_artifacts(axis, value, artifacts, builder)
            cells.append(SweepCell(value=float(value), report=run_eval(spec, arts)))
        except ContractError as exc:
            cells.append(SweepCell(value=float(value), report=None, error=str(exc)))
    if out_dir is not None:
        stem = stem or f"sweep_{axis.lower()}"
        write_sweep_csv(cells, base_spec, os.path.join(out_dir, stem + ".csv"))
        xs = [c.value for c in cells if c.report is not None]
        ys = [c.report.mean for c in cells if c.report is not None]
        if xs:
            plotting.line_chart(
                [(base_spec.method, xs, ys)],
                os.path.join(out_dir, stem + ".svg"),
                title=f"{axis} sweep", xlabel=axis.lower(), ylabel="success rate")
    return cells


def write_sweep_csv(cells: list[SweepCell], spec: EvalSpec, path: str) -> None:
    """One row per cell: axis value, method, mean, sigma, episodes, seed base."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "method", "mean", "std", "episodes", "seed_base"])
        for c in cells:
            if c.report is None:
                w.writerow([f"{c.value:g}", spec.method, "nan", "nan", spec.episodes, spec.seed_base])
            else:
                w.writerow([f"{c.value:g}", c.report.method, f"{c.report.mean:.6f}",
                            f"{c.report.std:.6f}", c.report.episodes, c.report.seed_base])


# ---------------------------------------------------------------------------
# steering traces

def trace_episode(
    artifacts: EvalArtifacts,
    seed: int,
    init_mode: str = envmod.OOD,
    out_dir: str | None = None,
    stem: str | None = None,
) -> tuple[barmod.SteeringTrace, list[dict]]:
    """One steered episode with the per-replan score record exposed: the OOD
    score, the active flag, pre/post predicted scores, and the identity of
    the nearest expert latent. Optionally writes trace.csv and trace.svg."""
    _require(artifacts, LPB)
    epoch = sorted(artifacts.checkpoints)[-1]
    policy = artifacts.checkpoints[epoch]
    result, trace = barmod.lpb_rollout(
        policy, artifacts.dynamics, artifacts.index, artifacts.guidance,
        seed=seed, init_mode=init_mode)
    frames: list[dict] = []
    step = 0
    for pi, rec in enumerate(trace.records):
        frames.append({
            "plan": pi,
            "env_step": step,
            "delta": rec.delta,
            "active": int(rec.active),
            "delta_pre": rec.delta_pre,
            "delta_post": rec.delta_post,
            "nearest_idx": rec.nearest_idx,
            "fallback": int(rec.fallback),
            "executed": len(rec.actions),
            "success": int(result.trajectory.success),
        })
        step += len(rec.actions)
    if out_dir is not None:
        stem = stem or f"trace_seed{seed}"
        path = os.path.join(out_dir, stem + ".csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(frames[0].keys()))
            w.writeheader()
            w.writerows(frames)
        xs = [float(f["env_step"]) for f in frames]
        plotting.line_chart(
            [("delta", xs, [f["delta"] for f in frames])],
            os.path.join(out_dir, stem + ".svg"),
            title=f"OOD score, seed {seed}", xlabel="env step", ylabel="delta",
            hlines=[("tau", trace.tau)] if math.isfinite(trace.tau) else None)
    return trace, frames


# ---------------------------------------------------------------------------
# latent-space comparison

BC_ENCODER = "BC"
RECON_ENCODER = "RECON"


def train_recon_encoder(
    demos: datamod.CuratedDataset,
    t_o: int,
    latent_dim: int,
    hidden: tuple[int, ...] = (128, 128),
    epochs: int = 60,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> nn.Mlp:
    """Autoencoder alternative latent space: encoder to ``latent_dim`` plus a
    mirrored decoder trained to reconstruct expert observation stacks under
    MSE; only the encoder is returned."""
    stacks, _ = datamod.bc_windows(demos.trajectories, t_o, 1)
    in_dim = stacks.shape[1]
    rng = np.random.default_rng(seed)
    encoder = nn.mlp_init((in_dim, *hidden, latent_dim), activation="tanh", rng=rng)
    decoder = nn.mlp_init((latent_dim, *hidden[::-1], in_dim), activation="tanh", rng=rng)
    params = encoder.parameters() + decoder.parameters()
    opt = optim.adam_init(params, lr=lr)
    order_rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        order = order_rng.permutation(len(stacks))
        for lo in range(0, len(order), batch_size):
            batch = stacks[order[lo:lo + batch_size]]
            tape = ad.Tape()
            x = ad.Tensor(batch)
            z = nn.forward(encoder, x, tape)
            xhat = nn.forward(decoder, z, tape)
            loss = ad.mse(xhat, x, tape)
            grads = tape.backward(loss)
            optim.adam_step(params, [grads[p] for p in params], opt)
    return encoder


def compare_latent_spaces(
    base_spec: EvalSpec,
    demos: datamod.CuratedDataset,
    dyn_data: datamod.CuratedDataset,
    artifacts: EvalArtifacts,
    variants: tuple[str, ...] = (BC_ENCODER, RECON_ENCODER),
    dyn_epochs: int = 100,
    tau_quantile: float = 95.0,
    seed: int = 0,
) -> list[tuple[str, SuccessReport]]:
    """Paired campaigns for the base (unsteered) policy and steered variants
    whose latent space comes from either the policy's own encoder or a
    reconstruction-trained one. Each variant rebuilds its index, dynamics
    model, and threshold inside its own latent space."""
    _require(artifacts, LPB)
    epoch = sorted(artifacts.checkpoints)[-1]
    policy = artifacts.checkpoints[epoch]
    base = dataclasses.replace(base_spec, method=EXPERT_BC)
    rows = [("BASE", run_eval(base, artifacts))]
    steer = dataclasses.replace(base_spec, method=LPB)
    for variant in variants:
        if variant == BC_ENCODER:
            arts = artifacts
        elif variant == RECON_ENCODER:
            encoder = train_recon_encoder(demos, policy.t_o, policy.latent_dim, seed=seed)
            index = _index_from_encoder(encoder, policy.t_o, demos, artifacts.index.backend)
            model = dynmod.make_dynamics(policy, seed=seed, encoder=encoder)
            model, _ = dynmod.dyn_train(model, [demos, dyn_data],
                                        dynmod.DynTrainConfig(epochs=dyn_epochs, seed=seed))
            frames = np.concatenate([t.obs for t in demos.trajectories])
            latents = dynmod.encode_frames(model, frames)
            tau = barmod.calibrate_tau(index, latents, tau_quantile)
            g = dataclasses.replace(artifacts.guidance, tau=tau)
            arts = EvalArtifacts(checkpoints=artifacts.checkpoints, dynamics=model,
                                 index=index, guidance=g)
        else:
            raise ContractError(f"unknown encoder variant {variant!r}")
        rows.append((variant, run_eval(steer, arts)))
    return rows


def _index_from_encoder(encoder: nn.Mlp, t_o: int, demos: datamod.CuratedDataset,
                        backend: str) -> barmod.ExpertLatentIndex:
    frames = np.concatenate([t.obs for t in demos.trajectories]).astype(np.float32)
    stacks = np.tile(frames, (1, t_o))
    latents = nn.forward(encoder, ad.Tensor(stacks), None).data
    return barmod.build_index(latents, backend)
