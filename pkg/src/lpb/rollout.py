"""Checkpoint-scheduled rollout collection and dataset curation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as datamod
from . import env as envmod
from . import policy as polmod
from .errors import ContractError


@dataclass(frozen=True)
class RolloutSchedule:
    t0: int
    dt: int
    t_final: int
    n_per_ckpt: int

    def __post_init__(self):
        if self.t0 > self.t_final:
            raise ContractError(f"warm-up epoch {self.t0} exceeds final epoch {self.t_final}")
        if self.dt <= 0:
            raise ContractError(f"checkpoint interval must be positive, got {self.dt}")
        if self.n_per_ckpt <= 0:
            raise ContractError(f"episodes per checkpoint must be positive, got {self.n_per_ckpt}")

    @property
    def total_trajectories(self) -> int:
        return len(schedule_epochs(self)) * self.n_per_ckpt


def schedule_epochs(schedule: RolloutSchedule) -> list[int]:
    """Checkpoint epochs t0, t0+dt, ... capped at t_final inclusive."""
    return list(range(schedule.t0, schedule.t_final + 1, schedule.dt))


# Benchmark-scale schedule presets, kept for documentation and the
# schedule-arithmetic checks; the pointpush preset is the one actually run.
SCHEDULE_PRESETS: dict[str, RolloutSchedule] = {
    "pusht": RolloutSchedule(150, 40, 470, 30),
    "square": RolloutSchedule(70, 50, 470, 30),
    "toolhang": RolloutSchedule(70, 50, 270, 30),
    "transport": RolloutSchedule(70, 50, 270, 30),
    "libero10": RolloutSchedule(40, 40, 160, 50),
    "pointpush": RolloutSchedule(200, 200, 1600, 30),
}


def collect(
    checkpoints: dict[int, polmod.DiffusionPolicy],
    schedule: RolloutSchedule,
    seed_base: int = 0,
    sampler: str = "ddpm",
    n_ddim: int = 16,
    max_steps: int = envmod.STEP_CAP,
) -> datamod.CuratedDataset:
    """N seeded IN_DIST episodes per scheduled checkpoint; every trajectory
    is kept regardless of success, with provenance recording the epoch."""
    epochs = schedule_epochs(schedule)
    missing = [e for e in epochs if e not in checkpoints]
    if missing:
        raise ContractError(f"missing checkpoints for scheduled epochs {missing}")
    trajs = []
    prov = []
    for ci, epoch in enumerate(epochs):
        pol = checkpoints[epoch]
        for i in range(schedule.n_per_ckpt):
            seed = seed_base + ci * schedule.n_per_ckpt + i
            result = polmod.act_receding_horizon(
                pol, seed=seed, init_mode=envmod.IN_DIST, max_steps=max_steps,
                sampler=sampler, n_ddim=n_ddim)
            trajs.append(result.trajectory)
            prov.append(datamod.Provenance(
                origin="rollout", seed=seed, success=result.trajectory.success,
                checkpoint_epoch=epoch))
    return datamod.CuratedDataset(source=datamod.ROLLOUT_ONLY, trajectories=trajs, provenance=prov)


def _noisy_replay(demos: datamod.CuratedDataset, p: float, sigma: float, seed: int) -> datamod.CuratedDataset:
    """Re-execute the scripted expert from each demo's reset seed with
    per-step action noise. Closed-loop: perturbed actions change the states
    the expert reacts to, so observations stay consistent with actions."""
    rng = np.random.default_rng(seed)
    trajs = []
    prov = []
    for i, src in enumerate(demos.trajectories):
        spec = envmod.PerturbSpec(probability=p, sigma=sigma, seed=seed + i)
        traj = datamod.run_episode(
            lambda state, obs: envmod.scripted_expert(state),
            seed=src.seed, init_mode=src.init_mode, obs_mode=src.obs_mode,
            perturb_spec=spec, perturb_rng=rng)
        trajs.append(traj)
        prov.append(datamod.Provenance(origin="noisy_demo", seed=src.seed,
                                       success=traj.success, demo_id=i))
    return datamod.CuratedDataset(source=datamod.NOISY_DEMOS, trajectories=trajs, provenance=prov)


def _eps_greedy(
    final_policy: polmod.DiffusionPolicy,
    n_episodes: int,
    p: float,
    sigma: float,
    seed_base: int,
    sampler: str,
    n_ddim: int,
) -> datamod.CuratedDataset:
    rng = np.random.default_rng(seed_base)
    trajs = []
    prov = []
    for i in range(n_episodes):
        spec = envmod.PerturbSpec(probability=p, sigma=sigma, seed=seed_base + i)
        result = polmod.act_receding_horizon(
            final_policy, seed=seed_base + i, init_mode=envmod.IN_DIST,
            sampler=sampler, n_ddim=n_ddim, perturb_spec=spec, perturb_rng=rng)
        trajs.append(result.trajectory)
        prov.append(datamod.Provenance(origin="eps_greedy", seed=seed_base + i,
                                       success=result.trajectory.success))
    return datamod.CuratedDataset(source=datamod.EPS_GREEDY, trajectories=trajs, provenance=prov)


def curate(
    demos: datamod.CuratedDataset,
    rollouts: datamod.CuratedDataset | None,
    mode: str,
    noise_p: float = 0.3,
    noise_sigma: float = 0.3,
    seed: int = 0,
    final_policy: polmod.DiffusionPolicy | None = None,
    n_episodes: int | None = None,
    sampler: str = "ddpm",
    n_ddim: int = 16,
) -> datamod.CuratedDataset:
    """Assemble a training dataset per source-variant tag."""
    if mode == datamod.MIXED:
        if rollouts is None:
            raise ContractError("MIXED curation needs rollouts")
        return datamod.CuratedDataset(
            source=datamod.MIXED,
            trajectories=demos.trajectories + rollouts.trajectories,
            provenance=demos.provenance + rollouts.provenance)
    if mode == datamod.FILTERED:
        if rollouts is None:
            raise ContractError("FILTERED curation needs rollouts")
        keep = [i for i, pr in enumerate(rollouts.provenance) if pr.success]
        return datamod.CuratedDataset(
            source=datamod.FILTERED,
            trajectories=demos.trajectories + [rollouts.trajectories[i] for i in keep],
            provenance=demos.provenance + [rollouts.provenance[i] for i in keep])
    if mode == datamod.NOISY_DEMOS:
        return _noisy_replay(demos, noise_p, noise_sigma, seed)
    if mode == datamod.EPS_GREEDY:
        if final_policy is None:
            raise ContractError("EPS_GREEDY curation needs the final policy checkpoint")
        n = n_episodes if n_episodes is not None else len(demos)
        return _eps_greedy(final_policy, n, noise_p, noise_sigma, seed, sampler, n_ddim)
    raise ContractError(f"unknown curation mode {mode!r}")
