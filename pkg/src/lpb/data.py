"""Trajectory records, demo generation, and training-window extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env as envmod
from .errors import ContractError

EXPERT = "EXPERT"
MIXED = "MIXED"
FILTERED = "FILTERED"
NOISY_DEMOS = "NOISY_DEMOS"
EPS_GREEDY = "EPS_GREEDY"
ROLLOUT_ONLY = "ROLLOUT_ONLY"

SOURCE_TAGS = (EXPERT, MIXED, FILTERED, NOISY_DEMOS, EPS_GREEDY, ROLLOUT_ONLY)


@dataclass
class Trajectory:
    """One episode: L executed actions and the L+1 observations around them."""

    obs: np.ndarray          # (L+1, obs_dim) float32
    actions: np.ndarray      # (L, 2) float32
    success: bool
    seed: int
    init_mode: str
    obs_mode: str

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.obs.ndim != 2 or self.actions.ndim != 2 or self.actions.shape[1] != 2:
            raise ContractError(
                f"trajectory arrays malformed: obs {self.obs.shape}, actions {self.actions.shape}")
        if self.obs.shape[0] != self.actions.shape[0] + 1:
            raise ContractError(
                f"need one more observation than actions, got {self.obs.shape[0]} vs {self.actions.shape[0]}")

    @property
    def length(self) -> int:
        return self.actions.shape[0]


@dataclass
class Provenance:
    origin: str              # "demo" | "rollout" | "noisy_demo" | "eps_greedy"
    seed: int
    success: bool
    checkpoint_epoch: int = -1   # -1 when not from a checkpoint rollout
    demo_id: int = -1            # -1 when not demo-derived


@dataclass
class CuratedDataset:
    source: str
    trajectories: list[Trajectory]
    provenance: list[Provenance] = field(default_factory=list)

    def __post_init__(self):
        if self.source not in SOURCE_TAGS:
            raise ContractError(f"unknown dataset source tag {self.source!r}")
        if len(self.provenance) != len(self.trajectories):
            raise ContractError(
                f"provenance count {len(self.provenance)} != trajectory count {len(self.trajectories)}")

    def __len__(self) -> int:
        return len(self.trajectories)


def run_episode(
    action_fn,
    seed: int,
    init_mode: str = envmod.IN_DIST,
    obs_mode: str = envmod.VECTOR,
    max_steps: int = envmod.STEP_CAP,
    perturb_spec: envmod.PerturbSpec | None = None,
    perturb_rng: np.random.Generator | None = None,
) -> Trajectory:
    """Roll ``action_fn(state, obs) -> 2-vector`` until success or cap."""
    state, obs = envmod.reset(seed, init_mode, obs_mode)
    obs_list = [obs.flat]
    acts = []
    success = False
    for _ in range(max_steps):
        action = np.asarray(action_fn(state, obs), dtype=np.float64)
        if perturb_spec is not None:
            action = envmod.perturb(action, perturb_spec, perturb_rng)
        action = np.clip(action, -1.0, 1.0)
        state, obs, success = envmod.step(state, action, obs_mode)
        obs_list.append(obs.flat)
        acts.append(action)
        if success:
            break
    return Trajectory(
        obs=np.stack(obs_list),
        actions=np.array(acts, dtype=np.float32).reshape(len(acts), 2),
        success=success,
        seed=seed,
        init_mode=init_mode,
        obs_mode=obs_mode,
    )


def gen_demos(n: int, seed_base: int = 0, obs_mode: str = envmod.VECTOR) -> CuratedDataset:
    """Scripted-expert demonstrations from IN_DIST resets."""
    if n <= 0:
        raise ContractError(f"demo count must be positive, got {n}")
    trajs = []
    prov = []
    for i in range(n):
        traj = run_episode(lambda state, obs: envmod.scripted_expert(state),
                           seed=seed_base + i, obs_mode=obs_mode)
        trajs.append(traj)
        prov.append(Provenance(origin="demo", seed=seed_base + i,
                               success=traj.success, demo_id=i))
    return CuratedDataset(source=EXPERT, trajectories=trajs, provenance=prov)


def stack_obs(obs: np.ndarray, t: int, t_o: int) -> np.ndarray:
    """Flattened window of the T_o observations ending at index t,
    edge-replicated before the episode start."""
    idx = np.clip(np.arange(t - t_o + 1, t + 1), 0, obs.shape[0] - 1)
    return obs[idx].reshape(-1)


def bc_windows(trajs: list[Trajectory], t_o: int, t_p: int) -> tuple[np.ndarray, np.ndarray]:
    """Policy-training windows: one per executed step, with observation
    history and action chunk edge-replicated at episode boundaries.
    Returns (obs_stacks (N, t_o*obs_dim), chunks (N, t_p, 2))."""
    if not trajs:
        raise ContractError("window extraction needs at least one trajectory")
    stacks = []
    chunks = []
    for traj in trajs:
        L = traj.length
        for t in range(L):
            stacks.append(stack_obs(traj.obs, t, t_o))
            a_idx = np.clip(np.arange(t, t + t_p), 0, L - 1)
            chunks.append(traj.actions[a_idx])
    return np.stack(stacks).astype(np.float32), np.stack(chunks).astype(np.float32)


def dyn_windows(trajs: list[Trajectory], t_o: int, t_p: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dynamics-training windows (O_t stack, A_t chunk, o_{t+T_p}); windows
    that would cross the trajectory end are dropped rather than padded.
    Returns (obs_stacks, chunks, future_obs)."""
    if not trajs:
        raise ContractError("window extraction needs at least one trajectory")
    stacks = []
    chunks = []
    futures = []
    for traj in trajs:
        L = traj.length
        for t in range(0, L - t_p + 1):
            stacks.append(stack_obs(traj.obs, t, t_o))
            chunks.append(traj.actions[t:t + t_p])
            futures.append(traj.obs[t + t_p])
    if not stacks:
        raise ContractError(
            f"no full windows: all trajectories shorter than the {t_p}-step horizon")
    return (np.stack(stacks).astype(np.float32),
            np.stack(chunks).astype(np.float32),
            np.stack(futures).astype(np.float32))
