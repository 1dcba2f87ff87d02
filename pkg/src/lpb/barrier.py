"""Latent steering around the expert manifold.

An index over encoded expert observations defines an OOD score (squared
distance to the nearest expert latent). When the score of the current
observation exceeds a calibrated threshold, the diffusion sampler's noise
prediction is corrected with the gradient of the score of the *predicted
future* latent with respect to the action chunk, pulling sampled actions
back toward states the expert has visited. Candidate-sampling (MPC-style)
and direct gradient-descent variants of the same objective are included
for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import dynamics as dynmod
from . import env as envmod
from . import policy as polmod
from .autodiff import Tape, Tensor
from .errors import ContractError, NumericError

BRUTE = "BRUTE"
KDTREE = "KDTREE"
_LEAF_SIZE = 48


class _KdNode:
    __slots__ = ("axis", "split", "left", "right", "indices")

    def __init__(self, axis=-1, split=0.0, left=None, right=None, indices=None):
        self.axis = axis
        self.split = split
        self.left = left
        self.right = right
        self.indices = indices


def _kd_build(points: np.ndarray, indices: np.ndarray, depth: int) -> _KdNode:
    if indices.size <= _LEAF_SIZE:
        return _KdNode(indices=indices)
    axis = depth % points.shape[1]
    order = indices[np.argsort(points[indices, axis], kind="stable")]
    mid = indices.size // 2
    # Points equal to the split value may land on either side; the search
    # bounds below use non-strict comparisons, so correctness holds.
    split = float(points[order[mid], axis])
    return _KdNode(axis=axis, split=split,
                   left=_kd_build(points, order[:mid], depth + 1),
                   right=_kd_build(points, order[mid:], depth + 1))


def _leaf_best(points: np.ndarray, indices: np.ndarray, q: np.ndarray) -> tuple[float, int]:
    d = np.sum((points[indices] - q) ** 2, axis=1)
    dmin = d.min()
    return float(dmin), int(indices[d == dmin].min())


def _kd_query(points: np.ndarray, node: _KdNode, q: np.ndarray, best: tuple[float, int]) -> tuple[float, int]:
    if node.indices is not None:
        dist, idx = _leaf_best(points, node.indices, q)
        if dist < best[0] or (dist == best[0] and idx < best[1]):
            return (dist, idx)
        return best
    diff = float(q[node.axis]) - node.split
    near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
    best = _kd_query(points, near, q, best)
    # Visit the far side whenever it could hold an equal-distance point, so
    # the lowest-index tie rule survives pruning.
    if diff * diff <= best[0]:
        best = _kd_query(points, far, q, best)
    return best


@dataclass
class ExpertLatentIndex:
    points: np.ndarray       # (M, D) float64
    backend: str
    _tree: _KdNode | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def build_index(points: np.ndarray, backend: str = BRUTE) -> ExpertLatentIndex:
    """Exact 1-nearest-neighbor index under squared Euclidean distance.
    Both backends break distance ties by the lowest point index."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ContractError(f"index needs an (M>=1, D) matrix, got shape {np.asarray(points).shape}")
    if backend == BRUTE:
        return ExpertLatentIndex(points=pts, backend=backend)
    if backend == KDTREE:
        tree = _kd_build(pts, np.arange(pts.shape[0]), 0)
        return ExpertLatentIndex(points=pts, backend=backend, _tree=tree)
    raise ContractError(f"unknown index backend {backend!r}")


def nearest(index: ExpertLatentIndex, z: np.ndarray) -> tuple[int, float]:
    """(nearest point index, squared distance)."""
    q = np.asarray(z, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ContractError(f"query dim {q.shape[0]} != index dim {index.dim}")
    if index.backend == BRUTE:
        d = np.sum((index.points - q) ** 2, axis=1)
        dmin = d.min()
        return int(np.flatnonzero(d == dmin).min()), float(dmin)
    dist, idx = _kd_query(index.points, index._tree, q, (math.inf, -1))
    return idx, dist


def ood_score(index: ExpertLatentIndex, z: np.ndarray) -> float:
    """Squared distance from z to its nearest expert latent."""
    return nearest(index, z)[1]


def ood_scores(index: ExpertLatentIndex, zs: np.ndarray) -> np.ndarray:
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    if index.backend == BRUTE:
        if zs.shape[1] != index.dim:
            raise ContractError(f"query dim {zs.shape[1]} != index dim {index.dim}")
        d = np.sum(zs * zs, axis=1, keepdims=True) - 2.0 * zs @ index.points.T \
            + np.sum(index.points * index.points, axis=1)
        return np.maximum(d.min(axis=1), 0.0)
    return np.array([ood_score(index, z) for z in zs])


def build_expert_index(policy: polmod.DiffusionPolicy, demos: datamod.CuratedDataset,
                       backend: str = BRUTE) -> ExpertLatentIndex:
    """Encode every expert observation (single-frame convention) into the
    searchable latent set."""
    if len(demos) == 0:
        raise ContractError("expert index needs at least one demonstration")
    frames = np.concatenate([traj.obs for traj in demos.trajectories])
    stacks = np.tile(frames.astype(np.float32), (1, policy.t_o))
    latents = polmod.encode_stack(policy, stacks).data
    return build_index(latents, backend)


def calibrate_tau(index: ExpertLatentIndex, latents: np.ndarray, q: float = 95.0) -> float:
    """q-th percentile (linear interpolation) of nonzero OOD scores over a
    calibration latent set."""
    latents = np.atleast_2d(np.asarray(latents))
    if latents.shape[0] == 0:
        raise ContractError("tau calibration needs a nonempty latent set")
    if not 0.0 < q <= 100.0:
        raise ContractError(f"percentile must lie in (0, 100], got {q}")
    scores = ood_scores(index, latents)
    nonzero = scores[scores > 0.0]
    if nonzero.size == 0:
        raise ContractError("all calibration scores are exactly zero; nothing to calibrate on")
    return float(np.percentile(nonzero, q))


@dataclass(frozen=True)
class GuidanceConfig:
    eta: float = 0.05
    tau: float = math.inf
    k_guide: int = 10
    sampler: str = "ddpm"
    n_ddim: int = 16

    def __post_init__(self):
        if self.eta < 0:
            raise ContractError(f"guidance scale must be >= 0, got {self.eta}")
        if self.tau < 0:
            raise ContractError(f"OOD threshold must be >= 0, got {self.tau}")
        if self.k_guide < 0:
            raise ContractError(f"guided step count must be >= 0, got {self.k_guide}")
        if self.sampler not in ("ddpm", "ddim"):
            raise ContractError(f"unknown sampler {self.sampler!r}")


def guided_noise(
    a_flat: np.ndarray,
    k: int,
    z_t: np.ndarray,
    eps: np.ndarray,
    model: dynmod.DynamicsModel,
    index: ExpertLatentIndex,
    eta: float,
    schedule: polmod.DdpmSchedule,
) -> np.ndarray:
    """Correct the predicted noise with the score gradient: the predicted
    future latent's squared distance to its nearest expert latent is
    differentiated with respect to the noisy chunk, with the neighbor held
    fixed for this step (recomputed fresh at every denoising step)."""
    a_flat = np.asarray(a_flat, dtype=np.float32).reshape(-1)
    if a_flat.shape != eps.shape:
        raise ContractError(f"chunk shape {a_flat.shape} != noise shape {np.asarray(eps).shape}")
    tape = Tape()
    a_t = Tensor(a_flat)
    pred = dynmod.predict(model, Tensor(np.asarray(z_t, dtype=np.float32)), a_t, tape)
    nn_idx = nearest(index, pred.data)[0]  # freeze the neighbor for this step
    neighbor = Tensor(index.points[nn_idx].astype(np.float32))
    delta = ad.sq_dist(pred, neighbor, tape)
    grad = tape.backward(delta)[a_t].data
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite guidance gradient at step k={k}")
    # the reverse update subtracts a positive multiple of the predicted noise,
    # so adding the gradient here moves the denoised chunk DOWN the score slope
    coef = float(eta) * float(math.sqrt(1.0 - schedule.abar(k)))
    return eps + coef * grad


@dataclass
class StepRecord:
    delta: float             # OOD score of the current observation
    active: bool             # exactly (delta > tau)
    delta_pre: float         # predicted future score of the paired unguided chunk
    delta_post: float        # predicted future score of the executed chunk
    nearest_idx: int         # nearest expert latent of the current observation
    actions: np.ndarray      # actions executed after this decision
    fallback: bool = False   # guidance aborted by a numeric failure


@dataclass
class SteeringTrace:
    tau: float
    records: list[StepRecord] = field(default_factory=list)

    def any_active(self) -> bool:
        return any(r.active for r in self.records)

    def recovered(self) -> bool:
        """Did the score cross the threshold from above to below?"""
        above = False
        for r in self.records:
            if r.delta > self.tau:
                above = True
            elif above:
                return True
        return False


def _clone_rng(rng: np.random.Generator) -> np.random.Generator:
    twin = np.random.default_rng()
    twin.bit_generator.state = rng.bit_generator.state
    return twin


def _predicted_score(model, index, z_t, chunk) -> float:
    z_hat = dynmod.predict(model, np.asarray(z_t, dtype=np.float32), chunk).data
    return ood_score(index, z_hat)


def lpb_act(
    policy: polmod.DiffusionPolicy,
    model: dynmod.DynamicsModel,
    index: ExpertLatentIndex,
    cfg: GuidanceConfig,
    stack: np.ndarray,
    obs_flat: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, StepRecord]:
    """One steering decision: score the current observation, sample the
    chunk with guidance active on the last k_guide (lowest-noise) denoising
    steps when the score exceeds tau, and record pre/post predicted scores
    (the pre side comes from a paired unguided sample drawn from a cloned
    random stream, so the main stream is untouched by tracing)."""
    if policy.latent_dim != model.latent_dim or index.dim != model.latent_dim:
        raise ContractError(
            f"latent dims disagree: policy {policy.latent_dim}, dynamics {model.latent_dim}, index {index.dim}")
    z_t = dynmod.encode_frame(model, obs_flat)
    nn_idx, delta = nearest(index, z_t)
    active = delta > cfg.tau
    fallback = False

    if active and cfg.k_guide > 0:
        state = {"fallback": False}

        def hook(a_flat, k, eps):
            if k > cfg.k_guide:
                return eps
            try:
                return guided_noise(a_flat, k, z_t, eps, model, index, cfg.eta, policy.schedule)
            except NumericError:
                state["fallback"] = True
                return eps

        twin = _clone_rng(rng)
        chunk = polmod.sample_chunk(policy, stack, rng, cfg.sampler, cfg.n_ddim, hook)
        unguided = polmod.sample_chunk(policy, stack, twin, cfg.sampler, cfg.n_ddim, None)
        fallback = state["fallback"]
        delta_pre = _predicted_score(model, index, z_t, unguided)
        delta_post = _predicted_score(model, index, z_t, chunk)
    else:
        chunk = polmod.sample_chunk(policy, stack, rng, cfg.sampler, cfg.n_ddim, None)
        delta_pre = delta_post = _predicted_score(model, index, z_t, chunk)

    record = StepRecord(delta=delta, active=active, delta_pre=delta_pre,
                        delta_post=delta_post, nearest_idx=nn_idx,
                        actions=np.empty((0, 2)), fallback=fallback)
    return chunk, record


def lpb_rollout(
    policy: polmod.DiffusionPolicy,
    model: dynmod.DynamicsModel,
    index: ExpertLatentIndex,
    cfg: GuidanceConfig,
    seed: int,
    init_mode: str = envmod.IN_DIST,
    max_steps: int = envmod.STEP_CAP,
    perturb_spec: envmod.PerturbSpec | None = None,
    perturb_rng: np.random.Generator | None = None,
) -> tuple[polmod.RolloutResult, SteeringTrace]:
    """Receding-horizon episode under steering. Mirrors the base policy's
    rollout loop draw-for-draw, so with tau = +inf (guidance never fires)
    the trajectory is bit-identical to the unsteered one."""
    state, obs = envmod.reset(seed, init_mode, policy.obs_mode)
    rng = np.random.default_rng(seed)
    history = [obs.flat] * policy.t_o
    obs_list = [obs.flat]
    acts: list[np.ndarray] = []
    trace = SteeringTrace(tau=cfg.tau)
    success = False
    n_plans = 0
    while len(acts) < max_steps and not success:
        stack = np.concatenate(history).astype(np.float32)
        chunk, record = lpb_act(policy, model, index, cfg, stack, history[-1], rng)
        n_plans += 1
        executed = []
        for action in chunk[:policy.t_a]:
            action = np.asarray(action, dtype=np.float64)
            if perturb_spec is not None:
                action = envmod.perturb(action, perturb_spec, perturb_rng)
            state, obs, success = envmod.step(state, action, policy.obs_mode)
            history = history[1:] + [obs.flat]
            obs_list.append(obs.flat)
            acts.append(action)
            executed.append(action)
            if success or len(acts) >= max_steps:
                break
        record.actions = np.array(executed, dtype=np.float32).reshape(len(executed), 2)
        trace.records.append(record)
    traj = datamod.Trajectory(
        obs=np.stack(obs_list),
        actions=np.array(acts, dtype=np.float32).reshape(len(acts), 2),
        success=success, seed=seed, init_mode=init_mode, obs_mode=policy.obs_mode)
    return polmod.RolloutResult(trajectory=traj, n_plans=n_plans), trace


def mpc_act(
    policy: polmod.DiffusionPolicy,
    model: dynmod.DynamicsModel,
    index: ExpertLatentIndex,
    n_candidates: int,
    stack: np.ndarray,
    obs_flat: np.ndarray,
    rng: np.random.Generator,
    sampler: str = "ddpm",
    n_ddim: int = 16,
) -> np.ndarray:
    """Sample candidate chunks unguided and return the one whose predicted
    future latent scores lowest; ties go to the lowest candidate index."""
    if n_candidates < 1:
        raise ContractError(f"need at least one candidate, got {n_candidates}")
    stacks = np.tile(np.asarray(stack, dtype=np.float32), (n_candidates, 1))
    if sampler == "ddpm":
        chunks = polmod.ddpm_sample_batch(policy, stacks, rng)
    else:
        chunks = polmod.ddim_sample_batch(policy, stacks, rng, n_ddim)
    z_t = dynmod.encode_frame(model, obs_flat)
    z_rep = np.tile(z_t[None, :], (n_candidates, 1))
    preds = dynmod.predict(model, z_rep, chunks.reshape(n_candidates, -1)).data
    scores = ood_scores(index, preds)
    return chunks[int(np.argmin(scores))]


def gd_act(
    policy: polmod.DiffusionPolicy,
    model: dynmod.DynamicsModel,
    index: ExpertLatentIndex,
    n_steps: int,
    step_size: float,
    stack: np.ndarray,
    obs_flat: np.ndarray,
    rng: np.random.Generator,
    sampler: str = "ddpm",
    n_ddim: int = 16,
) -> np.ndarray:
    """Sample once, then descend the predicted-future score directly in
    action space (clamped); returns the best iterate by score."""
    if n_steps < 0:
        raise ContractError(f"descent step count must be >= 0, got {n_steps}")
    chunk = polmod.sample_chunk(policy, stack, rng, sampler, n_ddim, None)
    if n_steps == 0:
        return chunk
    z_t = dynmod.encode_frame(model, obs_flat)
    a = chunk.reshape(-1).astype(np.float32)
    best_a = a.copy()
    best_score = _predicted_score(model, index, z_t, a)
    for _ in range(n_steps):
        tape = Tape()
        a_t = Tensor(a)
        pred = dynmod.predict(model, Tensor(z_t.astype(np.float32)), a_t, tape)
        neighbor = Tensor(index.points[nearest(index, pred.data)[0]].astype(np.float32))
        delta = ad.sq_dist(pred, neighbor, tape)
        grad = tape.backward(delta)[a_t].data
        if not np.all(np.isfinite(grad)):
            break
        a = np.clip(a - step_size * grad, -1.0, 1.0).astype(np.float32)
        score = _predicted_score(model, index, z_t, a)
        if score < best_score:
            best_score = score
            best_a = a.copy()
    return best_a.reshape(policy.t_p, 2)
