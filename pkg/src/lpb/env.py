"""PointPush: a deterministic 2D push-to-goal task with a scripted expert.

A disk-shaped agent pushes a square block to a fixed goal pose inside the
unit workspace. Contact follows a quasi-static point-contact rule: the
block translates to resolve the agent's penetration and rotates by a
torque term about its center. The task is small enough that full training
and evaluation pipelines run in minutes, yet exhibits the compounding
deviation and recoverable off-distribution states the rest of the package
is built to study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

# Workspace geometry, all in unit-square coordinates.
STEP_SCALE = 0.03        # displacement per unit action component
AGENT_RADIUS = 0.025
BLOCK_HALF = 0.06        # half side length of the square block
ROT_GAIN = 0.5           # torque gain of the contact rule
SUCCESS_POS = 0.04
SUCCESS_ROT = 0.15
STEP_CAP = 400           # exceeding this counts as failure

GOAL_POS = (0.75, 0.5)
GOAL_THETA = 0.0

# Initial-pose distributions. IN_DIST block centers are uniform in a square
# around IN_DIST_BLOCK_CENTER; OOD block centers come from a disjoint
# annulus around the same center.
IN_DIST_BLOCK_CENTER = (0.35, 0.5)
IN_DIST_BLOCK_HALFWIDTH = 0.08
OOD_RADIUS_LO = 0.25
OOD_RADIUS_HI = 0.35
INIT_THETA_RANGE = 0.1
_POSE_MARGIN = 0.12      # keep sampled block centers this far from walls

IN_DIST = "IN_DIST"
OOD = "OOD"
VECTOR = "VECTOR"
GRID = "GRID"

GRID_SIZE = 24
_GRID_SOFT = 0.03        # soft-edge width of the rasterizer
_LEVEL_GOAL = 0.35
_LEVEL_BLOCK = 0.7
_LEVEL_AGENT = 1.0
_GOAL_MARKER_RADIUS = 0.045


def wrap_angle(theta: float) -> float:
    """Wrap to [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray
    block_pos: np.ndarray
    block_theta: float
    goal_pos: np.ndarray
    goal_theta: float
    step_count: int

    def __post_init__(self):
        object.__setattr__(self, "agent_pos", np.asarray(self.agent_pos, dtype=np.float64).copy())
        object.__setattr__(self, "block_pos", np.asarray(self.block_pos, dtype=np.float64).copy())
        object.__setattr__(self, "goal_pos", np.asarray(self.goal_pos, dtype=np.float64).copy())
        object.__setattr__(self, "block_theta", wrap_angle(float(self.block_theta)))
        if self.step_count < 0:
            raise ContractError(f"step_count must be non-negative, got {self.step_count}")


@dataclass(frozen=True)
class Observation:
    mode: str
    payload: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.payload.reshape(-1)


def obs_dim(mode: str) -> int:
    if mode == VECTOR:
        return 7
    if mode == GRID:
        return GRID_SIZE * GRID_SIZE
    raise ContractError(f"unknown observation mode {mode!r}")


@dataclass(frozen=True)
class PerturbSpec:
    probability: float
    sigma: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ContractError(f"perturbation probability must lie in [0, 1], got {self.probability}")
        if self.sigma <= 0.0:
            raise ContractError(f"perturbation sigma must be positive, got {self.sigma}")


def _sample_pose(rng: np.random.Generator, init_mode: str) -> tuple[np.ndarray, float, np.ndarray]:
    cx, cy = IN_DIST_BLOCK_CENTER
    if init_mode == IN_DIST:
        # Drawn unconditionally so the block-position marginal stays a
        # clean uniform square (its mean is the configured center).
        block = np.array([
            rng.uniform(cx - IN_DIST_BLOCK_HALFWIDTH, cx + IN_DIST_BLOCK_HALFWIDTH),
            rng.uniform(cy - IN_DIST_BLOCK_HALFWIDTH, cy + IN_DIST_BLOCK_HALFWIDTH),
        ])
    elif init_mode == OOD:
        for _ in range(1000):
            radius = rng.uniform(OOD_RADIUS_LO, OOD_RADIUS_HI)
            phi = rng.uniform(0.0, 2.0 * math.pi)
            block = np.array([cx + radius * math.cos(phi), cy + radius * math.sin(phi)])
            if np.all(block >= _POSE_MARGIN) and np.all(block <= 1.0 - _POSE_MARGIN):
                break
        else:
            raise ContractError("OOD pose sampling failed to find an in-workspace block center")
    else:
        raise ContractError(f"unknown init mode {init_mode!r}")

    theta = rng.uniform(-INIT_THETA_RANGE, INIT_THETA_RANGE)
    clearance = BLOCK_HALF * math.sqrt(2.0) + AGENT_RADIUS + 0.01
    for _ in range(1000):
        agent = rng.uniform(0.1, 0.9, size=2)
        if np.linalg.norm(agent - block) > clearance:
            return block, theta, agent
    raise ContractError("agent pose sampling failed to clear the block")


def reset(seed: int, init_mode: str = IN_DIST, obs_mode: str = VECTOR) -> tuple[EnvState, Observation]:
    """Deterministic in (seed, init_mode); obs_mode only affects the render."""
    rng = np.random.default_rng(seed)
    block, theta, agent = _sample_pose(rng, init_mode)
    state = EnvState(
        agent_pos=agent,
        block_pos=block,
        block_theta=theta,
        goal_pos=np.array(GOAL_POS),
        goal_theta=GOAL_THETA,
        step_count=0,
    )
    return state, render(state, obs_mode)


def in_dist_support(block_pos: np.ndarray) -> bool:
    """Membership test for the IN_DIST block-position support square."""
    center = np.array(IN_DIST_BLOCK_CENTER)
    return bool(np.all(np.abs(np.asarray(block_pos) - center) <= IN_DIST_BLOCK_HALFWIDTH))


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _cross2(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _resolve_contact(agent: np.ndarray, block: np.ndarray, theta: float) -> tuple[np.ndarray, float]:
    """Quasi-static push: translate the block out of penetration along the
    contact normal and rotate it by ROT_GAIN times the torque of that push
    about the block center. Returns the new (block_pos, theta)."""
    rel = _rot(-theta) @ (agent - block)
    closest = np.clip(rel, -BLOCK_HALF, BLOCK_HALF)
    gap = rel - closest
    dist = float(np.linalg.norm(gap))
    if dist >= AGENT_RADIUS:
        return block, theta
    if dist > 1e-12:
        normal_local = gap / dist
        depth = AGENT_RADIUS - dist
    else:
        # Agent center inside the square: push out along the shallower axis.
        overshoot = BLOCK_HALF - np.abs(rel)
        axis = int(np.argmin(overshoot))
        normal_local = np.zeros(2)
        normal_local[axis] = math.copysign(1.0, rel[axis]) if rel[axis] != 0.0 else 1.0
        depth = AGENT_RADIUS + float(overshoot[axis])
    normal_world = _rot(theta) @ normal_local
    push = -normal_world * depth
    lever = _rot(theta) @ closest
    new_block = np.clip(block + push, 0.0, 1.0)
    new_theta = wrap_angle(theta + ROT_GAIN * _cross2(lever, push))
    return new_block, new_theta


def _success(block: np.ndarray, theta: float, goal: np.ndarray, goal_theta: float) -> bool:
    pos_ok = float(np.linalg.norm(block - goal)) <= SUCCESS_POS
    rot_ok = abs(wrap_angle(theta - goal_theta)) <= SUCCESS_ROT
    return pos_ok and rot_ok


def step(state: EnvState, action: np.ndarray, obs_mode: str = VECTOR) -> tuple[EnvState, Observation, bool]:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (2,):
        raise ContractError(f"action must be a 2-vector, got shape {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ContractError(f"action must be finite, got {action}")
    move = np.clip(action, -1.0, 1.0) * STEP_SCALE
    agent = np.clip(state.agent_pos + move, 0.0, 1.0)
    block, theta = _resolve_contact(agent, state.block_pos, state.block_theta)
    new_state = EnvState(
        agent_pos=agent,
        block_pos=block,
        block_theta=theta,
        goal_pos=state.goal_pos,
        goal_theta=state.goal_theta,
        step_count=state.step_count + 1,
    )
    return new_state, render(new_state, obs_mode), _success(block, theta, state.goal_pos, state.goal_theta)


def _support_extent(theta: float, direction: np.ndarray) -> float:
    """Half-extent of the rotated square along a world-frame direction."""
    local = _rot(-theta) @ direction
    return BLOCK_HALF * (abs(float(local[0])) + abs(float(local[1])))


def scripted_expert(state: EnvState) -> np.ndarray:
    """Waypoint push controller: orbit behind the block relative to the
    goal direction, then push through, steering orientation with a small
    lateral contact offset."""
    err_vec = state.goal_pos - state.block_pos
    err_pos = float(np.linalg.norm(err_vec))
    if err_pos <= 0.03:
        return np.zeros(2)
    g = err_vec / err_pos
    perp = np.array([-g[1], g[0]])
    err_th = wrap_angle(state.block_theta - state.goal_theta)
    offset = float(np.clip(0.5 * err_th, -0.04, 0.04))
    standoff = _support_extent(state.block_theta, g) + AGENT_RADIUS + 0.005
    push_target = state.block_pos - g * standoff + perp * offset
    staging = push_target - g * 0.03

    # Lateral/longitudinal position relative to the push line through the
    # target along g. Anywhere laterally aligned and at or behind contact
    # counts as "in the push slab": keep driving forward so the block
    # cannot stall the controller by barely moving.
    rel_target = state.agent_pos - push_target
    lateral = float(np.dot(rel_target, perp))
    along = float(np.dot(rel_target, g))
    if abs(lateral) <= 0.01 and -0.035 <= along <= BLOCK_HALF:
        return g

    to_staging = staging - state.agent_pos
    d_staging = float(np.linalg.norm(to_staging))
    if d_staging < 1e-9:
        return g
    # The clearance disk for the straight-path test must sit strictly
    # inside the orbit radius, or staging points near the block would keep
    # the path "blocked" forever.
    clear = BLOCK_HALF * math.sqrt(2.0) + AGENT_RADIUS + 0.002
    if not _segment_hits_disk(state.agent_pos, staging, state.block_pos, clear):
        speed = min(1.0, d_staging / STEP_SCALE)
        return to_staging / d_staging * speed
    # Path blocked: slide around the inflated block circle toward the
    # angular position of the staging point.
    orbit = clear + 0.013
    rel = state.agent_pos - state.block_pos
    rho = max(float(np.linalg.norm(rel)), 1e-9)
    ang = math.atan2(rel[1], rel[0])
    t_rel = staging - state.block_pos
    t_ang = math.atan2(t_rel[1], t_rel[0])
    dang = wrap_angle(t_ang - ang)
    tangent = np.array([-rel[1], rel[0]]) / rho * math.copysign(1.0, dang if dang != 0.0 else 1.0)
    radial = rel / rho * (orbit - rho) * 4.0
    vel = tangent + radial
    return vel / max(float(np.linalg.norm(vel)), 1e-9)


def _segment_hits_disk(a: np.ndarray, b: np.ndarray, center: np.ndarray, radius: float) -> bool:
    ab = b - a
    denom = float(np.dot(ab, ab))
    t = 0.0 if denom < 1e-18 else float(np.clip(np.dot(center - a, ab) / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + t * ab - center)) < radius


def perturb(action: np.ndarray, spec: PerturbSpec, rng: np.random.Generator) -> np.ndarray:
    """With probability p add per-component Gaussian noise, then clamp."""
    action = np.asarray(action, dtype=np.float64)
    if rng.uniform() < spec.probability:
        action = action + rng.normal(0.0, spec.sigma, size=action.shape)
    return np.clip(action, -1.0, 1.0)


_GRID_XY = None


def _grid_centers() -> tuple[np.ndarray, np.ndarray]:
    global _GRID_XY
    if _GRID_XY is None:
        coords = (np.arange(GRID_SIZE) + 0.5) / GRID_SIZE
        # Row index is y, column index is x.
        xs, ys = np.meshgrid(coords, coords)
        _GRID_XY = (xs, ys)
    return _GRID_XY


def _coverage(signed_dist: np.ndarray) -> np.ndarray:
    return np.clip(0.5 - signed_dist / _GRID_SOFT, 0.0, 1.0)


def render(state: EnvState, mode: str = VECTOR) -> Observation:
    if mode == VECTOR:
        vec = np.array([
            2.0 * state.agent_pos[0] - 1.0,
            2.0 * state.agent_pos[1] - 1.0,
            2.0 * state.block_pos[0] - 1.0,
            2.0 * state.block_pos[1] - 1.0,
            math.sin(state.block_theta),
            math.cos(state.block_theta),
            min(state.step_count, STEP_CAP) / STEP_CAP,
        ], dtype=np.float32)
        return Observation(mode=VECTOR, payload=vec)
    if mode == GRID:
        xs, ys = _grid_centers()
        agent_sd = np.hypot(xs - state.agent_pos[0], ys - state.agent_pos[1]) - AGENT_RADIUS
        goal_sd = np.hypot(xs - state.goal_pos[0], ys - state.goal_pos[1]) - _GOAL_MARKER_RADIUS
        # Box signed distance in the block frame.
        dx = xs - state.block_pos[0]
        dy = ys - state.block_pos[1]
        c, s = math.cos(-state.block_theta), math.sin(-state.block_theta)
        qx = np.abs(c * dx - s * dy) - BLOCK_HALF
        qy = np.abs(s * dx + c * dy) - BLOCK_HALF
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        block_sd = outside + inside
        img = np.maximum.reduce([
            _LEVEL_GOAL * _coverage(goal_sd),
            _LEVEL_BLOCK * _coverage(block_sd),
            _LEVEL_AGENT * _coverage(agent_sd),
        ]).astype(np.float32)
        return Observation(mode=GRID, payload=img)
    raise ContractError(f"unknown observation mode {mode!r}")
