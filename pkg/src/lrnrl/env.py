"""Planar multi-cube transport task.

M disc effectors push N_o axis-aligned square cubes around the unit arena.
One cube per episode (the target) has to end up on a goal square. Physics is
kinematic: effectors move at the commanded velocity and push cubes out of
their way; cubes push each other; walls clamp everything.

The core is functional (:func:`reset`, :func:`step`, :func:`observe`) over a
:class:`WorldState`; :class:`PushEnv` wraps it for rollouts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import IO, Any

import numpy as np

from .diffmath import ContractError
from .features import CUBE_WIDTH, EFFECTOR_WIDTH, GOAL_WIDTH, ObjectSet

CONTACT_TOLERANCE = 1e-3
MAX_PLACEMENT_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    pass


@dataclass
class RewardConfig:
    sparse_weight: float = 100.0
    distance_weight: float = 250.0
    curiosity_weight: float = 10.0
    curiosity_exponent: float = 0.05
    use_sparse: bool = True
    use_distance: bool = True
    use_curiosity: bool = True
    # "decrease": reward getting closer; "printed": d_t - d_{t-1} literally
    distance_sign: str = "decrease"

    def validate(self) -> "RewardConfig":
        if self.distance_sign not in ("decrease", "printed"):
            raise ValueError(f"reward.distance_sign must be 'decrease' or 'printed', got {self.distance_sign!r}")
        if self.curiosity_exponent < 0:
            raise ValueError("reward.curiosity_exponent must be >= 0")
        return self


@dataclass
class EnvConfig:
    n_cubes: int = 3
    horizon: int = 300
    arena_size: float = 1.0
    cube_side: float = 0.15
    effector_radius: float = 0.03
    n_effectors: int = 3
    action_scale: float = 0.08
    substeps: int = 4
    seed: int = 0
    shuffle_observations: bool = False

    def validate(self) -> "EnvConfig":
        if self.n_cubes < 1:
            raise ValueError("env.n_cubes must be >= 1")
        if self.horizon < 1:
            raise ValueError("env.horizon must be >= 1")
        if self.n_effectors < 1:
            raise ValueError("env.n_effectors must be >= 1")
        if self.substeps < 1:
            raise ValueError("env.substeps must be >= 1")
        for name in ("arena_size", "cube_side", "effector_radius", "action_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"env.{name} must be positive")
        if 2 * self.cube_margin >= self.arena_size:
            raise ValueError("env.arena_size must exceed cube_side + 4 * effector_radius")
        return self

    @property
    def n_distractors(self) -> int:
        return self.n_cubes - 1

    @property
    def cube_margin(self) -> float:
        """Closest a cube centre may get to a wall; leaves room for a disc behind it."""
        return self.cube_side / 2 + 2 * self.effector_radius + 2 * CONTACT_TOLERANCE

    @property
    def max_effector_speed(self) -> float:
        return self.action_scale * math.sqrt(2.0)


@dataclass
class WorldState:
    cube_pos: np.ndarray       # [N, 2] centres
    cube_vel: np.ndarray       # [N, 2] displacement over the last step
    eff_pos: np.ndarray        # [M, 2]
    eff_vel: np.ndarray        # [M, 2]
    goal_pos: np.ndarray       # [2]
    target: int
    cube_ids: np.ndarray       # [N]
    eff_ids: np.ndarray        # [M]
    t: int = 0

    def copy(self) -> "WorldState":
        return WorldState(self.cube_pos.copy(), self.cube_vel.copy(), self.eff_pos.copy(),
                          self.eff_vel.copy(), self.goal_pos.copy(), self.target,
                          self.cube_ids.copy(), self.eff_ids.copy(), self.t)

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "target": self.target,
            "cube_pos": self.cube_pos.tolist(),
            "cube_vel": self.cube_vel.tolist(),
            "cube_ids": self.cube_ids.tolist(),
            "eff_pos": self.eff_pos.tolist(),
            "eff_vel": self.eff_vel.tolist(),
            "eff_ids": self.eff_ids.tolist(),
            "goal_pos": self.goal_pos.tolist(),
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "WorldState":
        def arr(key, width=None):
            a = np.asarray(d[key], dtype=np.float64)
            return a.reshape(-1, width) if width else a
        return WorldState(arr("cube_pos", 2), arr("cube_vel", 2), arr("eff_pos", 2), arr("eff_vel", 2),
                          arr("goal_pos"), int(d["target"]), arr("cube_ids"), arr("eff_ids"), int(d["t"]))


def effector_home(config: EnvConfig) -> np.ndarray:
    """Fixed start positions on a circle around the arena centre."""
    A, M = config.arena_size, config.n_effectors
    angles = -math.pi / 2 + 2 * math.pi * np.arange(M) / M
    return A / 2 + 0.4 * A * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def effector_ids(M: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, M) if M > 1 else np.zeros(1)


def _disc_square_gap(px, py, cx, cy, h):
    """Closest point on the square to the disc centre, and whether the centre is inside."""
    qx = min(max(px, cx - h), cx + h)
    qy = min(max(py, cy - h), cy + h)
    return qx, qy, (qx == px and qy == py)


def reset(config: EnvConfig, rng: np.random.Generator) -> WorldState:
    config.validate()
    A, s, r = config.arena_size, config.cube_side, config.effector_radius
    h = s / 2
    lo, hi = config.cube_margin, A - config.cube_margin
    homes = effector_home(config)
    cubes: list[tuple[float, float]] = []
    for _ in range(config.n_cubes):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            x, y = rng.uniform(lo, hi, size=2)
            if any(abs(x - cx) < s and abs(y - cy) < s for cx, cy in cubes):
                continue
            clear = True
            for ex, ey in homes:
                qx, qy, inside = _disc_square_gap(ex, ey, x, y, h)
                if inside or math.hypot(ex - qx, ey - qy) < r + CONTACT_TOLERANCE:
                    clear = False
                    break
            if clear:
                cubes.append((float(x), float(y)))
                break
        else:
            raise PlacementError(
                f"could not place {config.n_cubes} cubes without overlap in an arena of size "
                f"{A} (cube side {s}) after {MAX_PLACEMENT_ATTEMPTS} attempts")
    goal = rng.uniform(lo, hi, size=2)
    target = int(rng.integers(config.n_cubes))
    ids = rng.uniform(-1.0, 1.0, size=config.n_cubes)
    M = config.n_effectors
    return WorldState(np.asarray(cubes, dtype=np.float64), np.zeros((config.n_cubes, 2)),
                      homes.astype(np.float64), np.zeros((M, 2)), goal.astype(np.float64),
                      target, ids, effector_ids(M), 0)


def _resolve_cubes(cubes: list[list[float]], s: float, lo: float, hi: float) -> None:
    n = len(cubes)
    for _ in range(12):
        moved = False
        for i in range(n):
            for k in range(i + 1, n):
                dx = cubes[k][0] - cubes[i][0]
                dy = cubes[k][1] - cubes[i][1]
                px = s - abs(dx)
                py = s - abs(dy)
                if px <= 0 or py <= 0:
                    continue
                moved = True
                if px < py:
                    sgn = 1.0 if dx >= 0 else -1.0
                    cubes[i][0] -= sgn * px / 2
                    cubes[k][0] += sgn * px / 2
                else:
                    sgn = 1.0 if dy >= 0 else -1.0
                    cubes[i][1] -= sgn * py / 2
                    cubes[k][1] += sgn * py / 2
        for c in cubes:
            c[0] = min(max(c[0], lo), hi)
            c[1] = min(max(c[1], lo), hi)
        if not moved:
            break


def _push_vector(ex, ey, cx, cy, h, r):
    """Displacement that moves a cube out of contact with a disc (zero if no contact)."""
    qx, qy, inside = _disc_square_gap(ex, ey, cx, cy, h)
    if not inside:
        gx, gy = ex - qx, ey - qy
        dist = math.hypot(gx, gy)
        if dist >= r:
            return 0.0, 0.0
        pen = r - dist
        return -gx / dist * pen, -gy / dist * pen
    # disc centre inside the square: leave along the shallowest axis
    ox, oy = ex - cx, ey - cy
    if h - abs(ox) < h - abs(oy):
        sgn = 1.0 if ox >= 0 else -1.0
        return -sgn * (h + r - abs(ox)), 0.0
    sgn = 1.0 if oy >= 0 else -1.0
    return 0.0, -sgn * (h + r - abs(oy))


def _physics(state: WorldState, vel: np.ndarray, config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    A, s, r = config.arena_size, config.cube_side, config.effector_radius
    h = s / 2
    sub = config.substeps
    cap = config.max_effector_speed / sub
    lo, hi = config.cube_margin, A - config.cube_margin
    cubes = state.cube_pos.tolist()
    effs = state.eff_pos.tolist()
    vs = (vel / sub).tolist()
    for _ in range(sub):
        start = [c[:] for c in cubes]
        for e, (vx, vy) in zip(effs, vs):
            e[0] = min(max(e[0] + vx, r), A - r)
            e[1] = min(max(e[1] + vy, r), A - r)
            for c in cubes:
                dx, dy = _push_vector(e[0], e[1], c[0], c[1], h, r)
                if dx or dy:
                    c[0] = min(max(c[0] + dx, lo), hi)
                    c[1] = min(max(c[1] + dy, lo), hi)
        _resolve_cubes(cubes, s, lo, hi)
        for c, c0 in zip(cubes, start):
            mx, my = c[0] - c0[0], c[1] - c0[1]
            m = math.hypot(mx, my)
            if m > cap:
                c[0] = c0[0] + mx * cap / m
                c[1] = c0[1] + my * cap / m
        # effectors never rest inside a cube
        for e in effs:
            for c in cubes:
                dx, dy = _push_vector(e[0], e[1], c[0], c[1], h, r)
                if dx or dy:
                    e[0] = min(max(e[0] - dx, r), A - r)
                    e[1] = min(max(e[1] - dy, r), A - r)
    return np.asarray(cubes, dtype=np.float64), np.asarray(effs, dtype=np.float64)


def fractional_overlap(cube_pos, goal_pos, side: float) -> float:
    """Intersection area of two equal axis-aligned squares over one square's area."""
    ox = max(0.0, side - abs(float(cube_pos[0]) - float(goal_pos[0])))
    oy = max(0.0, side - abs(float(cube_pos[1]) - float(goal_pos[1])))
    return ox * oy / (side * side)


def reward_terms(prev: WorldState, cur: WorldState, cfg: RewardConfig, side: float) -> dict[str, float]:
    """Each enabled term separately; disabled terms are 0."""
    o_prev = prev.cube_pos[prev.target]
    o_cur = cur.cube_pos[cur.target]
    rho = fractional_overlap(o_cur, cur.goal_pos, side)
    d_cur = math.dist(o_cur, cur.goal_pos)
    d_prev = math.dist(o_prev, prev.goal_pos)
    moved = math.dist(o_cur, o_prev)
    terms = {"sparse": 0.0, "distance": 0.0, "curiosity": 0.0}
    if cfg.use_sparse:
        terms["sparse"] = cfg.sparse_weight * rho
    if cfg.use_distance:
        delta = d_prev - d_cur if cfg.distance_sign == "decrease" else d_cur - d_prev
        terms["distance"] = cfg.distance_weight * delta
    if cfg.use_curiosity:
        terms["curiosity"] = (cfg.curiosity_weight * (1.0 - rho) ** cfg.curiosity_exponent
                              * math.log(moved + 1e-5))
    return terms


def reward(prev: WorldState, cur: WorldState, cfg: RewardConfig, side: float) -> float:
    t = reward_terms(prev, cur, cfg, side)
    return t["sparse"] + t["distance"] + t["curiosity"]


def step(state: WorldState, action, config: EnvConfig,
         reward_cfg: RewardConfig | None = None) -> tuple[WorldState, float, bool, dict[str, Any]]:
    """Advance one control step. Returns ``(next_state, reward, done, info)``."""
    reward_cfg = reward_cfg or RewardConfig()
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape[0] != 2 * config.n_effectors:
        raise ContractError(f"action must have {2 * config.n_effectors} components, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ContractError("action contains non-finite values")
    if state.t >= config.horizon:
        raise ContractError("episode already finished; call reset")
    vel = np.clip(a, -1.0, 1.0).reshape(-1, 2) * config.action_scale
    cubes, effs = _physics(state, vel, config)
    nxt = WorldState(cubes, cubes - state.cube_pos, effs, effs - state.eff_pos, state.goal_pos.copy(),
                     state.target, state.cube_ids.copy(), state.eff_ids.copy(), state.t + 1)
    terms = reward_terms(state, nxt, reward_cfg, config.cube_side)
    rho = fractional_overlap(nxt.cube_pos[nxt.target], nxt.goal_pos, config.cube_side)
    done = nxt.t >= config.horizon
    info = {"rho": rho, "terms": terms}
    return nxt, terms["sparse"] + terms["distance"] + terms["curiosity"], done, info


def observe(state: WorldState, config: EnvConfig) -> ObjectSet:
    s = config.cube_side
    N, M = len(state.cube_pos), len(state.eff_pos)
    cubes = np.zeros((N, CUBE_WIDTH), dtype=np.float32)
    cubes[:, 0] = 1.0
    cubes[:, 1:4] = s
    cubes[:, 4:6] = state.cube_pos
    cubes[:, 7] = 1.0
    cubes[:, 11:13] = state.cube_vel
    cubes[:, 17] = state.cube_ids
    goal = np.zeros(GOAL_WIDTH, dtype=np.float32)
    goal[0] = 1.0
    goal[1:4] = s
    goal[4:6] = state.goal_pos
    goal[7] = 1.0
    goal[11] = state.cube_ids[state.target]
    effs = np.zeros((M, EFFECTOR_WIDTH), dtype=np.float32)
    effs[:, 0:2] = state.eff_pos
    effs[:, 3:5] = state.eff_vel
    effs[:, 6] = state.eff_ids
    effs[:, 7:9] = state.eff_pos
    return ObjectSet(cubes, effs, goal)


def success(state: WorldState, config: EnvConfig) -> float:
    """Fractional overlap of the target with the goal at the final step."""
    if state.t < config.horizon:
        raise ContractError(f"success is defined at the last timestep (t={state.t} < horizon={config.horizon})")
    return fractional_overlap(state.cube_pos[state.target], state.goal_pos, config.cube_side)


class PushEnv:
    """Stateful wrapper with its own seeded random stream."""

    def __init__(self, config: EnvConfig, reward_cfg: RewardConfig | None = None, seed: int | None = None):
        self.config = config.validate()
        self.reward_cfg = (reward_cfg or RewardConfig()).validate()
        seq = np.random.SeedSequence(config.seed if seed is None else seed)
        reset_seq, shuffle_seq = seq.spawn(2)
        self.rng = np.random.default_rng(reset_seq)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.state: WorldState | None = None

    def reset(self) -> ObjectSet:
        self.state = reset(self.config, self.rng)
        return self.observe()

    def observe(self) -> ObjectSet:
        obs = observe(self.state, self.config)
        if self.config.shuffle_observations:
            obs = obs.permuted(self.shuffle_rng)
        return obs

    def step(self, action) -> tuple[ObjectSet, float, bool, dict[str, Any]]:
        self.state, r, done, info = step(self.state, action, self.config, self.reward_cfg)
        if done:
            info["success"] = success(self.state, self.config)
        return self.observe(), r, done, info

    def get_state(self) -> dict[str, Any]:
        return {"state": None if self.state is None else self.state.to_dict(),
                "rng": self.rng.bit_generator.state,
                "shuffle_rng": self.shuffle_rng.bit_generator.state}

    def set_state(self, blob: dict[str, Any]) -> None:
        self.state = None if blob["state"] is None else WorldState.from_dict(blob["state"])
        self.rng.bit_generator.state = blob["rng"]
        self.shuffle_rng.bit_generator.state = blob["shuffle_rng"]


REPLAY_FIELDS = ("step", "state", "action", "reward", "terms", "rho")


class ReplayWriter:
    """Line-delimited JSON, one object per step with keys in ``REPLAY_FIELDS`` order."""

    def __init__(self, fh: IO[str]):
        self.fh = fh

    def write(self, step_index: int, state: WorldState, action, terms: dict[str, float], rho: float) -> None:
        rec = {
            "step": step_index,
            "state": state.to_dict(),
            "action": [float(a) for a in np.asarray(action).reshape(-1)],
            "reward": float(sum(terms.values())),
            "terms": {k: float(terms[k]) for k in ("sparse", "distance", "curiosity")},
            "rho": float(rho),
        }
        self.fh.write(json.dumps(rec) + "\n")


def record_episode(config: EnvConfig, actions, fh: IO[str], reward_cfg: RewardConfig | None = None,
                   seed: int | None = None) -> None:
    """Replay an action sequence from a fresh reset and write one record per step."""
    env = PushEnv(config, reward_cfg, seed)
    env.reset()
    writer = ReplayWriter(fh)
    for i, a in enumerate(actions):
        _, _, done, info = env.step(a)
        writer.write(i, env.state, a, info["terms"], info["rho"])
        if done:
            break
