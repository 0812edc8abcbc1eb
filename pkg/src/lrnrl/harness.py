"""Experiment protocol: evaluation, N-object sweeps, ablation grid,
diagnostics export and the relation-scaling benchmark."""

from __future__ import annotations

import copy
import csv
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .encoders import KINDS, Encoder, EncoderConfig, TokenSet, relation_count
from .env import EnvConfig, PlacementError, PushEnv, RewardConfig
from .features import CUBE_ID, GOAL_ID, group_by_shape, stack
from . import diffmath as dm
from .ppo import PolicyModel, sample_action

SOLVED_THRESHOLD = 0.8


@dataclass
class EvalStats:
    n_distractors: int
    episodes: int
    mean: float
    std: float
    solved_fraction: float
    error: str = ""

    def row(self) -> dict:
        return {"n_distractors": self.n_distractors, "episodes": self.episodes,
                "mean_success": self.mean, "std_success": self.std,
                "solved_fraction": self.solved_fraction, "error": self.error}


def _episode_envs(env_cfg: EnvConfig, reward_cfg: RewardConfig | None, episodes: int, seed: int):
    return [PushEnv(env_cfg, reward_cfg, seed=[seed, 7, env_cfg.n_cubes, i]) for i in range(episodes)]


def run_episodes(model: PolicyModel, env_cfg: EnvConfig, episodes: int, seed: int,
                 reward_cfg: RewardConfig | None = None, chunk: int = 100) -> np.ndarray:
    """Final fractional success of ``episodes`` deterministic-policy episodes."""
    out = []
    all_envs = _episode_envs(env_cfg, reward_cfg, episodes, seed)
    for start in range(0, episodes, chunk):
        envs = all_envs[start:start + chunk]
        obs = [e.reset() for e in envs]
        final = np.zeros(len(envs))
        for _t in range(env_cfg.horizon):
            act, _, _ = sample_action(model, obs, None, deterministic=True)
            for i, e in enumerate(envs):
                obs[i], _, done, info = e.step(act[i])
                if done:
                    final[i] = info["success"]
        out.append(final)
    return np.concatenate(out)


def evaluate(model: PolicyModel, env_cfg: EnvConfig, episodes: int = 200, seed: int = 0,
             reward_cfg: RewardConfig | None = None) -> EvalStats:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rho = run_episodes(model, env_cfg, episodes, seed, reward_cfg)
    return EvalStats(env_cfg.n_distractors, episodes, float(rho.mean()), float(rho.std()),
                     float(np.mean(rho >= SOLVED_THRESHOLD)))


@dataclass
class SweepResult:
    rows: list[EvalStats]

    HEADER = ("n_distractors", "episodes", "mean_success", "std_success", "solved_fraction", "error")

    def by_n(self) -> dict[int, EvalStats]:
        return {r.n_distractors: r for r in self.rows}

    def write(self, fh: IO[str]) -> None:
        w = csv.DictWriter(fh, fieldnames=self.HEADER, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r.row())

    @classmethod
    def read(cls, fh: IO[str]) -> "SweepResult":
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(EvalStats(int(rec["n_distractors"]), int(rec["episodes"]), float(rec["mean_success"]),
                                  float(rec["std_success"]), float(rec["solved_fraction"]), rec.get("error", "")))
        return cls(rows)


def generalization_sweep(model: PolicyModel, env_cfg: EnvConfig, n_list: Sequence[int], episodes: int = 200,
                         seed: int = 0, reward_cfg: RewardConfig | None = None) -> SweepResult:
    """Evaluate at each distractor count. Infeasible placements become error rows."""
    rows = []
    for n in n_list:
        cfg = replace(env_cfg, n_cubes=n + 1)
        try:
            rows.append(evaluate(model, cfg, episodes, seed, reward_cfg))
        except PlacementError as exc:
            rows.append(EvalStats(n, episodes, math.nan, math.nan, math.nan, str(exc)))
    return SweepResult(rows)


# ablation grid ------------------------------------------------------------------------

ABLATION_SEEDS = 5
REWARD_VARIANTS = {
    "all": {},
    "no-distance": {"use_distance": False},
    "no-sparse": {"use_sparse": False},
    "no-curiosity": {"use_curiosity": False},
}


@dataclass
class RunSpec:
    name: str
    group: str
    config: object          # ExperimentConfig; typed loosely to avoid a cli import cycle
    seeds: tuple[int, ...]


def ablation_matrix(base_config, n_seeds: int = ABLATION_SEEDS) -> list[RunSpec]:
    """Enumerate every single-factor variation of ``base_config``.

    ``base_config`` needs ``env``, ``reward``, ``encoder`` and ``run`` sections.
    """
    base_seed = base_config.run.seed
    seeds = tuple(base_seed + i for i in range(n_seeds))
    specs: list[RunSpec] = []

    def add(group, name, mutate):
        cfg = copy.deepcopy(base_config)
        mutate(cfg)
        cfg.run.name = f"{group}-{name}"
        specs.append(RunSpec(f"{group}-{name}", group, cfg, seeds))

    for kind in KINDS:
        add("encoder", kind, lambda c, k=kind: setattr(c.encoder, "kind", k))
    for agg in ("layernorm_sum", "mean"):
        add("aggregation", agg, lambda c, a=agg: setattr(c.encoder, "aggregation", a))
    for dz in (10, 25, 50, 100):
        add("d_z", str(dz), lambda c, v=dz: setattr(c.encoder, "d_z", v))
    for label, flags in REWARD_VARIANTS.items():
        def mut(c, flags=flags):
            for k, v in flags.items():
                setattr(c.reward, k, v)
        add("reward", label, mut)
    for n in (0, 1, 2, 3):
        add("train_distractors", str(n), lambda c, v=n: setattr(c.env, "n_cubes", v + 1))
    return specs


# diagnostics -------------------------------------------------------------------------------

def relation_role_tags(tokens_roles: Sequence[str], cube_ids: np.ndarray, goal_id: float,
                       n_rel_per_role: int = 1) -> list[str]:
    """Map token roles to diagnostic tags: target, distractor, effector<j>, goal."""
    tags = []
    c = e = 0
    for role in tokens_roles:
        if role == "cube":
            tags.append("target" if cube_ids[c] == goal_id else "distractor")
            c += 1
        elif role == "effector":
            tags.append(f"effector{e}")
            e += 1
        else:
            tags.append("goal")
    return [t for t in tags for _ in range(n_rel_per_role)]


@dataclass
class DiagnosticsRecord:
    episode: int
    step: int
    n_distractors: int
    rho: float
    z: np.ndarray
    relations: np.ndarray | None          # [R, d]
    relation_tags: list[str]
    type_norms: dict[str, float] = field(default_factory=dict)
    attention: np.ndarray | None = None   # [heads, K+1, K+1]


def type_mean_norms(relations: np.ndarray, tags: Sequence[str]) -> dict[str, float]:
    """Mean L2 norm per relation type (sum of norms divided by that type's count)."""
    norms = np.linalg.norm(relations, axis=-1)
    out: dict[str, list[float]] = {}
    for n, t in zip(norms, tags):
        out.setdefault(t, []).append(float(n))
    return {t: sum(v) / len(v) for t, v in out.items()}


def export_diagnostics(model: PolicyModel, env_cfg: EnvConfig, episodes: int, seed: int = 0,
                       reward_cfg: RewardConfig | None = None) -> Iterator[DiagnosticsRecord]:
    """One record per environment step of deterministic-policy episodes."""
    kind = model.encoder.config.kind
    for ep in range(episodes):
        env = PushEnv(env_cfg, reward_cfg, seed=[seed, 11, env_cfg.n_cubes, ep])
        obs = env.reset()
        for t in range(env_cfg.horizon):
            out = model(obs)
            rep = out.rep
            action = out.mean.data[0].astype(np.float64)
            obs_next, _, _, info = env.step(action)
            rel = rep.relations.data[0].astype(np.float64) if rep.relations is not None else None
            n_per = len(obs.cubes) + len(obs.effectors) + 1 if kind == "RN" else 1
            roles = rep.relation_roles
            if kind == "RN":
                roles = roles[::n_per]
            tags = relation_role_tags(roles, obs.cubes[:, CUBE_ID], obs.goal[GOAL_ID], n_per)
            rec = DiagnosticsRecord(ep, t, env_cfg.n_distractors, info["rho"],
                                    rep.z.data[0].astype(np.float64), rel, tags,
                                    type_mean_norms(rel, tags) if rel is not None else {},
                                    rep.attention[0] if rep.attention is not None else None)
            yield rec
            obs = obs_next


class DiagnosticsWriter:
    """Three CSV streams, each with a header naming every column:

    * ``z``:         episode, step, n_distractors, rho, z_0..z_{dz-1}
    * ``relations``: episode, step, n_distractors, index, tag, norm, r_0..r_{d-1}
    * ``norms``:     episode, step, n_distractors, tag, count, mean_norm
    """

    def __init__(self, z_fh: IO[str], rel_fh: IO[str] | None, norm_fh: IO[str] | None):
        self.z = csv.writer(z_fh, lineterminator="\n")
        self.rel = csv.writer(rel_fh, lineterminator="\n") if rel_fh else None
        self.norm = csv.writer(norm_fh, lineterminator="\n") if norm_fh else None
        self._started = False

    def write(self, rec: DiagnosticsRecord) -> None:
        if not self._started:
            self.z.writerow(["episode", "step", "n_distractors", "rho"] + [f"z_{i}" for i in range(len(rec.z))])
            if self.rel:
                d = rec.relations.shape[1] if rec.relations is not None else 0
                self.rel.writerow(["episode", "step", "n_distractors", "index", "tag", "norm"]
                                  + [f"r_{i}" for i in range(d)])
            if self.norm:
                self.norm.writerow(["episode", "step", "n_distractors", "tag", "count", "mean_norm"])
            self._started = True
        head = [rec.episode, rec.step, rec.n_distractors]
        self.z.writerow(head + [repr(float(rec.rho))] + [repr(float(v)) for v in rec.z])
        if self.rel and rec.relations is not None:
            for i, (r, tag) in enumerate(zip(rec.relations, rec.relation_tags)):
                self.rel.writerow(head + [i, tag, repr(float(np.linalg.norm(r)))] + [repr(float(v)) for v in r])
        if self.norm:
            counts: dict[str, int] = {}
            for t in rec.relation_tags:
                counts[t] = counts.get(t, 0) + 1
            for tag in sorted(rec.type_norms):
                self.norm.writerow(head + [tag, counts[tag], repr(rec.type_norms[tag])])


# scaling benchmark ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    kind: str
    K: int
    relations: int
    counted: int
    median_seconds: float


@dataclass
class BenchResult:
    rows: list[BenchRow]
    slopes: dict[str, float]

    HEADER = ("kind", "K", "relations", "counted", "median_seconds", "slope")

    def write(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows:
            w.writerow([r.kind, r.K, r.relations, r.counted, repr(r.median_seconds), repr(self.slopes[r.kind])])

    @classmethod
    def read(cls, fh: IO[str]) -> "BenchResult":
        rows, slopes = [], {}
        for rec in csv.DictReader(fh):
            rows.append(BenchRow(rec["kind"], int(rec["K"]), int(rec["relations"]), int(rec["counted"]),
                                 float(rec["median_seconds"])))
            slopes[rec["kind"]] = float(rec["slope"])
        return cls(rows, slopes)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def random_tokens(K: int, d: int, batch: int, rng: np.random.Generator, dtype=np.float32) -> TokenSet:
    objects = dm.Tensor(rng.standard_normal((batch, K, d)).astype(dtype))
    goal = dm.Tensor(rng.standard_normal((batch, d)).astype(dtype))
    return TokenSet(objects, goal, ("cube",) * K)


def scaling_bench(kinds: Sequence[str], K_list: Sequence[int], repetitions: int = 100, batch: int = 32,
                  encoder_cfg: EncoderConfig | None = None, seed: int = 0) -> BenchResult:
    """Median encoder forward time per (kind, K) on a batch of random token sets.

    The batch amortises interpreter overhead so the timing reflects arithmetic.
    """
    if len(K_list) < 4 or list(K_list) != sorted(K_list):
        raise ValueError("K_list must be ascending with at least 4 points")
    base = encoder_cfg or EncoderConfig()
    rows, slopes = [], {}
    for kind in kinds:
        enc = Encoder(replace(base, kind=kind), np.random.default_rng(seed))
        times = []
        for K in K_list:
            tokens = random_tokens(K, base.d, batch, np.random.default_rng([seed, K]))
            enc(tokens)  # warm-up
            enc.counter.reset()
            samples = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                enc(tokens)
                samples.append(time.perf_counter() - t0)
            counted = enc.counter.relations // (repetitions * batch)
            med = statistics.median(samples)
            times.append(med)
            rows.append(BenchRow(kind, K, relation_count(kind, K), counted, med))
        slopes[kind] = loglog_slope(K_list, times)
    return BenchResult(rows, slopes)
