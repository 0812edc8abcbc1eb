"""Goal-conditioned actor-critic trained with clipped PPO.

The policy and value heads share one tokenizer + encoder trunk unless
``PPOHyper.shared_trunk`` is off, in which case the value head gets its own
copy. Actions are drawn from a diagonal Gaussian with a state-independent
learned log-std; the environment clamps them to [-1, 1] afterwards, and
log-probabilities refer to the unclamped sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .encoders import MLP, Encoder, EncoderConfig, Representation, Tokenizer
from .env import PushEnv
from .features import ObjectSet, group_by_shape, stack

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


class TrainingAborted(RuntimeError):
    """Non-finite network output or loss; carries a diagnostic dump."""

    def __init__(self, message: str, dump: dict[str, Any] | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class PPOHyper:
    discount: float = 0.98
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 2.5e-4
    lr_decay: bool = True
    max_grad_norm: float = 0.5
    minibatches: int = 40
    epochs: int = 4
    clip_ratio: float = 0.5
    value_clip: float = 0.0          # 0 disables value clipping
    normalize_advantages: bool = True
    # divide rewards by the running std of per-env discounted returns
    reward_norm: bool = True
    reward_scale: float = 1.0
    # the horizon is a time limit, not a terminal state: bootstrap from V(final obs)
    bootstrap_time_limit: bool = True
    # subtract the batch-mean reward before GAE; with a fixed horizon this shifts
    # every return by the same amount, so the policy ordering is unchanged
    center_rewards: bool = False
    n_envs: int = 8
    steps_per_env: int = 2048
    head_hidden: int = 128
    init_log_std: float = 0.0
    # False gives the value head its own tokenizer + encoder
    shared_trunk: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "PPOHyper":
        for name in ("discount", "gae_lambda"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"ppo.{name} must lie in [0, 1], got {v}")
        for name in ("entropy_coef", "value_coef", "lr", "value_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"ppo.{name} must be >= 0")
        for name in ("max_grad_norm", "clip_ratio", "reward_scale", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ppo.{name} must be > 0")
        for name in ("minibatches", "epochs", "n_envs", "steps_per_env", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"ppo.{name} must be >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("ppo.adam_beta1 and ppo.adam_beta2 must lie in [0, 1)")
        if not LOG_STD_MIN <= self.init_log_std <= LOG_STD_MAX:
            raise ValueError(f"ppo.init_log_std must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]")
        return self


@dataclass
class PolicyOutput:
    mean: Tensor        # [B, A]
    log_std: Tensor     # [A], clamped
    value: Tensor       # [B]
    rep: Representation


class PolicyModel:
    def __init__(self, encoder_cfg: EncoderConfig, action_dim: int, rng: np.random.Generator,
                 dtype=np.float32, head_hidden: int = 128, init_log_std: float = 0.0, shared_trunk: bool = True):
        encoder_cfg.validate()
        self.action_dim = action_dim
        self.tokenizer = Tokenizer(encoder_cfg.d, rng, encoder_cfg.tokenizer_hidden, dtype)
        self.encoder = Encoder(encoder_cfg, rng, dtype)
        # a second tokenizer + encoder feeding only the value head
        self.value_trunk: tuple[Tokenizer, Encoder] | None = None
        if not shared_trunk:
            self.value_trunk = (Tokenizer(encoder_cfg.d, rng, encoder_cfg.tokenizer_hidden, dtype),
                                Encoder(encoder_cfg, rng, dtype))
        dz = encoder_cfg.d_z
        self.policy_head = MLP([dz, head_hidden, action_dim], rng, dtype, out_gain=0.01)
        self.value_head = MLP([dz, head_hidden, 1], rng, dtype)
        self.log_std = dm.parameter(np.full(action_dim, init_log_std), dtype=dtype)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        trunk = self.tokenizer.named_parameters("tokenizer") + self.encoder.named_parameters("encoder")
        if self.value_trunk is not None:
            tok, enc = self.value_trunk
            trunk += tok.named_parameters("value_tokenizer") + enc.named_parameters("value_encoder")
        return (trunk
                + self.policy_head.named_parameters("policy")
                + self.value_head.named_parameters("value")
                + [("log_std", self.log_std)])

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, obs: ObjectSet) -> PolicyOutput:
        rep = self.encoder(self.tokenizer(obs))
        mean = self.policy_head(rep.z)
        value_z = rep.z
        if self.value_trunk is not None:
            tok, enc = self.value_trunk
            value_z = enc(tok(obs)).z
        value = dm.reshape(self.value_head(value_z), (-1,))
        return PolicyOutput(mean, dm.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX), value, rep)


def gaussian_log_prob(actions: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    z = (actions - mean) / dm.exp(log_std)
    A = mean.shape[-1]
    return (dm.reduce_sum(dm.square(z), axis=-1) * -0.5) - dm.reduce_sum(log_std) - A * HALF_LOG_2PI


def gaussian_entropy(log_std: Tensor) -> Tensor:
    return dm.reduce_sum(log_std) + log_std.shape[-1] * HALF_LOG_2PIE


def _forward_numpy(model: PolicyModel, obs_list: Sequence[ObjectSet]):
    n = len(obs_list)
    means = np.zeros((n, model.action_dim), dtype=np.float64)
    values = np.zeros(n, dtype=np.float64)
    log_std = None
    for idx, batch in group_by_shape(obs_list):
        out = model(batch)
        means[idx] = out.mean.data
        values[idx] = out.value.data
        log_std = out.log_std.data.astype(np.float64)
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(values))):
        raise TrainingAborted("non-finite policy or value output",
                              {"mean": means.tolist(), "value": values.tolist()})
    return means, log_std, values


def sample_action(model: PolicyModel, obs: ObjectSet | Sequence[ObjectSet], rng: np.random.Generator | None,
                  deterministic: bool = False):
    """Returns ``(action, log_prob, value)``; batched when given a list of observations."""
    single = isinstance(obs, ObjectSet)
    obs_list = [obs] if single else list(obs)
    mean, log_std, value = _forward_numpy(model, obs_list)
    std = np.exp(log_std)
    if deterministic:
        action = mean
    else:
        action = mean + std * rng.standard_normal(mean.shape)
    z = (action - mean) / std
    logp = -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - mean.shape[-1] * HALF_LOG_2PI
    if single:
        return action[0], float(logp[0]), float(value[0])
    return action, logp, value


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    return max(0.0, lr0 * (1.0 - step / total_steps))


def gae(rewards, values, dones, bootstrap, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a ``[T, ...]`` time axis.

    ``dones[t]`` marks that the episode ended after step ``t``; no value is
    bootstrapped across it. ``bootstrap`` is V of the observation after the
    last step. Returns raw (unnormalised) advantages and ``advantages + values``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if not (r.shape == v.shape == d.shape):
        raise ValueError(f"rewards/values/dones must share a shape: {r.shape}, {v.shape}, {d.shape}")
    T = r.shape[0]
    adv = np.zeros_like(r)
    last = np.zeros_like(r[0])
    next_v = np.asarray(bootstrap, dtype=np.float64) * np.ones_like(r[0])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * next_v * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
        next_v = v[t]
    return adv, adv + v


@dataclass
class TrajectoryBatch:
    """Time-major rollout storage for ``E`` environments over ``T`` steps.

    ``obs`` is flattened time-major (index ``t * E + e``) and may mix set sizes.
    ``final_values`` holds V of the observation an episode ended on (zero
    elsewhere), for bootstrapping through time-limit ends. ``success`` holds
    the final fractional overlap at steps where an episode ended and NaN
    elsewhere.
    """

    obs: list[ObjectSet]
    actions: np.ndarray       # [T, E, A]
    log_probs: np.ndarray     # [T, E]
    rewards: np.ndarray       # [T, E]
    values: np.ndarray        # [T, E]
    dones: np.ndarray         # [T, E]
    bootstrap: np.ndarray     # [E]
    final_values: np.ndarray  # [T, E]
    success: np.ndarray       # [T, E]
    episode_returns: np.ndarray  # [T, E], NaN except at episode ends

    def __len__(self) -> int:
        return self.rewards.size

    @property
    def finished_success(self) -> np.ndarray:
        return self.success[np.isfinite(self.success)]


class RolloutState:
    """Per-env bookkeeping that persists across rollout phases."""

    def __init__(self, envs: Sequence[PushEnv]):
        self.envs = list(envs)
        self.obs = [env.reset() for env in self.envs]
        self.returns = np.zeros(len(self.envs))

    def to_dict(self) -> dict[str, Any]:
        return {"envs": [e.get_state() for e in self.envs], "returns": self.returns.tolist(),
                "obs": [[o.cubes.tolist(), o.effectors.tolist(), o.goal.tolist()] for o in self.obs]}

    def load_dict(self, blob: dict[str, Any]) -> None:
        for env, st in zip(self.envs, blob["envs"]):
            env.set_state(st)
        self.returns = np.asarray(blob["returns"], dtype=np.float64)
        self.obs = [ObjectSet(np.asarray(c, np.float32).reshape(-1, 18), np.asarray(e, np.float32).reshape(-1, 10),
                              np.asarray(g, np.float32)) for c, e, g in blob["obs"]]


class ReturnScaler:
    """Running variance of per-environment discounted returns.

    Rewards divided by ``std`` keep value targets near unit scale whatever the
    reward weights are. Returns restart at episode ends.
    """

    def __init__(self, n_envs: int, gamma: float):
        self.gamma = gamma
        self.returns = np.zeros(n_envs)
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    @property
    def std(self) -> float:
        var = self.m2 / self.count if self.count else 1.0
        return math.sqrt(var + 1e-8)

    def observe(self, rewards: np.ndarray, dones: np.ndarray) -> None:
        """Fold a ``[T, E]`` block of rewards into the running statistics."""
        rets = np.empty_like(rewards, dtype=np.float64)
        for t in range(rewards.shape[0]):
            self.returns = self.returns * self.gamma + rewards[t]
            rets[t] = self.returns
            self.returns[dones[t] > 0] = 0.0
        n_b, mean_b = rets.size, float(rets.mean())
        m2_b = float(((rets - mean_b) ** 2).sum())
        n = self.count + n_b
        delta = mean_b - self.mean
        self.m2 += m2_b + delta * delta * self.count * n_b / n
        self.mean += delta * n_b / n
        self.count = n

    def to_dict(self) -> dict[str, Any]:
        return {"returns": self.returns.tolist(), "count": self.count, "mean": self.mean, "m2": self.m2}

    def load_dict(self, blob: dict[str, Any]) -> None:
        self.returns = np.asarray(blob["returns"], dtype=np.float64)
        self.count = int(blob["count"])
        self.mean = float(blob["mean"])
        self.m2 = float(blob["m2"])


def collect_rollouts(model: PolicyModel, rollout: RolloutState, steps_per_env: int,
                     rng: np.random.Generator) -> TrajectoryBatch:
    envs = rollout.envs
    E, A = len(envs), model.action_dim
    T = steps_per_env
    obs_store: list[ObjectSet] = []
    actions = np.zeros((T, E, A))
    logps = np.zeros((T, E))
    rewards = np.zeros((T, E))
    values = np.zeros((T, E))
    dones = np.zeros((T, E))
    final_values = np.zeros((T, E))
    success = np.full((T, E), np.nan)
    ep_returns = np.full((T, E), np.nan)
    for t in range(T):
        act, lp, val = sample_action(model, rollout.obs, rng)
        obs_store.extend(rollout.obs)
        actions[t], logps[t], values[t] = act, lp, val
        ended: list[tuple[int, ObjectSet]] = []
        for e, env in enumerate(envs):
            try:
                nobs, r, done, info = env.step(act[e])
            except Exception as exc:
                raise RuntimeError(f"environment {e} failed at rollout step {t}: {exc}") from exc
            rewards[t, e] = r
            rollout.returns[e] += r
            if done:
                dones[t, e] = 1.0
                success[t, e] = info["success"]
                ep_returns[t, e] = rollout.returns[e]
                rollout.returns[e] = 0.0
                ended.append((e, nobs))
                nobs = env.reset()
            rollout.obs[e] = nobs
        if ended:
            _, _, v_final = _forward_numpy(model, [o for _, o in ended])
            for (e, _), v in zip(ended, v_final):
                final_values[t, e] = v
    _, _, bootstrap = _forward_numpy(model, rollout.obs)
    return TrajectoryBatch(obs_store, actions, logps, rewards, values, dones, bootstrap, final_values, success,
                           ep_returns)


class _GroupedObs:
    """Observations pre-stacked by set shape for fast minibatch gathers."""

    def __init__(self, obs: Sequence[ObjectSet]):
        n = len(obs)
        self.group = np.zeros(n, dtype=np.int64)
        self.pos = np.zeros(n, dtype=np.int64)
        self.batches = []
        for g, (idx, batch) in enumerate(group_by_shape(obs)):
            self.group[idx] = g
            self.pos[idx] = np.arange(len(idx))
            self.batches.append(batch)

    def split(self, idx: np.ndarray):
        for g, batch in enumerate(self.batches):
            sel = idx[self.group[idx] == g]
            if len(sel):
                yield sel, batch.take(self.pos[sel])


def ppo_loss(model: PolicyModel, obs: ObjectSet, actions, old_logp, advantages, returns, old_values,
             hyper: PPOHyper, n_total: int):
    """Loss terms for one uniformly-shaped chunk, each already divided by ``n_total``.

    Returns ``(loss, stats)`` where ``stats`` holds numpy sums for diagnostics.
    """
    dtype = model.log_std.dtype
    out = model(obs)
    logp = gaussian_log_prob(Tensor(actions.astype(dtype)), out.mean, out.log_std)
    ratio = dm.exp(logp - Tensor(old_logp.astype(dtype)))
    adv = Tensor(advantages.astype(dtype))
    c = hyper.clip_ratio
    surr = dm.minimum(ratio * adv, dm.clip(ratio, 1.0 - c, 1.0 + c) * adv)
    pg = dm.reduce_sum(surr) * (-1.0 / n_total)
    ret = Tensor(returns.astype(dtype))
    verr = dm.square(out.value - ret)
    if hyper.value_clip > 0:
        old_v = Tensor(old_values.astype(dtype))
        clipped = old_v + dm.clip(out.value - old_v, -hyper.value_clip, hyper.value_clip)
        verr_c = dm.square(clipped - ret)
        verr = verr_c + dm.relu(verr - verr_c)      # elementwise max
    vloss = dm.reduce_sum(verr) * (0.5 / n_total)
    ent = gaussian_entropy(out.log_std)
    frac = len(advantages) / n_total
    loss = pg + vloss * hyper.value_coef - ent * (hyper.entropy_coef * frac)
    r = ratio.data.astype(np.float64)
    log_r = logp.data.astype(np.float64) - old_logp
    stats = {
        "policy_loss": float(pg.data),
        "value_loss": float(vloss.data),
        "entropy": float(ent.data) * frac,
        "clip_frac": float(np.sum(np.abs(r - 1.0) > c)) / n_total,
        "approx_kl": float(np.sum((r - 1.0) - log_r)) / n_total,
    }
    return loss, stats


def advantage_targets(batch: TrajectoryBatch, hyper: PPOHyper) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (advantages, value targets) for a batch, after reward shaping and normalisation."""
    rewards = batch.rewards * hyper.reward_scale
    if hyper.center_rewards:
        rewards = rewards - rewards.mean()
    if hyper.bootstrap_time_limit:
        rewards = rewards + hyper.discount * batch.final_values
    adv, ret = gae(rewards, batch.values, batch.dones, batch.bootstrap, hyper.discount, hyper.gae_lambda)
    adv, ret = adv.reshape(-1), ret.reshape(-1)
    if hyper.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


def ppo_update(model: PolicyModel, optimizer: dm.Adam, batch: TrajectoryBatch, hyper: PPOHyper,
               lr: float, rng: np.random.Generator) -> dict[str, float]:
    """Epochs of shuffled minibatch updates. Returns mean diagnostics."""
    adv, ret = advantage_targets(batch, hyper)
    actions = batch.actions.reshape(len(batch), -1)
    old_logp = batch.log_probs.reshape(-1)
    old_values = batch.values.reshape(-1)
    grouped = _GroupedObs(batch.obs)
    params = model.parameters()
    n = len(batch)
    totals: dict[str, float] = {}
    steps = 0
    for _epoch in range(hyper.epochs):
        perm = rng.permutation(n)
        for mb in np.array_split(perm, min(hyper.minibatches, n)):
            with dm.Tape() as tape:
                loss = None
                stats_mb: dict[str, float] = {}
                for sel, obs in grouped.split(mb):
                    part, stats = ppo_loss(model, obs, actions[sel], old_logp[sel], adv[sel], ret[sel],
                                           old_values[sel], hyper, len(mb))
                    loss = part if loss is None else loss + part
                    for k, v in stats.items():
                        stats_mb[k] = stats_mb.get(k, 0.0) + v
            if not np.isfinite(loss.data):
                raise TrainingAborted("non-finite PPO loss", {"stats": stats_mb, "lr": lr})
            grads = dm.backward(tape, loss, params)
            grads, gnorm = dm.clip_global_norm(grads, hyper.max_grad_norm)
            optimizer.step(grads, lr)
            stats_mb["loss"] = float(loss.data)
            stats_mb["grad_norm"] = gnorm
            for k, v in stats_mb.items():
                totals[k] = totals.get(k, 0.0) + v
            steps += 1
    return {k: v / steps for k, v in totals.items()}


def build_model(encoder_cfg: EncoderConfig, hyper: PPOHyper, action_dim: int, seed: int,
                dtype=np.float32) -> PolicyModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return PolicyModel(encoder_cfg, action_dim, rng, dtype, hyper.head_hidden, hyper.init_log_std,
                       hyper.shared_trunk)


class Trainer:
    """Owns model, optimizer, environments and random streams for one run."""

    def __init__(self, env_cfg, reward_cfg, encoder_cfg: EncoderConfig, hyper: PPOHyper,
                 seed: int, total_steps: int, dtype=np.float32):
        self.env_cfg = env_cfg
        self.reward_cfg = reward_cfg
        self.hyper = hyper.validate()
        self.total_steps = total_steps
        self.seed = seed
        action_dim = 2 * env_cfg.n_effectors
        self.model = build_model(encoder_cfg, hyper, action_dim, seed, dtype)
        self.optimizer = dm.Adam(self.model.parameters(), hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        envs = [PushEnv(env_cfg, reward_cfg, seed=[seed, 3, i]) for i in range(hyper.n_envs)]
        self.rollout = RolloutState(envs)
        self.return_scaler = ReturnScaler(hyper.n_envs, hyper.discount)
        self.global_step = 0
        self.updates = 0

    @property
    def steps_per_update(self) -> int:
        return self.hyper.n_envs * self.hyper.steps_per_env

    @property
    def done(self) -> bool:
        return self.global_step >= self.total_steps

    def update(self) -> dict[str, Any]:
        h = self.hyper
        lr = lr_schedule(self.global_step, self.total_steps, h.lr) if h.lr_decay else h.lr
        batch = collect_rollouts(self.model, self.rollout, h.steps_per_env, self.rng)
        raw_returns = batch.episode_returns
        if h.reward_norm:
            self.return_scaler.observe(batch.rewards, batch.dones)
            batch = replace(batch, rewards=batch.rewards / self.return_scaler.std)
        diag = ppo_update(self.model, self.optimizer, batch, h, lr, self.rng)
        self.global_step += len(batch)
        self.updates += 1
        finished = batch.finished_success
        returns = raw_returns[np.isfinite(raw_returns)]
        return {
            "step": self.global_step,
            "update": self.updates,
            "lr": lr,
            "episodes": int(finished.size),
            "mean_episode_reward": float(returns.mean()) if returns.size else None,
            "mean_success": float(finished.mean()) if finished.size else None,
            **diag,
        }

    def runtime_state(self) -> dict[str, Any]:
        return {"rng": self.rng.bit_generator.state, "rollout": self.rollout.to_dict(),
                "return_scaler": self.return_scaler.to_dict(),
                "global_step": self.global_step, "updates": self.updates}

    def load_runtime_state(self, blob: dict[str, Any]) -> None:
        self.rng.bit_generator.state = blob["rng"]
        self.rollout.load_dict(blob["rollout"])
        self.return_scaler.load_dict(blob["return_scaler"])
        self.global_step = int(blob["global_step"])
        self.updates = int(blob["updates"])
