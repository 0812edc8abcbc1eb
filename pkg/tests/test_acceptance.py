"""Acceptance criteria, one test per criterion.

A per-criterion PASS/FAIL/SKIP summary is printed at the end of the run.
Criteria 8 and 9 are multi-hour training runs and only execute with
``--run-long``.
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrnrl import diffmath as dm
from lrnrl.cli import checkpoint as ckpt
from lrnrl.cli.config import ExperimentConfig
from lrnrl.cli.main import make_trainer
from lrnrl.encoders import KINDS, Encoder, EncoderConfig, relation_count
from lrnrl.env import EnvConfig, PushEnv, RewardConfig, fractional_overlap, reward, reward_terms
from lrnrl.features import stack
from lrnrl.harness import evaluate, generalization_sweep, random_tokens, scaling_bench
from lrnrl.ppo import PPOHyper, Trainer, build_model, gae

from .gradcheck import finite_difference, max_rel_error
from .test_env import manual_state, overlap_monte_carlo
from .test_ppo import gae_oracle

# Learning-gate setup shared by criteria 7 and 9: one cube, horizon 100, 1e6 env steps.
GATE_ENV = EnvConfig(n_cubes=1, horizon=100)
GATE_PPO = PPOHyper(n_envs=8, steps_per_env=256)
GATE_STEPS = 1_000_000
GATE_EVAL_EPISODES = 100
GATE_EVAL_SEED = 12345


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def rel_diff(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12))


def train_and_score(env_cfg, reward_cfg, kind="LRN", hyper=GATE_PPO, steps=GATE_STEPS, seed=0):
    trainer = Trainer(env_cfg, reward_cfg, EncoderConfig(kind=kind), hyper, seed=seed, total_steps=steps)
    while not trainer.done:
        trainer.update()
    return trainer.model


# 1 ------------------------------------------------------------------------------------------------

@criterion(1, "permutation invariance of z, all kinds")
def test_permutation_invariance(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(0)
    for kind in KINDS:
        enc = Encoder(EncoderConfig(kind=kind), np.random.default_rng(1))
        cases = [(3, list(itertools.permutations(range(3))))]
        cases += [(K, [rng.permutation(K) for _ in range(100)]) for K in (8, 16)]
        for K, perms in cases:
            tokens = random_tokens(K, enc.config.d, 4, np.random.default_rng(K))
            base = enc(tokens).z.data
            for perm in perms:
                worst = max(worst, rel_diff(base, enc(tokens.permuted(perm)).z.data))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel diff {worst:.2e}, {elapsed:.0f}s")
    assert worst <= 1e-5
    assert elapsed < 60


# 2 ------------------------------------------------------------------------------------------------

@criterion(2, "relation counts per kind, K=12 gives 12 vs 169")
def test_relation_counts(record_property):
    expected = {"LRN": lambda K: K, "NO_RELATION": lambda K: K + 1,
                "RN": lambda K: (K + 1) ** 2, "ATTN": lambda K: (K + 1) ** 2}
    small = EncoderConfig(d=8, d_z=4, g_width=8, heads=2)
    for kind in KINDS:
        enc = Encoder(replace(small, kind=kind), np.random.default_rng(0))
        for K in range(1, 17):
            enc.counter.reset()
            enc(random_tokens(K, small.d, 2, np.random.default_rng(K)))
            assert relation_count(kind, K) == expected[kind](K)
            assert enc.counter.relations == 2 * expected[kind](K), (kind, K)
    assert relation_count("LRN", 12) == 12
    assert relation_count("RN", 12) == 169
    record_property("detail", "LRN=12, RN=169 at K=12")


# 3 ------------------------------------------------------------------------------------------------

@criterion(3, "log-log time slope: LRN <= 1.2, RN and ATTN >= 1.6")
def test_scaling_slopes(record_property):
    t0 = time.perf_counter()
    res = scaling_bench(["LRN", "RN", "ATTN"], [4, 8, 16, 32, 64], repetitions=100, batch=32)
    elapsed = time.perf_counter() - t0
    s = res.slopes
    record_property("detail", ", ".join(f"{k} {v:.2f}" for k, v in s.items()) + f", {elapsed:.0f}s")
    assert elapsed < 600
    assert s["LRN"] <= 1.2
    assert s["RN"] >= 1.6
    assert s["ATTN"] >= 1.6


# 4 ------------------------------------------------------------------------------------------------

@criterion(4, "layernorm_sum moments fixed, mean-aggregation variance drifts with K")
def test_normalization(record_property):
    worst_mean = worst_var = 0.0
    for kind in KINDS:
        enc = Encoder(EncoderConfig(kind=kind, d=16, g_width=32, heads=4), np.random.default_rng(0))
        for K in range(1, 65):
            z = enc(random_tokens(K, 16, 2, np.random.default_rng(K))).z.data
            worst_mean = max(worst_mean, float(np.max(np.abs(z.mean(axis=-1)))))
            worst_var = max(worst_var, float(np.max(np.abs(z.var(axis=-1) - 1.0))))
    enc = Encoder(EncoderConfig(aggregation="mean"), np.random.default_rng(0))
    var = {K: float(enc(random_tokens(K, enc.config.d, 256, np.random.default_rng(K))).z.data.var(axis=-1).mean())
           for K in (1, 64)}
    ratio = max(var.values()) / min(var.values())
    record_property("detail", f"|mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}, mean-agg ratio {ratio:.2f}")
    assert worst_mean <= 1e-6
    assert worst_var <= 1e-4
    assert ratio >= 1.5


# 5 ------------------------------------------------------------------------------------------------

@criterion(5, "float64 gradient check of every network")
def test_gradients(record_property):
    t0 = time.perf_counter()
    env = PushEnv(EnvConfig(n_cubes=2, horizon=5), seed=0)
    obs = stack([env.reset(), env.reset()])
    cfg = EncoderConfig(d=8, d_z=5, g_width=8, g_depth=2, tokenizer_hidden=8, heads=2)
    worst = {}
    for kind in KINDS:
        model = build_model(replace(cfg, kind=kind), PPOHyper(head_hidden=8), 6, 0, dtype=np.float64)
        params = model.parameters()
        rng = np.random.default_rng(1)
        w_mean = rng.standard_normal((2, 6))
        w_val = rng.standard_normal(2)

        def loss():
            out = model(obs)
            return (dm.reduce_sum(out.mean * w_mean) + dm.reduce_sum(out.value * w_val)
                    + dm.reduce_sum(out.log_std))

        with dm.Tape() as tape:
            val = loss()
        ana = dm.backward(tape, val, params)
        # every entry of every parameter: tokenizers, relation/attention layers, f and both heads
        num = finite_difference(lambda: loss().item(), params, max_entries=10**9)
        worst[kind] = max_rel_error(ana, num)
    elapsed = time.perf_counter() - t0
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.0f}s")
    assert max(worst.values()) <= 1e-4
    assert elapsed < 300


# 6 ------------------------------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def _gae_matches_oracle(T, seed, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v = rng.standard_normal((T, 2)), rng.standard_normal((T, 2))
    d = (rng.uniform(size=(T, 2)) < 0.2).astype(float)
    boot = rng.standard_normal(2)
    adv, ret = gae(r, v, d, boot, gamma, lam)
    for e in range(2):
        oracle = gae_oracle(r[:, e], v[:, e], d[:, e], boot[e], gamma, lam)
        np.testing.assert_allclose(adv[:, e], oracle, atol=1e-6)
        np.testing.assert_allclose(ret[:, e], oracle + v[:, e], atol=1e-6)


@criterion(6, "GAE, overlap and reward oracles")
def test_oracles(record_property):
    _gae_matches_oracle()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(30):
        a = rng.uniform(0.3, 0.7, 2)
        b = a + rng.uniform(-0.15, 0.15, 2)
        worst = max(worst, abs(fractional_overlap(a, b, 0.12) - overlap_monte_carlo(a, b, 0.12)))
    assert worst <= 0.01
    for _ in range(200):
        x, y, gx, gy = rng.uniform(0.06, 0.94, 4)
        dx, dy = rng.uniform(-0.05, 0.05, 2)
        prev = manual_state([[x, y]], [[0.1, 0.1]], [gx, gy])
        cur = manual_state([[x + dx, y + dy]], [[0.1, 0.1]], [gx, gy])
        rho = fractional_overlap((x + dx, y + dy), (gx, gy), 0.12)
        by_hand = (100 * rho + 250 * (math.dist((x, y), (gx, gy)) - math.dist((x + dx, y + dy), (gx, gy)))
                   + 10 * (1 - rho) ** 0.05 * math.log(math.hypot(dx, dy) + 1e-5))
        terms = reward_terms(prev, cur, RewardConfig(), 0.12)
        assert reward(prev, cur, RewardConfig(), 0.12) == terms["sparse"] + terms["distance"] + terms["curiosity"]
        assert reward(prev, cur, RewardConfig(), 0.12) == pytest.approx(by_hand, rel=1e-12, abs=1e-12)
    record_property("detail", f"max overlap MC error {worst:.4f}")


# 7 ------------------------------------------------------------------------------------------------

@criterion(7, "LRN learning gate: mean final overlap >= 0.8 within 1e6 steps")
def test_learning_gate(record_property):
    t0 = time.perf_counter()
    model = train_and_score(GATE_ENV, RewardConfig())
    stats = evaluate(model, GATE_ENV, GATE_EVAL_EPISODES, seed=GATE_EVAL_SEED)
    record_property("detail", f"mean {stats.mean:.3f}, solved {stats.solved_fraction:.2f}, "
                              f"{time.perf_counter() - t0:.0f}s")
    assert stats.mean >= 0.8


# 8 ------------------------------------------------------------------------------------------------

@pytest.mark.long
@criterion(8, "zero-shot generalization: LRN flat, ATTN drops at >= 5 distractors")
def test_zero_shot_generalization(record_property):
    base = ExperimentConfig()
    env = base.env
    steps = base.run.total_steps
    scores = {}
    for kind in ("LRN", "ATTN"):
        model = train_and_score(env, base.reward, kind=kind, hyper=base.ppo, steps=steps)
        sweep = generalization_sweep(model, env, [0, 1, 2, 3, 4, 5, 6], episodes=GATE_EVAL_EPISODES,
                                     seed=GATE_EVAL_SEED).by_n()
        scores[kind] = {n: s.mean for n, s in sweep.items()}
    record_property("detail", "; ".join(f"{k} " + " ".join(f"{n}:{v:.2f}" for n, v in s.items())
                                        for k, s in scores.items()))
    train_n = env.n_distractors
    lrn = scores["LRN"]
    assert all(abs(lrn[n] - lrn[train_n]) <= 0.15 for n in (0, 1, 3, 4, 5, 6))
    attn = scores["ATTN"]
    assert all(attn[train_n] - attn[n] >= 0.25 for n in (5, 6))


# 9 ------------------------------------------------------------------------------------------------

@pytest.mark.long
@criterion(9, "reward ablation: no sparse term < 0.3, sparse + curiosity >= 0.8")
def test_reward_ablation(record_property):
    no_sparse = train_and_score(GATE_ENV, RewardConfig(use_sparse=False))
    sparse_curiosity = train_and_score(GATE_ENV, RewardConfig(use_distance=False))
    a = evaluate(no_sparse, GATE_ENV, GATE_EVAL_EPISODES, seed=GATE_EVAL_SEED).mean
    b = evaluate(sparse_curiosity, GATE_ENV, GATE_EVAL_EPISODES, seed=GATE_EVAL_SEED).mean
    record_property("detail", f"no sparse {a:.3f}, sparse+curiosity {b:.3f}")
    assert a < 0.3
    assert b >= 0.8


# 10 -----------------------------------------------------------------------------------------------

def _reproducibility_config():
    cfg = ExperimentConfig()
    cfg.env.n_cubes, cfg.env.horizon = 3, 20
    cfg.ppo.n_envs, cfg.ppo.steps_per_env, cfg.ppo.minibatches = 2, 32, 4
    cfg.run.total_steps, cfg.run.seed = 10 * 64, 3
    return cfg


def _state_bytes(trainer):
    return [p.data.tobytes() for p in trainer.model.parameters()]


@criterion(10, "10-update runs bit-identical, checkpoint resume identical")
def test_reproducibility(record_property):
    cfg = _reproducibility_config()
    a, b = make_trainer(cfg), make_trainer(cfg)
    recs_a = [a.update() for _ in range(10)]
    recs_b = [b.update() for _ in range(10)]
    assert recs_a == recs_b
    assert _state_bytes(a) == _state_bytes(b)

    resumed_from = make_trainer(cfg)
    for _ in range(4):
        resumed_from.update()
    blob = ckpt.encode(ckpt.from_trainer(resumed_from, cfg))
    c = make_trainer(cfg)
    ckpt.restore_trainer(c, ckpt.decode(blob))
    tail = [c.update() for _ in range(6)]
    assert tail == recs_a[4:]
    assert _state_bytes(c) == _state_bytes(a)
    record_property("detail", "10 updates, resume at update 4")
