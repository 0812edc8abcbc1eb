"""Object tokenizers and set encoders.

Every encoder maps a variable-size token set (K object tokens plus one goal
token) to a fixed-size representation ``z``:

* ``LRN``          z = LN(f(sum_i g([o_i; o_g])))                  K relations
* ``RN``           z = LN(f(sum_i sum_j g([x_i; x_j])))            (K+1)^2 relations
* ``ATTN``         z = LN(f(sum_i MHDPA(x)_i))                     (K+1)^2 scores
* ``NO_RELATION``  z = LN(f(sum_i g(x_i)))                         K+1 evaluations

where ``x`` is the object tokens with the goal token appended. The ``mean``
aggregation replaces LN(f(sum)) by f(mean).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .features import FEATURE_WIDTHS, ObjectSet

KINDS = ("LRN", "RN", "ATTN", "NO_RELATION")
AGGREGATIONS = ("layernorm_sum", "mean")


class ConfigError(ValueError):
    pass


def orthogonal(n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q


class Linear:
    """``y = x W + b`` with orthogonal ``W`` (scaled by ``gain``) and zero ``b``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, gain: float = 1.0):
        self.weight = dm.parameter(orthogonal(n_in, n_out, rng, gain), dtype=dtype)
        self.bias = dm.parameter(np.zeros(n_out), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = dm.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out


class MLP:
    """Linear layers with tanh between them and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, dtype=np.float32,
                 activation: str = "tanh", out_gain: float = 1.0):
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least an input and an output size")
        if activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {activation!r}")
        n = len(sizes) - 1
        self.layers = [Linear(a, b, rng, dtype, gain=out_gain if i == n - 1 else math.sqrt(2.0))
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.act = dm.tanh if activation == "tanh" else dm.relu

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}.{i}"))
        return out


@dataclass
class TokenSet:
    """Object tokens ``[B, K, d]``, goal token ``[B, d]`` and a role per object row."""

    objects: Tensor
    goal: Tensor
    roles: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.objects.ndim != 3 or self.goal.ndim != 2:
            raise ConfigError("TokenSet expects objects [B, K, d] and goal [B, d]")
        if self.objects.shape[1] < 1:
            raise ConfigError("TokenSet needs at least one object token")
        if self.objects.shape[2] != self.goal.shape[1]:
            raise ConfigError(f"token widths differ: {self.objects.shape[2]} vs {self.goal.shape[1]}")
        if len(self.roles) != self.objects.shape[1]:
            raise ConfigError("one role tag per object token is required")

    @property
    def K(self) -> int:
        return self.objects.shape[1]

    @property
    def d(self) -> int:
        return self.goal.shape[1]

    @property
    def batch_size(self) -> int:
        return self.goal.shape[0]

    def permuted(self, perm: Sequence[int]) -> "TokenSet":
        perm = list(perm)
        return TokenSet(dm.index(self.objects, (slice(None), perm)), self.goal,
                        tuple(self.roles[i] for i in perm))


class Tokenizer:
    """One small MLP per entity type mapping raw features to width-``d`` tokens."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int = 64, dtype=np.float32):
        self.d = d
        self.mlps = {tag: MLP([width, hidden, d], rng, dtype) for tag, width in FEATURE_WIDTHS.items()}

    def __call__(self, obs: ObjectSet) -> TokenSet:
        obs = obs.as_batch()
        dtype = self.mlps["goal"].layers[0].weight.dtype
        parts, roles = [], []
        if obs.n_cubes:
            parts.append(self.mlps["cube"](Tensor(obs.cubes.astype(dtype, copy=False))))
            roles += ["cube"] * obs.n_cubes
        if obs.n_effectors:
            parts.append(self.mlps["effector"](Tensor(obs.effectors.astype(dtype, copy=False))))
            roles += ["effector"] * obs.n_effectors
        objects = parts[0] if len(parts) == 1 else dm.concat(parts, axis=1)
        goal = self.mlps["goal"](Tensor(obs.goal.astype(dtype, copy=False)))
        return TokenSet(objects, goal, tuple(roles))

    def named_parameters(self, prefix: str = "tokenizer") -> list[tuple[str, Tensor]]:
        out = []
        for tag in ("cube", "goal", "effector"):
            out.extend(self.mlps[tag].named_parameters(f"{prefix}.{tag}"))
        return out


def tokenize(tokenizer: Tokenizer, features: ObjectSet) -> TokenSet:
    return tokenizer(features)


@dataclass
class EncoderConfig:
    kind: str = "LRN"
    d: int = 64
    d_z: int = 25
    g_depth: int = 4
    g_width: int = 64
    f_form: str = "linear"
    aggregation: str = "layernorm_sum"
    heads: int = 2
    tokenizer_hidden: int = 64
    activation: str = "tanh"
    ln_eps: float = 1e-5

    def validate(self) -> "EncoderConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"encoder.kind must be one of {KINDS}, got {self.kind!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"encoder.aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.f_form != "linear":
            raise ConfigError(f"encoder.f_form must be 'linear', got {self.f_form!r}")
        for name in ("d", "d_z", "g_depth", "g_width", "heads", "tokenizer_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name} must be >= 1")
        if self.kind == "ATTN" and self.d % self.heads:
            raise ConfigError(f"encoder.d={self.d} is not divisible by encoder.heads={self.heads}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"encoder.activation must be tanh or relu, got {self.activation!r}")
        if self.ln_eps <= 0:
            raise ConfigError("encoder.ln_eps must be positive")
        return self


def relation_count(kind: str, K: int) -> int:
    """Number of g evaluations (or attention scores) for one set of K objects."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    if kind == "LRN":
        return K
    if kind == "NO_RELATION":
        return K + 1
    if kind in ("RN", "ATTN"):
        return (K + 1) ** 2
    raise ConfigError(f"unknown encoder kind {kind!r}")


@dataclass
class Representation:
    z: Tensor
    relations: Tensor | None = None          # [B, R, d] pre-aggregation embeddings
    relation_roles: tuple[str, ...] = ()
    attention: np.ndarray | None = None      # [B, heads, K+1, K+1]


@dataclass
class EvalCounter:
    relations: int = 0
    calls: int = 0

    def reset(self) -> None:
        self.relations = 0
        self.calls = 0


class Encoder:
    """Set encoder of any supported kind. Construct once, call on any K >= 1."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config.validate()
        c = config
        self.counter = EvalCounter()
        self.g: MLP | None = None
        if c.kind in ("LRN", "RN"):
            self.g = MLP([2 * c.d] + [c.g_width] * (c.g_depth - 1) + [c.d], rng, dtype, c.activation)
        elif c.kind == "NO_RELATION":
            self.g = MLP([c.d] + [c.g_width] * (c.g_depth - 1) + [c.d], rng, dtype, c.activation)
        else:
            self.q = Linear(c.d, c.d, rng, dtype, bias=False)
            self.k = Linear(c.d, c.d, rng, dtype, bias=False)
            self.v = Linear(c.d, c.d, rng, dtype, bias=False)
        self.f = Linear(c.d, c.d_z, rng, dtype)

    def named_parameters(self, prefix: str = "encoder") -> list[tuple[str, Tensor]]:
        out = []
        if self.g is not None:
            out.extend(self.g.named_parameters(f"{prefix}.g"))
        else:
            for name in ("q", "k", "v"):
                out.extend(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        out.extend(self.f.named_parameters(f"{prefix}.f"))
        return out

    def __call__(self, tokens: TokenSet) -> Representation:
        kind = self.config.kind
        if kind == "LRN":
            return self.encode_lrn(tokens)
        if kind == "RN":
            return self.encode_rn(tokens)
        if kind == "ATTN":
            return self.encode_attn(tokens)
        return self.encode_no_relation(tokens)

    def _count(self, tokens: TokenSet) -> None:
        self.counter.calls += 1
        self.counter.relations += tokens.batch_size * relation_count(self.config.kind, tokens.K)

    @staticmethod
    def _with_goal(tokens: TokenSet) -> Tensor:
        goal = dm.reshape(tokens.goal, (tokens.batch_size, 1, tokens.d))
        return dm.concat([tokens.objects, goal], axis=1)

    def encode_lrn(self, tokens: TokenSet) -> Representation:
        B, K, d = tokens.objects.shape
        goal = dm.broadcast_to(dm.reshape(tokens.goal, (B, 1, d)), (B, K, d))
        rel = self.g(dm.concat([tokens.objects, goal], axis=-1))
        self._count(tokens)
        return Representation(self.aggregate(rel), rel, tokens.roles)

    def encode_rn(self, tokens: TokenSet) -> Representation:
        x = self._with_goal(tokens)
        B, n, d = x.shape
        left = dm.broadcast_to(dm.reshape(x, (B, n, 1, d)), (B, n, n, d))
        right = dm.broadcast_to(dm.reshape(x, (B, 1, n, d)), (B, n, n, d))
        pairs = dm.reshape(dm.concat([left, right], axis=-1), (B, n * n, 2 * d))
        rel = self.g(pairs)
        self._count(tokens)
        roles = tuple(r for r in tokens.roles + ("goal",) for _ in range(n))
        return Representation(self.aggregate(rel), rel, roles)

    def encode_no_relation(self, tokens: TokenSet) -> Representation:
        rel = self.g(self._with_goal(tokens))
        self._count(tokens)
        return Representation(self.aggregate(rel), rel, tokens.roles + ("goal",))

    def encode_attn(self, tokens: TokenSet) -> Representation:
        c = self.config
        x = self._with_goal(tokens)
        B, n, d = x.shape
        h, dh = c.heads, d // c.heads

        def split(t):
            return dm.swapaxes(dm.reshape(t, (B, n, h, dh)), 1, 2)  # [B, h, n, dh]

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = dm.matmul(q, dm.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
        weights = dm.softmax_rows(scores)
        attended = dm.reshape(dm.swapaxes(dm.matmul(weights, v), 1, 2), (B, n, d))
        self._count(tokens)
        rep = Representation(self.aggregate(attended), attended, tokens.roles + ("goal",))
        rep.attention = weights.data
        return rep

    def aggregate(self, relations: Tensor) -> Tensor:
        return aggregate(relations, self.config.aggregation, self.f, self.config.ln_eps)


def aggregate(relations: Tensor, mode: str, f, eps: float = 1e-5) -> Tensor:
    """Pool ``[..., R, d]`` relations into ``z``: LN(f(sum)) or f(mean)."""
    if mode == "layernorm_sum":
        return dm.layer_norm(f(dm.sum_rows(relations)), eps)
    if mode == "mean":
        return f(dm.reduce_mean(relations, axis=-2))
    raise ConfigError(f"unknown aggregation mode {mode!r}")
