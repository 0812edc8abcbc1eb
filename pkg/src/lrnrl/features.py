"""Per-entity feature vectors shared between the environment and the encoders.

Layout per entity (planar scenes keep the 3-D widths):

    cube      type(1) size(3) position(3) orientation(4) lin_vel(3) ang_vel(3) id(1)  = 18
    goal      type(1) size(3) position(3) orientation(4) id(1)                        = 12
    effector  position(3) velocity(3) id(1) tip_position(3)                           = 10
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CUBE_WIDTH = 18
GOAL_WIDTH = 12
EFFECTOR_WIDTH = 10
FEATURE_WIDTHS = {"cube": CUBE_WIDTH, "goal": GOAL_WIDTH, "effector": EFFECTOR_WIDTH}

# column offsets used by diagnostics and tests
CUBE_POS = slice(4, 7)
CUBE_ORIENT = slice(7, 11)
CUBE_LINVEL = slice(11, 14)
CUBE_ANGVEL = slice(14, 17)
CUBE_ID = 17
GOAL_POS = slice(4, 7)
GOAL_ID = 11
EFFECTOR_POS = slice(0, 3)
EFFECTOR_ID = 6


class FeatureError(ValueError):
    pass


@dataclass
class ObjectSet:
    """A scene as a set of typed feature vectors.

    Unbatched: ``cubes [Nc, 18]``, ``effectors [M, 10]``, ``goal [12]``.
    Batched: the same with a leading batch axis. Row order inside ``cubes`` and
    ``effectors`` carries no meaning.
    """

    cubes: np.ndarray
    effectors: np.ndarray
    goal: np.ndarray

    def __post_init__(self) -> None:
        for tag, arr in (("cube", self.cubes), ("effector", self.effectors), ("goal", self.goal)):
            if arr.shape[-1] != FEATURE_WIDTHS[tag]:
                raise FeatureError(f"{tag} features must have width {FEATURE_WIDTHS[tag]}, got {arr.shape[-1]}")

    @property
    def batched(self) -> bool:
        return self.goal.ndim == 2

    @property
    def n_cubes(self) -> int:
        return self.cubes.shape[-2]

    @property
    def n_effectors(self) -> int:
        return self.effectors.shape[-2]

    @property
    def n_objects(self) -> int:
        return self.n_cubes + self.n_effectors

    def __len__(self) -> int:
        return self.goal.shape[0] if self.batched else 1

    def as_batch(self) -> "ObjectSet":
        if self.batched:
            return self
        return ObjectSet(self.cubes[None], self.effectors[None], self.goal[None])

    def take(self, idx) -> "ObjectSet":
        return ObjectSet(self.cubes[idx], self.effectors[idx], self.goal[idx])

    def permuted(self, rng: np.random.Generator) -> "ObjectSet":
        """Same scene with cube rows and effector rows shuffled (unbatched only)."""
        return ObjectSet(self.cubes[rng.permutation(self.n_cubes)],
                         self.effectors[rng.permutation(self.n_effectors)], self.goal)

    @staticmethod
    def from_entities(entities: Iterable[tuple[str, Sequence[float]]]) -> "ObjectSet":
        """Build from ``(type_tag, vector)`` pairs; exactly one goal is required."""
        rows: dict[str, list[np.ndarray]] = {"cube": [], "effector": [], "goal": []}
        for tag, vec in entities:
            if tag not in FEATURE_WIDTHS:
                raise FeatureError(f"unknown entity type {tag!r}")
            v = np.asarray(vec, dtype=np.float32)
            if v.shape != (FEATURE_WIDTHS[tag],):
                raise FeatureError(f"{tag} vector must have width {FEATURE_WIDTHS[tag]}, got {v.shape}")
            rows[tag].append(v)
        if len(rows["goal"]) != 1:
            raise FeatureError(f"exactly one goal entity required, got {len(rows['goal'])}")
        if not rows["cube"] and not rows["effector"]:
            raise FeatureError("at least one object entity is required")

        def block(tag):
            return np.stack(rows[tag]) if rows[tag] else np.zeros((0, FEATURE_WIDTHS[tag]), np.float32)

        return ObjectSet(block("cube"), block("effector"), rows["goal"][0])


def stack(sets: Sequence[ObjectSet]) -> ObjectSet:
    """Stack unbatched sets that share cube and effector counts."""
    return ObjectSet(np.stack([s.cubes for s in sets]),
                     np.stack([s.effectors for s in sets]),
                     np.stack([s.goal for s in sets]))


def group_by_shape(sets: Sequence[ObjectSet]) -> list[tuple[np.ndarray, ObjectSet]]:
    """Split a list of unbatched sets into uniformly-shaped stacked groups.

    Returns ``(indices, batch)`` pairs in ascending order of cube count.
    """
    keys: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(sets):
        keys.setdefault((s.n_cubes, s.n_effectors), []).append(i)
    out = []
    for key in sorted(keys):
        idx = np.asarray(keys[key])
        out.append((idx, stack([sets[i] for i in idx])))
    return out
