"""Append-only metrics stream and the per-directory run lock."""

from __future__ import annotations

import fcntl
import json
import math
import os
from typing import IO, Any, Iterator

METRIC_FIELDS = ("step", "update", "wall_clock", "lr", "episodes", "mean_episode_reward", "mean_success",
                 "policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl", "grad_norm", "loss")
LOCK_NAME = ".lock"


class RunLocked(RuntimeError):
    pass


class DirectoryLock:
    """Exclusive advisory lock on ``<dir>/.lock``; released when the process exits."""

    def __init__(self, directory: str):
        self.path = os.path.join(directory, LOCK_NAME)
        self._fh: IO[str] | None = None

    def __enter__(self) -> "DirectoryLock":
        fh = open(self.path, "a+")
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fh.close()
            raise RunLocked(f"{os.path.dirname(self.path)} is in use by another process") from None
        fh.seek(0)
        fh.truncate()
        fh.write(f"{os.getpid()}\n")
        fh.flush()
        self._fh = fh
        return self

    def __exit__(self, *exc) -> None:
        if self._fh is not None:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
            self._fh.close()
            self._fh = None


def _clean(v: Any) -> Any:
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


class MetricsWriter:
    """One JSON object per line; each line is flushed as soon as it is written."""

    def __init__(self, path: str):
        self.fh = open(path, "a", encoding="utf-8")
        self.last_step = -1

    def write(self, record: dict[str, Any]) -> None:
        if record["step"] <= self.last_step:
            raise ValueError(f"metric steps must increase: {record['step']} after {self.last_step}")
        self.last_step = record["step"]
        ordered = {k: _clean(record.get(k)) for k in METRIC_FIELDS}
        extra = {k: _clean(v) for k, v in record.items() if k not in ordered}
        self.fh.write(json.dumps({**ordered, **extra}, allow_nan=False) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path: str) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
