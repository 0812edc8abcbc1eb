"""Experiment configuration: INI sections mapped onto the component dataclasses.

Format::

    # comments start with '#' or ';'
    [encoder]
    kind = "RN"
    d_z = 25

    [ppo]
    lr = 0.00025

Values are JSON scalars (``true``/``false``, numbers, quoted strings); a bare
word is accepted as a string. Every key must name a dataclass field of its
section. Environment variables ``LRNRL__<SECTION>__<KEY>`` override file values.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..encoders import ConfigError, EncoderConfig
from ..env import EnvConfig, RewardConfig
from ..ppo import PPOHyper

ENV_PREFIX = "LRNRL__"


class ConfigFileError(ValueError):
    """Bad key, value or constraint; message names the key and, for files, the line."""


@dataclass
class RunConfig:
    total_steps: int = 3_000_000
    seed: int = 0
    eval_every: int = 10            # updates between evaluations; 0 disables
    eval_episodes: int = 100
    checkpoint_every: int = 10      # updates between checkpoints; 0 keeps only the final one
    out_dir: str = "runs"
    name: str = "default"

    def validate(self) -> "RunConfig":
        for name in ("total_steps", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"run.{name} must be >= 0")
        if self.eval_episodes < 1:
            raise ValueError("run.eval_episodes must be >= 1")
        if not self.name or "/" in self.name:
            raise ValueError("run.name must be a non-empty name without '/'")
        return self

    @property
    def path(self) -> str:
        return os.path.join(self.out_dir, self.name)


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ppo: PPOHyper = field(default_factory=PPOHyper)
    run: RunConfig = field(default_factory=RunConfig)

    SECTIONS = ("env", "reward", "encoder", "ppo", "run")

    def validate(self) -> "ExperimentConfig":
        for name in self.SECTIONS:
            try:
                getattr(self, name).validate()
            except (ValueError, ConfigError) as exc:
                raise ConfigFileError(str(exc)) from exc
        return self


def _coerce(raw: str, default: Any, where: str) -> Any:
    text = raw.strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigFileError(f"{where}: expected {type(default).__name__}, got {text!r}")


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return json.dumps(value)


def _line_index(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for no, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
        if m:
            lines.setdefault((section, m.group(1).strip()), no)
    return lines


def _apply(cfg: ExperimentConfig, section: str, key: str, raw: str, where: str) -> None:
    if section not in ExperimentConfig.SECTIONS:
        raise ConfigFileError(f"{where}: unknown section [{section}]")
    target = getattr(cfg, section)
    names = {f.name: f for f in dataclasses.fields(target)}
    if key not in names:
        raise ConfigFileError(f"{where}: unknown key {section}.{key}")
    setattr(target, key, _coerce(raw, getattr(target, key), f"{where}: {section}.{key}"))


def parse_text(text: str, source: str = "<config>",
               environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="\0none")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigFileError(str(exc)) from exc
    lines = _line_index(text)
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in ExperimentConfig.SECTIONS:
            no = next((n for (s, _), n in lines.items() if s == section), "?")
            raise ConfigFileError(f"{source}, line {no}: unknown section [{section}]")
        for key, raw in parser.items(section):
            _apply(cfg, section, key, raw, f"{source}, line {lines.get((section, key), '?')}")
    apply_env_overrides(cfg, os.environ if environ is None else environ)
    try:
        return cfg.validate()
    except ConfigFileError as exc:
        key = str(exc).split(" ", 1)[0]
        sec, _, name = key.partition(".")
        no = lines.get((sec, name))
        raise ConfigFileError(f"{source}, line {no}: {exc}" if no else f"{source}: {exc}") from exc


def apply_env_overrides(cfg: ExperimentConfig, environ: Mapping[str, str]) -> None:
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        parts = var[len(ENV_PREFIX):].split("__")
        if len(parts) != 2:
            raise ConfigFileError(f"environment variable {var}: expected {ENV_PREFIX}<SECTION>__<KEY>")
        _apply(cfg, parts[0].lower(), parts[1].lower(), environ[var], f"environment variable {var}")


def parse_config(path: str, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), source=path, environ=environ)


def serialize(cfg: ExperimentConfig) -> str:
    out = []
    for section in ExperimentConfig.SECTIONS:
        out.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)
