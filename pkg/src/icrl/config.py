"""YAML run configuration: task suites, schedules, model, training and evaluation settings.

A run file has these top-level sections::

    suite:            # tasks collected for training
      seeds_per_task: 1
      tasks:
        - domain: CVecReach          # CVecReach | CBandit | DampedIntegrator
          dim: 2
          grid: [-0.8, 0.0, 0.8]     # per-axis values, cartesian product ...
          exclude: [[0.0, 0.0]]      # ... minus these points
          # goals: [[0.5, -0.5]]     # or an explicit list (``optima`` for CBandit)
          drags: [0.0, 0.1]          # DampedIntegrator only
          episode_len: 20
          episodes: 100              # n_steps defaults to episode_len * episodes
          n_steps: 2000
          zero_noise_fraction: 0.1
          curvature: 1.0
          reward_scale: 1.0
    eval_suite:       # optional held-out tasks, same schema as ``suite``; any such
                      # section can be evaluated with ``icrl eval --suite NAME``
    model: {n_layers: 4, n_heads: 4, embed_dim: 64, ff_hidden_dim: 256, context_len: 512}
    train: {steps: 20000, batch_size: 8, grad_accum_steps: 1, lr: 1.0e-3, seq_len: 256, seed: 0}
    eval:  {n_shots: 40, seeds: [0, 1, 2, 3, 4], episodes_after_convergence: 10}
"""
from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .distill import NoiseSchedule
from .envsuite import DOMAINS, TaskSpec, make_bandit, make_damped_integrator, make_vec_reach

DEFAULT_EPISODE_LEN = {"CVecReach": 20, "CBandit": 1, "DampedIntegrator": 25}


class ConfigError(ValueError):
    pass


@dataclass
class SuiteEntry:
    task: TaskSpec
    schedule: NoiseSchedule
    reward_scale: float = 1.0


@dataclass
class Suite:
    entries: list[SuiteEntry]
    seeds_per_task: int = 1
    seed: int = 0

    @property
    def tasks(self) -> list[TaskSpec]:
        return [e.task for e in self.entries]

    @property
    def schedules(self) -> dict[str, NoiseSchedule]:
        return {e.task.task_id: e.schedule for e in self.entries}

    @property
    def reward_scales(self) -> dict[str, float]:
        return {e.task.task_id: e.reward_scale for e in self.entries}


def _points(spec: dict[str, Any], dim: int, key: str) -> list[tuple[float, ...]]:
    if key in spec:
        pts = [tuple(float(x) for x in p) for p in spec[key]]
    elif "grid" in spec:
        pts = list(itertools.product(*[[float(x) for x in spec["grid"]]] * dim))
    else:
        raise ConfigError(f"task entry needs '{key}' or 'grid'")
    excluded = {tuple(float(x) for x in p) for p in spec.get("exclude", [])}
    pts = [p for p in pts if p not in excluded]
    bad = [p for p in pts if len(p) != dim]
    if bad:
        raise ConfigError(f"points {bad} do not have dim={dim}")
    return pts


def expand_entry(spec: dict[str, Any]) -> list[SuiteEntry]:
    domain = spec.get("domain")
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    dim = int(spec.get("dim", 2))
    episode_len = int(spec.get("episode_len", DEFAULT_EPISODE_LEN[domain]))
    if domain == "CVecReach":
        tasks = [make_vec_reach(g, episode_len) for g in _points(spec, dim, "goals")]
    elif domain == "CBandit":
        tasks = [make_bandit(a) for a in _points(spec, dim, "optima" if "optima" in spec else "goals")]
    else:
        drags = [float(c) for c in spec.get("drags", [0.0])]
        tasks = [make_damped_integrator(g, c, episode_len)
                 for g in _points(spec, dim, "goals") for c in drags]
    out = []
    for task in tasks:
        n_steps = int(spec.get("n_steps", task.episode_len * int(spec.get("episodes", 100))))
        schedule = NoiseSchedule(
            total_steps=n_steps,
            zero_noise_fraction=float(spec.get("zero_noise_fraction", 0.1)),
            curvature=float(spec.get("curvature", 1.0)),
        )
        out.append(SuiteEntry(task, schedule, float(spec.get("reward_scale", 1.0))))
    return out


def parse_suite(doc: dict[str, Any]) -> Suite:
    if not isinstance(doc, dict) or not doc.get("tasks"):
        raise ConfigError("suite needs a non-empty 'tasks' list")
    entries = [e for spec in doc["tasks"] for e in expand_entry(spec)]
    ids = [e.task.task_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate tasks in suite")
    return Suite(entries, int(doc.get("seeds_per_task", 1)), int(doc.get("seed", 0)))


@dataclass
class RunConfig:
    """Resolved configuration: file contents merged with command-line overrides."""

    raw: dict[str, Any] = field(default_factory=dict)
    source: str | None = None

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.raw.get(name) or {})

    def suite(self, name: str = "suite") -> Suite | None:
        doc = self.raw.get(name)
        return parse_suite(doc) if doc else None

    def override(self, section: str, key: str, value) -> None:
        if value is not None:
            self.raw.setdefault(section, {})
            self.raw[section][key] = value

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def load_run_config(path=None) -> RunConfig:
    """Load a YAML run file; ``None`` gives the packaged default desk suite."""
    if path is None:
        text = resources.files("icrl").joinpath("configs/default.yaml").read_text()
        source = "icrl/configs/default.yaml"
    else:
        p = Path(path)
        if not p.exists():
            packaged = resources.files("icrl").joinpath(f"configs/{p.name}")
            if not packaged.is_file():
                raise ConfigError(f"config file {path} not found")
            text, source = packaged.read_text(), f"icrl/configs/{p.name}"
        else:
            text, source = p.read_text(), str(p)
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    return RunConfig(copy.deepcopy(doc), source)
