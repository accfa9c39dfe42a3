"""Continuous noise distillation: synthetic learning histories from a demonstrator.

At every global step ``n`` the executed action is the convex mixture
``(1 - eps(n)) * demonstrator(s) + eps(n) * u`` with ``u`` drawn uniformly
from the action box. ``eps`` is annealed over the whole trajectory, across
episode resets, so one trajectory reads as one improving learning run.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import envsuite
from .envsuite import TaskSpec

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    total_steps: int
    zero_noise_fraction: float = 0.1
    curvature: float = 1.0

    def __post_init__(self):
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ScheduleError(f"total_steps must be a positive integer, got {self.total_steps}")
        if not 0.0 <= self.zero_noise_fraction < 1.0:
            raise ScheduleError(f"zero_noise_fraction must lie in [0, 1), got {self.zero_noise_fraction}")
        if not self.curvature > 0.0:
            raise ScheduleError(f"curvature must be > 0, got {self.curvature}")

    @classmethod
    def default_for(cls, task: TaskSpec, episodes: int = 100) -> "NoiseSchedule":
        return cls(total_steps=task.episode_len * episodes)

    def to_dict(self) -> dict:
        return {
            "n_steps": self.total_steps,
            "zero_noise_fraction": self.zero_noise_fraction,
            "curvature": self.curvature,
        }


def epsilon(schedule: NoiseSchedule, n_s: int) -> float:
    """Noise proportion after ``n_s`` transitions.

    ``(1 - (n_s / ((1 - f) N))^p)^(1/p)`` up to the noise-free tail, 0 after.
    """
    n_total = schedule.total_steps
    if not 0 <= n_s <= n_total:
        raise ScheduleError(f"n_s={n_s} outside [0, {n_total}]")
    horizon = (1.0 - schedule.zero_noise_fraction) * n_total
    if n_s > horizon:
        return 0.0
    p = schedule.curvature
    inner = 1.0 - (n_s / horizon) ** p
    # inner can dip a hair below zero at n_s == horizon through rounding
    return float(max(inner, 0.0) ** (1.0 / p))


def epsilon_curve(schedule: NoiseSchedule) -> np.ndarray:
    return np.array([epsilon(schedule, n) for n in range(schedule.total_steps)])


class Transition(NamedTuple):
    obs: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    next_obs: np.ndarray


@dataclass
class Trajectory:
    """One noise-distilled history, stored column-wise as float32 arrays."""

    task_id: str
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    next_obs: np.ndarray
    schedule: NoiseSchedule | None = None
    seed: int = 0

    def __len__(self) -> int:
        return len(self.rewards)

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield Transition(self.obs[i], self.actions[i], float(self.rewards[i]),
                             bool(self.dones[i]), self.next_obs[i])

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    def episode_returns(self) -> np.ndarray:
        ends = np.flatnonzero(self.dones)
        starts = np.concatenate([[0], ends[:-1] + 1])
        return np.array([self.rewards[s:e + 1].sum(dtype=np.float64) for s, e in zip(starts, ends)])

    @property
    def n_episodes(self) -> int:
        return int(self.dones.sum())

    def equals(self, other: "Trajectory") -> bool:
        return (
            self.task_id == other.task_id
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("obs", "actions", "rewards", "dones", "next_obs")
            )
        )


def collect_trajectory(task: TaskSpec, schedule: NoiseSchedule, seed: int,
                       demonstrator_only: bool = False) -> Trajectory:
    """Roll the noise-annealed demonstrator for ``schedule.total_steps`` steps.

    With ``demonstrator_only`` the noise draws still happen (so resets follow
    the same seed stream) but ``eps`` is forced to zero.
    """
    rng = np.random.default_rng(seed)
    n = schedule.total_steps
    obs_buf = np.empty((n, task.obs_dim), dtype=np.float32)
    act_buf = np.empty((n, task.act_dim), dtype=np.float32)
    rew_buf = np.empty(n, dtype=np.float32)
    done_buf = np.empty(n, dtype=bool)
    next_buf = np.empty((n, task.obs_dim), dtype=np.float32)

    low, high = task.low, task.high
    state, obs = envsuite.reset(task, int(rng.integers(2**31 - 1)))
    for i in range(n):
        eps = 0.0 if demonstrator_only else epsilon(schedule, i)
        u = rng.uniform(low, high)
        action = (1.0 - eps) * envsuite.demonstrator_action(task, state) + eps * u
        action = np.clip(action, low, high)
        result = envsuite.step(state, action)
        obs_buf[i] = obs
        act_buf[i] = action
        rew_buf[i] = result.reward
        done_buf[i] = result.done
        next_buf[i] = result.obs
        obs = result.obs
        if result.done:
            state, obs = envsuite.reset(task, int(rng.integers(2**31 - 1)))
    return Trajectory(task.task_id, obs_buf, act_buf, rew_buf, done_buf, next_buf,
                      schedule=schedule, seed=seed)


def _collect_task(job):
    task, sched, seeds, demonstrator_only = job
    try:
        return [collect_trajectory(task, sched, seed, demonstrator_only) for seed in seeds], None
    except (envsuite.EnvError, ScheduleError) as exc:
        return None, exc


def collect_suite(tasks: Sequence[TaskSpec], schedules, seeds_per_task: int = 1,
                  reward_scales=None, base_seed: int = 0, demonstrator_only: bool = False,
                  norm_scope: str = "group", workers: int = 1):
    """Collect one trajectory per (task, seed) and pack them into a dataset bundle.

    ``schedules`` is either one NoiseSchedule shared by every task or a
    mapping/sequence aligned with ``tasks``. Failures on individual tasks are
    collected and raised together once every other task has been processed.
    ``workers > 1`` collects tasks in parallel processes; results do not
    depend on the worker count.
    """
    from .dataset import build_bundle

    if not tasks:
        raise ScheduleError("task list is empty")
    if seeds_per_task < 1:
        raise ScheduleError("seeds_per_task must be >= 1")
    if isinstance(schedules, NoiseSchedule):
        schedules = [schedules] * len(tasks)
    elif isinstance(schedules, dict):
        schedules = [schedules[t.task_id] for t in tasks]
    if len(schedules) != len(tasks):
        raise ScheduleError("one schedule per task required")

    jobs = [(task, sched, [base_seed + 1000 * ti + s for s in range(seeds_per_task)], demonstrator_only)
            for ti, (task, sched) in enumerate(zip(tasks, schedules))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_collect_task, jobs))
    else:
        outcomes = [_collect_task(job) for job in jobs]

    trajectories: dict[str, list[Trajectory]] = {}
    errors = []
    for (task, *_), (trajs, exc) in zip(jobs, outcomes):
        if exc is None:
            trajectories[task.task_id] = trajs
        else:
            errors.append((task.task_id, exc))
            logger.error("collection failed for %s: %s", task.task_id, exc)
    if errors:
        detail = "; ".join(f"{tid}: {exc}" for tid, exc in errors)
        raise ScheduleError(f"{len(errors)} task(s) failed: {detail}")
    ok_tasks = [t for t in tasks if t.task_id in trajectories]
    return build_bundle(ok_tasks, trajectories, reward_scales=reward_scales,
                        schedules={t.task_id: s for t, s in zip(tasks, schedules)},
                        norm_scope=norm_scope)


def improvement_trend(traj: Trajectory) -> float:
    """Spearman correlation between episode index and episode return."""
    from scipy.stats import spearmanr

    returns = traj.episode_returns()
    if len(returns) < 2:
        return math.nan
    return float(spearmanr(np.arange(len(returns)), returns).statistic)
