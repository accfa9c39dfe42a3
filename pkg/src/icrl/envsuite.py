"""Analytic multi-task continuous-control environments.

Three domains are provided, each with task-defining parameters that never
appear in observations:

``CVecReach``
    Point mass in ``[-1, 1]^d`` starting uniformly in ``[-0.2, 0.2]^d``.
    Observation is the position, action moves it by ``0.1 * a``. Reward is
    the negative distance to a hidden goal.
``CBandit``
    Stateless continuous bandit with a hidden optimum ``a*`` in ``[-1, 1]^k``.
    Observation is a constant zero vector, every episode is one step.
``DampedIntegrator``
    Second-order point mass with hidden goal and hidden drag ``c``, starting
    at rest uniformly in ``[-1, 1]^d``. Observation is position and velocity.

Reward ranges: CVecReach and CBandit rewards lie in ``[-2 sqrt(d), 0]``.
For DampedIntegrator the velocity grows at most ``0.1`` per step, so after
``T`` steps ``|p| <= 1 + 0.05 T (T + 1)`` per channel and the reward lies in
``[-sqrt(d) (2 + 0.05 T (T + 1)), 0]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

DOMAINS = ("CVecReach", "CBandit", "DampedIntegrator")

STEP_SIZE = 0.1
# CVecReach starts near the origin so episode returns are dominated by the policy, not the start
REACH_START_HALF_WIDTH = 0.2
REACH_GAIN = 10.0
# fraction of the remaining distance the damped-integrator demonstrator tries to close per step
INTEGRATOR_GAIN = 0.3


class EnvError(ValueError):
    pass


def _fmt(values) -> str:
    return ",".join(f"{v:+.2f}" for v in values)


@dataclass(frozen=True)
class TaskSpec:
    domain_id: str
    task_id: str
    obs_dim: int
    act_dim: int
    episode_len: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    hidden_params: tuple[float, ...]

    def __post_init__(self):
        if self.domain_id not in DOMAINS:
            raise EnvError(f"unknown domain {self.domain_id!r}")
        if self.obs_dim < 1 or self.act_dim < 1:
            raise EnvError("obs_dim and act_dim must be positive")
        if self.episode_len < 1:
            raise EnvError("episode_len must be >= 1")
        if len(self.action_low) != self.act_dim or len(self.action_high) != self.act_dim:
            raise EnvError("action bounds must have act_dim entries")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise EnvError("action_low must be < action_high per channel")
        expected = {
            "CVecReach": self.act_dim,
            "CBandit": self.act_dim,
            "DampedIntegrator": self.act_dim + 1,
        }[self.domain_id]
        if len(self.hidden_params) != expected:
            raise EnvError(
                f"{self.domain_id} expects {expected} hidden params, got {len(self.hidden_params)}"
            )

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)

    @property
    def goal(self) -> np.ndarray:
        """Hidden target: goal position, or the bandit optimum."""
        return np.asarray(self.hidden_params[: self.act_dim], dtype=np.float64)

    @property
    def drag(self) -> float:
        if self.domain_id != "DampedIntegrator":
            raise EnvError(f"{self.domain_id} has no drag parameter")
        return float(self.hidden_params[-1])

    @property
    def group_key(self) -> str:
        """Dimensionality-and-semantics key shared by tasks of one group."""
        return f"{self.domain_id}/obs{self.obs_dim}/act{self.act_dim}"

    def reward_bounds(self) -> tuple[float, float]:
        d = self.act_dim
        if self.domain_id == "DampedIntegrator":
            t = self.episode_len
            return -math.sqrt(d) * (2.0 + 0.05 * t * (t + 1)), 0.0
        return -2.0 * math.sqrt(d), 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "domain_id": self.domain_id,
            "task_id": self.task_id,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "episode_len": self.episode_len,
            "action_low": list(self.action_low),
            "action_high": list(self.action_high),
            "hidden_params": list(self.hidden_params),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskSpec":
        return cls(
            domain_id=d["domain_id"],
            task_id=d["task_id"],
            obs_dim=int(d["obs_dim"]),
            act_dim=int(d["act_dim"]),
            episode_len=int(d["episode_len"]),
            action_low=tuple(float(x) for x in d["action_low"]),
            action_high=tuple(float(x) for x in d["action_high"]),
            hidden_params=tuple(float(x) for x in d["hidden_params"]),
        )


def make_vec_reach(goal, episode_len: int = 20, task_id: str | None = None) -> TaskSpec:
    goal = tuple(float(g) for g in goal)
    d = len(goal)
    if d < 1:
        raise EnvError("goal must be non-empty")
    return TaskSpec(
        domain_id="CVecReach",
        task_id=task_id or f"CVecReach-d{d}-g[{_fmt(goal)}]",
        obs_dim=d,
        act_dim=d,
        episode_len=episode_len,
        action_low=(-1.0,) * d,
        action_high=(1.0,) * d,
        hidden_params=goal,
    )


def make_bandit(optimum, task_id: str | None = None) -> TaskSpec:
    optimum = tuple(float(a) for a in optimum)
    k = len(optimum)
    if k < 1:
        raise EnvError("optimum must be non-empty")
    return TaskSpec(
        domain_id="CBandit",
        task_id=task_id or f"CBandit-k{k}-a[{_fmt(optimum)}]",
        obs_dim=1,
        act_dim=k,
        episode_len=1,
        action_low=(-1.0,) * k,
        action_high=(1.0,) * k,
        hidden_params=optimum,
    )


def make_damped_integrator(goal, drag: float, episode_len: int = 25,
                           task_id: str | None = None) -> TaskSpec:
    goal = tuple(float(g) for g in goal)
    d = len(goal)
    if not 0.0 <= drag < 1.0:
        raise EnvError(f"drag must lie in [0, 1), got {drag}")
    return TaskSpec(
        domain_id="DampedIntegrator",
        task_id=task_id or f"DampedIntegrator-d{d}-g[{_fmt(goal)}]-c{drag:.2f}",
        obs_dim=2 * d,
        act_dim=d,
        episode_len=episode_len,
        action_low=(-1.0,) * d,
        action_high=(1.0,) * d,
        hidden_params=goal + (float(drag),),
    )


@dataclass
class EnvState:
    task: TaskSpec
    agent_state: np.ndarray
    step_index: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)

    @property
    def done(self) -> bool:
        return self.step_index >= self.task.episode_len


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool


def observe(state: EnvState) -> np.ndarray:
    task = state.task
    if task.domain_id == "CBandit":
        return np.zeros(1)
    # CVecReach: position; DampedIntegrator: position followed by velocity
    return state.agent_state.copy()


def reset(task: TaskSpec, seed: int) -> tuple[EnvState, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = task.act_dim
    if task.domain_id == "CVecReach":
        agent = rng.uniform(-REACH_START_HALF_WIDTH, REACH_START_HALF_WIDTH, size=d)
    elif task.domain_id == "DampedIntegrator":
        agent = np.concatenate([rng.uniform(-1.0, 1.0, size=d), np.zeros(d)])
    else:
        agent = np.zeros(0)
    state = EnvState(task=task, agent_state=agent, step_index=0, rng=rng)
    return state, observe(state)


def step(state: EnvState, action) -> StepResult:
    """Advance ``state`` in place by one step. Actions are clipped to the box."""
    task = state.task
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (task.act_dim,):
        raise EnvError(f"action shape {action.shape} does not match act_dim={task.act_dim}")
    if state.done:
        raise EnvError("episode finished; call reset()")
    a = np.clip(action, task.low, task.high)
    d = task.act_dim

    if task.domain_id == "CVecReach":
        pos = np.clip(state.agent_state + STEP_SIZE * a, -1.0, 1.0)
        state.agent_state = pos
        reward = -float(np.linalg.norm(pos - task.goal))
    elif task.domain_id == "CBandit":
        reward = -float(np.linalg.norm(a - task.goal))
    else:
        pos, vel = state.agent_state[:d], state.agent_state[d:]
        vel = (1.0 - task.drag) * vel + STEP_SIZE * a
        pos = pos + vel
        state.agent_state = np.concatenate([pos, vel])
        reward = -float(np.linalg.norm(pos - task.goal))

    state.step_index += 1
    return StepResult(obs=observe(state), reward=reward, done=state.done)


def demonstrator_action(task: TaskSpec, state: EnvState) -> np.ndarray:
    """Privileged analytic controller; it reads the hidden task parameters."""
    if state.task != task:
        raise EnvError("state does not belong to task")
    d = task.act_dim
    if task.domain_id == "CBandit":
        return task.goal.copy()
    if task.domain_id == "CVecReach":
        raw = REACH_GAIN * (task.goal - state.agent_state)
    else:
        pos, vel = state.agent_state[:d], state.agent_state[d:]
        desired_vel = INTEGRATOR_GAIN * (task.goal - pos)
        raw = (desired_vel - (1.0 - task.drag) * vel) / STEP_SIZE
    return np.clip(raw, task.low, task.high)


def random_action(task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(task.low, task.high)


def run_episode(task: TaskSpec, policy, seed: int) -> float:
    """Return of one episode under ``policy(state) -> action``."""
    state, _ = reset(task, seed)
    total = 0.0
    while not state.done:
        total += step(state, policy(state)).reward
    return total


def score_baselines(task: TaskSpec, n_episodes: int = 200, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo mean episode return of the uniform-random and demonstrator policies."""
    if n_episodes < 1:
        raise EnvError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    reset_seeds = rng.integers(0, 2**31 - 1, size=n_episodes)
    action_rng = np.random.default_rng(rng.integers(0, 2**31 - 1))
    random_returns = [
        run_episode(task, lambda s: random_action(task, action_rng), int(s)) for s in reset_seeds
    ]
    demo_returns = [
        run_episode(task, lambda s: demonstrator_action(task, s), int(s)) for s in reset_seeds
    ]
    return float(np.mean(random_returns)), float(np.mean(demo_returns))
