"""Cold-start multi-shot rollouts with a sliding-window KV cache.

The context starts empty. Every environment step appends one token and, once
the window holds ``context_len`` tokens, the oldest token is evicted. ALiBi
biases depend only on position differences, so absolute positions keep
growing across evictions without drifting out of the trained range.

Two cache policies are available:

``exact`` (default)
    After an eviction the cached keys/values of the retained tokens are
    rebuilt with the window's first token as the start of context, so every
    step reproduces a full forward pass over the current window. The new
    token itself is always processed incrementally against the cache.
``stale``
    Keys/values are kept as computed and simply dropped on eviction. This is
    the cheap policy; with more than one layer the retained entries still
    carry information from evicted tokens, so outputs drift from a
    full-window recomputation after the first eviction.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.stats import trim_mean

from . import admodel
from . import numerics as nx
from .admodel import ModelParams
from .dataset import ObservationScaler, TaskRecord, TokenBatch
from .distill import NoiseSchedule, collect_trajectory
from .envsuite import TaskSpec, reset, score_baselines, step

logger = logging.getLogger(__name__)

CACHE_MODES = ("exact", "stale")


class CacheDesyncError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskNorm:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    reward_scale: float = 1.0

    @classmethod
    def identity(cls, task: TaskSpec) -> "TaskNorm":
        return cls(np.zeros(task.obs_dim), np.ones(task.obs_dim), 1.0)

    @classmethod
    def from_record(cls, rec: TaskRecord) -> "TaskNorm":
        return cls(rec.obs_mean, rec.obs_std, rec.reward_scale)

    @classmethod
    def for_task(cls, manifest, task: TaskSpec) -> "TaskNorm":
        """Statistics for ``task`` from a training manifest.

        Tasks outside the manifest borrow the shared statistics of their
        group when the manifest was normalized per group, and otherwise fall
        back to one freshly distilled trajectory.
        """
        if task.task_id in manifest.task_ids:
            return cls.from_record(manifest.record(task.task_id))
        group = manifest.group_for_key(task.group_key)
        if group is None:
            raise KeyError(f"no group {task.group_key} in manifest")
        rec = manifest.record(group.tasks[0])
        if manifest.norm_scope == "group":
            return cls(rec.obs_mean, rec.obs_std, rec.reward_scale)
        return cls.from_collection(task, reward_scale=rec.reward_scale)

    @classmethod
    def from_collection(cls, task: TaskSpec, schedule: NoiseSchedule | None = None, seed: int = 0,
                        reward_scale: float = 1.0) -> "TaskNorm":
        """Statistics for a task absent from the training manifest, from one distilled trajectory."""
        traj = collect_trajectory(task, schedule or NoiseSchedule.default_for(task), seed)
        scaler = ObservationScaler().fit(traj.obs)
        return cls(scaler.mean_, scaler.scale_, reward_scale)

    def obs(self, raw) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.obs_mean) / self.obs_std


@dataclass
class Token:
    """One context entry; in a batched context every field has a leading batch axis."""

    prev_action: np.ndarray
    prev_reward: float | np.ndarray
    prev_done: float | np.ndarray
    obs: np.ndarray


def _as_rows(token: Token, rows: int) -> Token:
    f = lambda a, *tail: np.asarray(a, dtype=np.float64).reshape(rows, *tail)
    return Token(f(token.prev_action, -1), f(token.prev_reward), f(token.prev_done), f(token.obs, -1))


class RolloutContext:
    """Ring buffer of at most ``context_len`` tokens plus per-layer key/value cache.

    With ``batch=B`` the context advances ``B`` rollouts in lockstep; with the
    default ``batch=None`` tokens and outputs carry no batch axis.
    """

    def __init__(self, params: ModelParams, group_id: int, cache_mode: str = "exact",
                 batch: int | None = None):
        if cache_mode not in CACHE_MODES:
            raise ValueError(f"cache_mode must be one of {CACHE_MODES}")
        if batch is not None and batch < 1:
            raise ValueError("batch must be >= 1")
        self.group_id = group_id
        self.capacity = params.config.context_len
        self.cache_mode = cache_mode
        self.batch = batch
        self.tokens: deque[Token] = deque()
        self.positions: deque[int] = deque()
        self.keys: list[torch.Tensor | None] = [None] * params.config.n_layers
        self.values: list[torch.Tensor | None] = [None] * params.config.n_layers
        self.step = 0
        self.shot = 0
        self.shot_returns: list[float] = []
        self.evictions = 0

    @property
    def rows(self) -> int:
        return self.batch or 1

    def __len__(self) -> int:
        return len(self.tokens)

    def check(self) -> None:
        for k, v in zip(self.keys, self.values):
            n = 0 if k is None else k.shape[-2]
            if n != len(self.tokens) or (v is not None and v.shape[-2] != n):
                raise CacheDesyncError(f"cache holds {n} entries for {len(self.tokens)} buffered tokens")
        if len(self.tokens) > self.capacity:
            raise CacheDesyncError("buffer exceeds context length")

    def window_batch(self, dtype: torch.dtype | None = None) -> TokenBatch:
        dtype = dtype or torch.get_default_dtype()
        toks = [_as_rows(x, self.rows) for x in self.tokens]
        t = lambda arrs: torch.as_tensor(np.stack(arrs, axis=1), dtype=dtype)
        return TokenBatch(
            group_id=self.group_id,
            prev_action=t([x.prev_action for x in toks]),
            prev_reward=t([x.prev_reward for x in toks]),
            prev_done=t([x.prev_done for x in toks]),
            obs=t([x.obs for x in toks]),
            positions=torch.as_tensor(list(self.positions), dtype=torch.int64),
        )


def _rebuild_cache(params: ModelParams, ctx: RolloutContext) -> None:
    """Recompute keys/values of the buffered window as if it were the whole context."""
    cfg = params.config
    if not ctx.tokens:
        ctx.keys = [None] * cfg.n_layers
        ctx.values = [None] * cfg.n_layers
        return
    batch = ctx.window_batch(params.dtype)
    x = admodel.encode_tokens(params, batch)
    bias = nx.alibi_bias(cfg.n_heads, batch.positions, batch.positions, dtype=x.dtype)
    for i in range(cfg.n_layers):
        q, k, v = admodel.block_qkv(params, i, x)
        ctx.keys[i], ctx.values[i] = k, v
        # the cache holds keys/values only, so the last block's output is never needed
        if i < cfg.n_layers - 1:
            x = admodel.block_finish(params, i, x, nx.causal_attention(q, k, v, bias))


def _evict(params: ModelParams, ctx: RolloutContext) -> None:
    ctx.tokens.popleft()
    ctx.positions.popleft()
    ctx.evictions += 1
    if ctx.cache_mode == "stale":
        ctx.keys = [k[..., 1:, :] for k in ctx.keys]
        ctx.values = [v[..., 1:, :] for v in ctx.values]
    else:
        _rebuild_cache(params, ctx)


@torch.no_grad()
def incremental_forward(params: ModelParams, ctx: RolloutContext, token: Token) -> np.ndarray:
    """Append ``token`` (evicting the oldest if full) and return the action predicted for it."""
    ctx.check()
    cfg = params.config
    token = _as_rows(token, ctx.rows)
    if len(ctx.tokens) == ctx.capacity:
        _evict(params, ctx)
    pos = ctx.step
    dtype = params.dtype
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)[:, None]
    x = admodel.embed_tokens(params, ctx.group_id, as_t(token.prev_action), as_t(token.prev_reward),
                             as_t(token.prev_done), as_t(token.obs))
    key_pos = list(ctx.positions) + [pos]
    bias = nx.alibi_bias(cfg.n_heads, [pos], key_pos, dtype=dtype)
    for i in range(cfg.n_layers):
        q, k, v = admodel.block_qkv(params, i, x)
        if ctx.keys[i] is not None:
            k = torch.cat([ctx.keys[i], k], dim=-2)
            v = torch.cat([ctx.values[i], v], dim=-2)
        ctx.keys[i], ctx.values[i] = k, v
        x = admodel.block_finish(params, i, x, nx.causal_attention(q, k, v, bias))
    out = admodel.decode(params, ctx.group_id, x)[:, 0].numpy().astype(np.float64)
    ctx.tokens.append(token)
    ctx.positions.append(pos)
    ctx.step += 1
    ctx.check()
    return out if ctx.batch else out[0]


@torch.no_grad()
def full_window_forward(params: ModelParams, ctx: RolloutContext) -> np.ndarray:
    """Oracle: plain forward over the buffered window, prediction for the newest token."""
    out = admodel.forward(params, ctx.window_batch(params.dtype))[:, -1].numpy().astype(np.float64)
    return out if ctx.batch else out[0]


def normalize_return(raw, random_score: float, demo_score: float):
    return (np.asarray(raw, dtype=np.float64) - random_score) / (demo_score - random_score)


def smooth(values, window: int = 3) -> np.ndarray:
    """Trailing moving average (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class ShotCurve:
    task_id: str
    raw: np.ndarray
    normalized: np.ndarray
    random_score: float = 0.0
    demo_score: float = 1.0
    seed: int | None = None

    @property
    def shots(self) -> int:
        return len(self.raw)

    @property
    def best_k(self) -> int:
        """1-based shot with the best 3-shot moving-average normalized return."""
        return int(np.argmax(smooth(self.normalized))) + 1

    def shots_to_reach(self, level: float) -> float:
        """First 1-based shot whose smoothed normalized return reaches ``level`` (inf if never)."""
        hits = np.flatnonzero(smooth(self.normalized) >= level)
        return float(hits[0] + 1) if len(hits) else float("inf")


@dataclass
class RolloutTrace:
    curve: ShotCurve
    actions: list[np.ndarray] = field(default_factory=list)
    oracle_diffs: list[float] = field(default_factory=list)
    evictions: int = 0


def batched_rollouts(params: ModelParams, jobs: Sequence[tuple[TaskSpec, int]], n_shots: int,
                     norms: Sequence[TaskNorm | None] | None = None,
                     baselines: Sequence[tuple[float, float] | None] | None = None,
                     mask_reward: bool = False, cache_mode: str = "exact",
                     check_oracle: bool = False) -> list[RolloutTrace]:
    """Cold-start rollouts of several (task, seed) jobs advanced in lockstep.

    All tasks must share one group and one episode length so that episode
    ends and evictions coincide. Each job sees only its own context row, so
    the result matches separate rollouts up to floating-point rounding.
    ``check_oracle`` recomputes the full window forward at every step and
    records the max abs difference to the incremental output.
    """
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    if not jobs:
        raise ValueError("no rollout jobs")
    tasks = [t for t, _ in jobs]
    if len({(t.group_key, t.episode_len) for t in tasks}) != 1:
        raise ValueError("batched rollouts need tasks with one group and one episode length")
    B = len(jobs)
    norms = [n or TaskNorm.identity(t) for n, t in zip(norms or [None] * B, tasks)]
    baselines = [b or score_baselines(t, n_episodes=200, seed=s)
                 for b, (t, s) in zip(baselines or [None] * B, jobs)]
    group = params.config.group_for_key(tasks[0].group_key)
    ctx = RolloutContext(params, group.group_id, cache_mode, batch=B)
    rngs = [np.random.default_rng(seed) for _, seed in jobs]
    traces = [RolloutTrace(curve=None) for _ in jobs]  # type: ignore[arg-type]
    low = np.stack([t.low for t in tasks])
    high = np.stack([t.high for t in tasks])
    scale = np.array([n.reward_scale for n in norms])

    def reset_all():
        started = [reset(t, int(r.integers(2**31 - 1))) for t, r in zip(tasks, rngs)]
        return [s for s, _ in started], [o for _, o in started]

    states, obs = reset_all()
    prev_action = np.zeros((B, tasks[0].act_dim))
    prev_reward, prev_done = np.zeros(B), np.zeros(B)
    returns = np.zeros((n_shots, B))
    for shot in range(n_shots):
        done = False
        while not done:
            token = Token(prev_action, np.zeros(B) if mask_reward else prev_reward * scale,
                          prev_done, np.stack([n.obs(o) for n, o in zip(norms, obs)]))
            action = incremental_forward(params, ctx, token)
            if check_oracle:
                diff = float(np.abs(action - full_window_forward(params, ctx)).max())
                for tr in traces:
                    tr.oracle_diffs.append(diff)
            executed = np.clip(action, low, high)
            results = [step(s, a) for s, a in zip(states, executed)]
            for tr, a in zip(traces, executed):
                tr.actions.append(a)
            prev_action = executed
            prev_reward = np.array([r.reward for r in results])
            returns[shot] += prev_reward
            done = results[0].done
            prev_done = np.full(B, float(done))
            obs = [r.obs for r in results]
        ctx.shot += 1
        states, obs = reset_all()
    for b, ((task, seed), tr) in enumerate(zip(jobs, traces)):
        raw = returns[:, b].copy()
        tr.curve = ShotCurve(task.task_id, raw, normalize_return(raw, *baselines[b]),
                             baselines[b][0], baselines[b][1], seed)
        tr.evictions = ctx.evictions
    return traces


def cold_start_rollout(params: ModelParams, task: TaskSpec, n_shots: int, seed: int,
                       norm: TaskNorm | None = None, baselines: tuple[float, float] | None = None,
                       mask_reward: bool = False, cache_mode: str = "exact",
                       check_oracle: bool = False) -> RolloutTrace:
    """Play ``n_shots`` episodes of one task starting from an empty context."""
    return batched_rollouts(params, [(task, seed)], n_shots, [norm], [baselines], mask_reward,
                            cache_mode, check_oracle)[0]


def iqm(values) -> float:
    """Interquartile mean: mean of the middle 50% of the values."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan")
    return float(trim_mean(v, 0.25))


@dataclass
class TaskReport:
    task: TaskSpec
    curves: list[ShotCurve]
    mean_curve: ShotCurve
    converged: float
    episodes_after_convergence: int

    @property
    def best_k(self) -> int:
        return self.mean_curve.best_k


@dataclass
class SuiteReport:
    tasks: list[TaskReport]

    def domains(self) -> dict[str, dict[str, float]]:
        out: dict[str, list[float]] = {}
        for t in self.tasks:
            out.setdefault(t.task.domain_id, []).append(t.converged)
        return {d: {"mean": float(np.mean(v)), "iqm": iqm(v), "tasks": len(v)}
                for d, v in sorted(out.items())}

    def mean_normalized_curve(self, tasks: Sequence[str] | None = None) -> np.ndarray:
        rows = [t.mean_curve.normalized for t in self.tasks
                if tasks is None or t.task.task_id in tasks]
        return np.mean(rows, axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "shot", "seed", "raw", "normalized"])
        for t in self.tasks:
            for c in t.curves:
                for k, (r, n) in enumerate(zip(c.raw, c.normalized), start=1):
                    w.writerow([t.task.task_id, k, c.seed, f"{r:.6f}", f"{n:.6f}"])
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [f"{'task':<44} {'best_k':>6} {'shot1':>7} {'final3':>7} {'converged':>9}"]
        for t in self.tasks:
            n = t.mean_curve.normalized
            lines.append(f"{t.task.task_id:<44} {t.best_k:>6d} {n[0]:>7.3f} "
                         f"{n[-3:].mean():>7.3f} {t.converged:>9.3f}")
        lines.append("")
        lines.append(f"{'domain':<20} {'tasks':>5} {'mean':>7} {'iqm':>7}")
        for d, s in self.domains().items():
            lines.append(f"{d:<20} {s['tasks']:>5d} {s['mean']:>7.3f} {s['iqm']:>7.3f}")
        return "\n".join(lines)


def evaluate_suite(params: ModelParams, tasks: Sequence[TaskSpec], n_shots: int,
                   episodes_after_convergence: int, seeds: Sequence[int],
                   norms: dict[str, TaskNorm] | None = None,
                   baselines: dict[str, tuple[float, float]] | None = None,
                   mask_reward: bool = False, cache_mode: str = "exact",
                   baseline_episodes: int = 500, max_batch: int = 8) -> SuiteReport:
    """Cold-start curves per task averaged over seeds, best-k selection and domain aggregates.

    Rollouts of tasks sharing a group and episode length run batched, at most
    ``max_batch`` at a time.

    The converged score of a task is the mean normalized return over the
    ``episodes_after_convergence`` shots starting at best-k (truncated at the
    last shot played).
    """
    if not tasks:
        raise ValueError("no tasks to evaluate")
    norms = norms or {}
    baselines = dict(baselines or {})
    for task in tasks:
        if task.task_id not in baselines:
            baselines[task.task_id] = score_baselines(task, baseline_episodes, seed=12345)
    buckets: dict[tuple, list[tuple[TaskSpec, int]]] = {}
    for task in tasks:
        for seed in seeds:
            buckets.setdefault((task.group_key, task.episode_len), []).append((task, seed))
    curves: dict[str, list[ShotCurve]] = {t.task_id: [] for t in tasks}
    for jobs in buckets.values():
        for lo in range(0, len(jobs), max_batch):
            chunk = jobs[lo:lo + max_batch]
            traces = batched_rollouts(params, chunk, n_shots,
                                      [norms.get(t.task_id) for t, _ in chunk],
                                      [baselines[t.task_id] for t, _ in chunk],
                                      mask_reward, cache_mode)
            for (task, _), tr in zip(chunk, traces):
                curves[task.task_id].append(tr.curve)
    reports = []
    for task in tasks:
        base = baselines[task.task_id]
        raw = np.mean([c.raw for c in curves[task.task_id]], axis=0)
        mean_curve = ShotCurve(task.task_id, raw, normalize_return(raw, *base), *base)
        k = mean_curve.best_k
        window = mean_curve.normalized[k - 1:k - 1 + episodes_after_convergence]
        reports.append(TaskReport(task, curves[task.task_id], mean_curve, float(window.mean()),
                                  episodes_after_convergence))
        logger.info("%s: best_k=%d converged=%.3f", task.task_id, k, reports[-1].converged)
    return SuiteReport(reports)
