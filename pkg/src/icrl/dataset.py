"""Cross-domain dataset: manifest, binary container, sub-sequence sampling.

Container layout (all integers little-endian)::

    b"ICRLDS01"
    u64 manifest length | manifest (UTF-8 JSON) | u32 CRC32(manifest)
    per task in manifest order, per trajectory in seed order:
        u64 n | obs f32[n, obs_dim] | action f32[n, act_dim] | reward f32[n]
              | done u8[n] | next_obs f32[n, obs_dim] | u32 CRC32(block)
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .distill import NoiseSchedule, Trajectory
from .envsuite import TaskSpec

MAGIC = b"ICRLDS01"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6
NORM_SCOPES = ("group", "task")


class DatasetError(Exception):
    pass


class FormatError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class ObservationScaler(TransformerMixin, BaseEstimator):
    """Per-channel standardizer with a floor on the standard deviation."""

    def __init__(self, std_floor: float = STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.maximum(X.std(axis=0), self.std_floor)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} channels, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return check_array(X, dtype=np.float64) * self.scale_ + self.mean_


@dataclass
class TaskRecord:
    task: TaskSpec
    group_id: int
    reward_scale: float
    obs_mean: np.ndarray
    obs_std: np.ndarray
    n_episodes: int
    n_timesteps: int
    trajectory_lengths: list[int]
    trajectory_seeds: list[int]
    schedule: dict | None = None

    @property
    def task_id(self) -> str:
        return self.task.task_id

    def normalize_obs(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_std

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task.to_dict(),
            "group_id": self.group_id,
            "reward_scale": self.reward_scale,
            "obs_mean": [float(x) for x in self.obs_mean],
            "obs_std": [float(x) for x in self.obs_std],
            "n_episodes": self.n_episodes,
            "n_timesteps": self.n_timesteps,
            "trajectory_lengths": list(self.trajectory_lengths),
            "trajectory_seeds": list(self.trajectory_seeds),
            "schedule": self.schedule,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskRecord":
        return cls(
            task=TaskSpec.from_dict(d["task"]),
            group_id=int(d["group_id"]),
            reward_scale=float(d["reward_scale"]),
            obs_mean=np.asarray(d["obs_mean"], dtype=np.float64),
            obs_std=np.asarray(d["obs_std"], dtype=np.float64),
            n_episodes=int(d["n_episodes"]),
            n_timesteps=int(d["n_timesteps"]),
            trajectory_lengths=[int(x) for x in d["trajectory_lengths"]],
            trajectory_seeds=[int(x) for x in d["trajectory_seeds"]],
            schedule=d.get("schedule"),
        )


@dataclass(frozen=True)
class GroupId:
    group_id: int
    key: str
    obs_dim: int
    act_dim: int
    tasks: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"group_id": self.group_id, "key": self.key, "obs_dim": self.obs_dim,
                "act_dim": self.act_dim, "tasks": list(self.tasks)}

    @classmethod
    def from_dict(cls, d) -> "GroupId":
        return cls(int(d["group_id"]), d["key"], int(d["obs_dim"]), int(d["act_dim"]),
                   tuple(d.get("tasks", ())))


@dataclass
class Manifest:
    records: list[TaskRecord]
    groups: list[GroupId]
    variant: str = "AD"
    reward_masked: bool = False
    norm_scope: str = "group"
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self._by_id = {r.task_id: r for r in self.records}

    @property
    def task_ids(self) -> list[str]:
        return [r.task_id for r in self.records]

    def record(self, task_id: str) -> TaskRecord:
        return self._by_id[task_id]

    def group(self, group_id: int) -> GroupId:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(group_id)

    def group_for_key(self, key: str) -> GroupId | None:
        return next((g for g in self.groups if g.key == key), None)

    @property
    def totals(self) -> dict[str, Any]:
        timesteps = sum(r.n_timesteps for r in self.records)
        per_domain: dict[str, int] = {}
        for r in self.records:
            per_domain[r.task.domain_id] = per_domain.get(r.task.domain_id, 0) + r.n_timesteps
        return {
            "tasks": len(self.records),
            "episodes": sum(r.n_episodes for r in self.records),
            "timesteps": timesteps,
            "sample_weights": {d: n / timesteps for d, n in sorted(per_domain.items())},
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "variant": self.variant,
            "reward_masked": self.reward_masked,
            "norm_scope": self.norm_scope,
            "groups": [g.to_dict() for g in self.groups],
            "tasks": [r.to_dict() for r in self.records],
            "totals": self.totals,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Manifest":
        return cls(
            records=[TaskRecord.from_dict(r) for r in d["tasks"]],
            groups=[GroupId.from_dict(g) for g in d["groups"]],
            variant=d.get("variant", "AD"),
            reward_masked=bool(d.get("reward_masked", False)),
            norm_scope=d.get("norm_scope", "group"),
            format_version=int(d["format_version"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def assign_groups(tasks: Sequence[TaskSpec]) -> list[GroupId]:
    by_key: dict[str, list[TaskSpec]] = {}
    for t in tasks:
        by_key.setdefault(t.group_key, []).append(t)
    groups = []
    for gid, key in enumerate(sorted(by_key)):
        members = by_key[key]
        groups.append(GroupId(gid, key, members[0].obs_dim, members[0].act_dim,
                              tuple(t.task_id for t in members)))
    return groups


def compute_manifest(tasks: Sequence[TaskSpec], trajectories: dict[str, list[Trajectory]],
                     reward_scales: dict[str, float] | None = None,
                     schedules: dict[str, NoiseSchedule] | None = None,
                     norm_scope: str = "group") -> Manifest:
    """Observation statistics, reward scales and group assignment.

    With ``norm_scope="group"`` every task record carries the statistics of
    all observations in its group; ``"task"`` fits each task on its own data.
    Per-task statistics encode where a task's data sits in observation
    space, which for goal-reaching tasks reveals the hidden goal.
    """
    if norm_scope not in NORM_SCOPES:
        raise DatasetError(f"norm_scope must be one of {NORM_SCOPES}, got {norm_scope!r}")
    reward_scales = reward_scales or {}
    schedules = schedules or {}
    groups = assign_groups(tasks)
    gid_of = {tid: g.group_id for g in groups for tid in g.tasks}
    for task in tasks:
        trajs = trajectories.get(task.task_id) or []
        if not trajs or sum(len(t) for t in trajs) == 0:
            raise DatasetError(f"no data for task {task.task_id}")

    def fit(task_ids):
        return ObservationScaler().fit(
            np.concatenate([t.obs for tid in task_ids for t in trajectories[tid]]))

    group_scalers = {g.group_id: fit(g.tasks) for g in groups} if norm_scope == "group" else {}
    records = []
    for task in tasks:
        trajs = trajectories[task.task_id]
        scaler = group_scalers.get(gid_of[task.task_id]) or fit([task.task_id])
        sched = schedules.get(task.task_id)
        records.append(TaskRecord(
            task=task,
            group_id=gid_of[task.task_id],
            reward_scale=float(reward_scales.get(task.task_id, 1.0)),
            obs_mean=scaler.mean_,
            obs_std=scaler.scale_,
            n_episodes=sum(t.n_episodes for t in trajs),
            n_timesteps=sum(len(t) for t in trajs),
            trajectory_lengths=[len(t) for t in trajs],
            trajectory_seeds=[int(t.seed) for t in trajs],
            schedule=sched.to_dict() if sched is not None else None,
        ))
    return Manifest(records=records, groups=groups, norm_scope=norm_scope)


@dataclass
class DatasetBundle:
    manifest: Manifest
    trajectories: dict[str, list[Trajectory]]
    _prepared: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def tasks(self) -> list[TaskSpec]:
        return [r.task for r in self.manifest.records]

    def n_timesteps(self) -> int:
        return sum(len(t) for trajs in self.trajectories.values() for t in trajs)

    def equals(self, other: "DatasetBundle") -> bool:
        if self.manifest.to_json() != other.manifest.to_json():
            return False
        if list(self.trajectories) != list(other.trajectories):
            return False
        return all(
            len(a) == len(b) and all(x.equals(y) for x, y in zip(a, b))
            for a, b in zip(self.trajectories.values(), other.trajectories.values())
        )

    def prepared(self, task_id: str, index: int):
        """Normalized observations and scaled rewards for one trajectory (cached)."""
        key = (task_id, index)
        if key not in self._prepared:
            rec = self.manifest.record(task_id)
            traj = self.trajectories[task_id][index]
            self._prepared[key] = (
                rec.normalize_obs(traj.obs),
                traj.actions.astype(np.float64),
                traj.rewards.astype(np.float64) * rec.reward_scale,
                traj.dones.astype(np.float64),
            )
        return self._prepared[key]


def build_bundle(tasks, trajectories, reward_scales=None, schedules=None,
                 norm_scope: str = "group") -> DatasetBundle:
    manifest = compute_manifest(tasks, trajectories, reward_scales, schedules, norm_scope)
    ordered = {t.task_id: list(trajectories[t.task_id]) for t in tasks}
    return DatasetBundle(manifest, ordered)


# --- storage -----------------------------------------------------------------

def _trajectory_block(traj: Trajectory) -> bytes:
    n = len(traj)
    parts = [
        struct.pack("<Q", n),
        np.ascontiguousarray(traj.obs, dtype="<f4").tobytes(),
        np.ascontiguousarray(traj.actions, dtype="<f4").tobytes(),
        np.ascontiguousarray(traj.rewards, dtype="<f4").tobytes(),
        np.ascontiguousarray(traj.dones, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(traj.next_obs, dtype="<f4").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_bundle(bundle: DatasetBundle, path) -> None:
    manifest_bytes = bundle.manifest.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(struct.pack("<I", zlib.crc32(manifest_bytes)))
        for rec in bundle.manifest.records:
            for traj in bundle.trajectories[rec.task_id]:
                fh.write(_trajectory_block(traj))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def read_bundle(path) -> DatasetBundle:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < len(MAGIC) or r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{path}: not an ICRL dataset (bad magic bytes)")
    (mlen,) = struct.unpack("<Q", r.take(8, "manifest length"))
    raw = r.take(mlen, "manifest")
    (crc,) = struct.unpack("<I", r.take(4, "manifest checksum"))
    if zlib.crc32(raw) != crc:
        raise ChecksumError("manifest checksum mismatch")
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    version = doc.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION or version < 1:
        raise VersionError(f"unsupported format_version {version!r} (reader supports {FORMAT_VERSION})")
    manifest = Manifest.from_dict(doc)

    trajectories: dict[str, list[Trajectory]] = {}
    for rec in manifest.records:
        od, ad = rec.task.obs_dim, rec.task.act_dim
        trajs = []
        for length, seed in zip(rec.trajectory_lengths, rec.trajectory_seeds):
            start = r.pos
            (n,) = struct.unpack("<Q", r.take(8, "block length"))
            if n != length:
                raise FormatError(f"{rec.task_id}: block length {n} != manifest {length}")
            obs = np.frombuffer(r.take(4 * n * od, "obs"), dtype="<f4").reshape(n, od)
            act = np.frombuffer(r.take(4 * n * ad, "actions"), dtype="<f4").reshape(n, ad)
            rew = np.frombuffer(r.take(4 * n, "rewards"), dtype="<f4")
            done = np.frombuffer(r.take(n, "dones"), dtype=np.uint8)
            nxt = np.frombuffer(r.take(4 * n * od, "next_obs"), dtype="<f4").reshape(n, od)
            body = data[start:r.pos]
            (crc,) = struct.unpack("<I", r.take(4, "block checksum"))
            if zlib.crc32(body) != crc:
                raise ChecksumError(f"{rec.task_id}: trajectory block checksum mismatch")
            sched = NoiseSchedule(
                total_steps=rec.schedule["n_steps"],
                zero_noise_fraction=rec.schedule["zero_noise_fraction"],
                curvature=rec.schedule["curvature"],
            ) if rec.schedule else None
            trajs.append(Trajectory(rec.task_id, obs.astype(np.float32), act.astype(np.float32),
                                    rew.astype(np.float32), done.astype(bool),
                                    nxt.astype(np.float32), schedule=sched, seed=seed))
        trajectories[rec.task_id] = trajs
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last block")
    return DatasetBundle(manifest, trajectories)


# --- sub-sequences -----------------------------------------------------------

@dataclass
class SubSequence:
    task_id: str
    group_id: int
    start: int
    prev_action: np.ndarray
    prev_reward: np.ndarray
    prev_done: np.ndarray
    obs: np.ndarray
    target_action: np.ndarray

    @property
    def length(self) -> int:
        return len(self.prev_reward)

    @property
    def n_episodes(self) -> int:
        return 1 + int(self.prev_done[1:].sum())


def extract_subsequence(bundle: DatasetBundle, task_id: str, traj_index: int,
                        start: int, length: int) -> SubSequence:
    """Window ``[start, start + length)`` of one trajectory, shifted for next-action targets."""
    obs, actions, rewards, dones = bundle.prepared(task_id, traj_index)
    n = len(rewards)
    if length < 1 or start < 0 or start + length > n:
        raise DatasetError(f"window [{start}, {start + length}) outside trajectory of length {n}")
    rec = bundle.manifest.record(task_id)
    ad = rec.task.act_dim
    prev_action = np.zeros((length, ad))
    prev_reward = np.zeros(length)
    prev_done = np.zeros(length)
    lo = max(start - 1, 0)
    offset = 1 if start == 0 else 0
    prev_action[offset:] = actions[lo:start + length - 1]
    prev_reward[offset:] = rewards[lo:start + length - 1]
    prev_done[offset:] = dones[lo:start + length - 1]
    return SubSequence(
        task_id=task_id,
        group_id=rec.group_id,
        start=start,
        prev_action=prev_action,
        prev_reward=prev_reward,
        prev_done=prev_done,
        obs=obs[start:start + length],
        target_action=actions[start:start + length],
    )


def sample_subsequence(bundle: DatasetBundle, length: int, rng: np.random.Generator,
                       group_id: int | None = None) -> SubSequence:
    """Task uniformly over tasks (optionally within one group), then trajectory, then start."""
    if group_id is None:
        task_ids = bundle.manifest.task_ids
    else:
        task_ids = list(bundle.manifest.group(group_id).tasks)
    shortest = min(len(t) for tid in task_ids for t in bundle.trajectories[tid])
    if length > shortest:
        raise DatasetError(f"L={length} exceeds shortest trajectory length {shortest}")
    task_id = task_ids[int(rng.integers(len(task_ids)))]
    trajs = bundle.trajectories[task_id]
    ti = int(rng.integers(len(trajs)))
    start = int(rng.integers(len(trajs[ti]) - length + 1))
    return extract_subsequence(bundle, task_id, ti, start, length)


@dataclass
class TokenBatch:
    group_id: int
    prev_action: torch.Tensor
    prev_reward: torch.Tensor
    prev_done: torch.Tensor
    obs: torch.Tensor
    target_action: torch.Tensor | None = None
    positions: torch.Tensor | None = None

    def __post_init__(self):
        if self.positions is None:
            self.positions = torch.arange(self.prev_reward.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.prev_reward.shape)

    def to(self, dtype: torch.dtype) -> "TokenBatch":
        conv = lambda t: None if t is None else t.to(dtype)
        return replace(self, prev_action=conv(self.prev_action), prev_reward=conv(self.prev_reward),
                       prev_done=conv(self.prev_done), obs=conv(self.obs),
                       target_action=conv(self.target_action))

    def select(self, rows) -> "TokenBatch":
        pick = lambda t: None if t is None else t[rows]
        return replace(self, prev_action=pick(self.prev_action), prev_reward=pick(self.prev_reward),
                       prev_done=pick(self.prev_done), obs=pick(self.obs),
                       target_action=pick(self.target_action))


def collate_batch(subs: Sequence[SubSequence], mask_reward: bool = False,
                  dtype: torch.dtype | None = None) -> TokenBatch:
    if not subs:
        raise DatasetError("cannot collate an empty list")
    gids = {s.group_id for s in subs}
    if len(gids) != 1:
        raise DatasetError(f"mixed group ids in one batch: {sorted(gids)}")
    dtype = dtype or torch.get_default_dtype()
    stack = lambda name: torch.as_tensor(np.stack([getattr(s, name) for s in subs]), dtype=dtype)
    prev_reward = stack("prev_reward")
    if mask_reward:
        prev_reward = torch.zeros_like(prev_reward)
    return TokenBatch(
        group_id=subs[0].group_id,
        prev_action=stack("prev_action"),
        prev_reward=prev_reward,
        prev_done=stack("prev_done"),
        obs=stack("obs"),
        target_action=stack("target_action"),
    )


# --- summary -----------------------------------------------------------------

@dataclass
class SummaryRow:
    domain: str
    tasks: int
    episodes: int
    timesteps: int
    weight: float


@dataclass
class SummaryTable:
    rows: list[SummaryRow]
    overall: SummaryRow

    def to_text(self) -> str:
        header = ("Domain", "Tasks", "Episodes", "Timesteps", "Sample Weight")
        body = [(r.domain, str(r.tasks), str(r.episodes), str(r.timesteps), f"{100 * r.weight:.1f}%")
                for r in self.rows + [self.overall]]
        widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
        fmt = lambda row: "  ".join(
            c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        rule = "-" * len(fmt(header))
        lines = [fmt(header), rule] + [fmt(b) for b in body[:-1]] + [rule, fmt(body[-1])]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "tasks", "episodes", "timesteps", "sample_weight"])
        for r in self.rows + [self.overall]:
            w.writerow([r.domain, r.tasks, r.episodes, r.timesteps, f"{r.weight:.6f}"])
        return buf.getvalue()


def summarize(bundle: DatasetBundle) -> SummaryTable:
    """Per-domain tasks / episodes / timesteps and timestep share, recomputed from the stored data."""
    acc: dict[str, list[int]] = {}
    for tid, trajs in bundle.trajectories.items():
        domain = bundle.manifest.record(tid).task.domain_id
        row = acc.setdefault(domain, [0, 0, 0])
        row[0] += 1
        row[1] += sum(int(t.dones.sum()) for t in trajs)
        row[2] += sum(len(t) for t in trajs)
    total = sum(v[2] for v in acc.values())
    rows = [SummaryRow(d, *v, weight=v[2] / total) for d, v in sorted(acc.items())]
    overall = SummaryRow("Overall", sum(r.tasks for r in rows), sum(r.episodes for r in rows),
                         total, sum(r.weight for r in rows))
    return SummaryTable(rows, overall)
