"""Training loop for the AD transformer and its ablation variants."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import admodel
from . import numerics as nx
from .admodel import ModelConfig, ModelParams
from .dataset import DatasetBundle, build_bundle, collate_batch, read_bundle, sample_subsequence
from .distill import NoiseSchedule, collect_trajectory

logger = logging.getLogger(__name__)

VARIANTS = ("AD", "ED", "AD_no_reward")
_VARIANT_ALIASES = {"ad": "AD", "ed": "ED", "ad-no-reward": "AD_no_reward", "ad_no_reward": "AD_no_reward"}


def canonical_variant(name: str) -> str:
    v = _VARIANT_ALIASES.get(name.lower(), name) if isinstance(name, str) else name
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return v


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    grad_accum_steps: int = 2
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    seed: int = 0
    dataset: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    seq_len: int | None = None
    eval_every: int = 0
    checkpoint_every: int = 0
    variant: str = "AD"
    out_dir: str | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ValueError("batch_size and grad_accum_steps must be >= 1")
        self.variant = canonical_variant(self.variant)
        self.betas = tuple(self.betas)

    @property
    def sequence_length(self) -> int:
        return self.seq_len or self.model.context_len

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def make_variant_dataset(bundle: DatasetBundle, variant: str) -> DatasetBundle:
    """Dataset seen by a training variant.

    ``ED`` re-collects every trajectory with the pure demonstrator (same
    seeds and step counts); ``AD_no_reward`` keeps the data and flags the
    reward channel for masking at collation.
    """
    variant = canonical_variant(variant)
    m = bundle.manifest
    if variant == "AD":
        return bundle
    if variant == "AD_no_reward":
        return DatasetBundle(replace(m, variant=variant, reward_masked=True), bundle.trajectories)
    trajectories, schedules = {}, {}
    for rec in m.records:
        trajs = []
        for seed, traj in zip(rec.trajectory_seeds, bundle.trajectories[rec.task_id]):
            sched = traj.schedule or NoiseSchedule(len(traj))
            trajs.append(collect_trajectory(rec.task, sched, seed, demonstrator_only=True))
            schedules[rec.task_id] = sched
        trajectories[rec.task_id] = trajs
    out = build_bundle([r.task for r in m.records], trajectories,
                       reward_scales={r.task_id: r.reward_scale for r in m.records},
                       schedules=schedules, norm_scope=m.norm_scope)
    out.manifest.variant = "ED"
    return out


def group_schedule(bundle: DatasetBundle) -> list[int]:
    """Round-robin over groups, each group appearing once per member task (smooth interleave)."""
    weights = {g.group_id: len(g.tasks) for g in bundle.manifest.groups}
    total = sum(weights.values())
    current = {g: 0 for g in weights}
    order = []
    for _ in range(total):
        for g in current:
            current[g] += weights[g]
        pick = max(current, key=lambda g: (current[g], -g))
        current[pick] -= total
        order.append(pick)
    return order


@dataclass
class TrainResult:
    params: ModelParams
    adam: nx.AdamState
    metrics: list[dict[str, Any]]
    step: int
    rng_state: dict
    checkpoint: Path | None = None


def _adam_tensors(state: nx.AdamState) -> dict[str, torch.Tensor]:
    out = {}
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        out[f"adam.m.{i}"] = m
        out[f"adam.v.{i}"] = v
    return out


def save_training_checkpoint(path, result: TrainResult, config: TrainConfig,
                             bundle: DatasetBundle) -> None:
    admodel.save_checkpoint(
        path, result.params, manifest_hash=bundle.manifest.content_hash(),
        extra={
            "train_config": config.to_dict(),
            "step": result.step,
            "adam_step": result.adam.step,
            "rng_state": result.rng_state,
            "variant": config.variant,
            "reward_masked": bool(bundle.manifest.reward_masked),
            "manifest": bundle.manifest.to_dict(),
        },
        extra_tensors=_adam_tensors(result.adam),
    )


def _restore(ckpt: admodel.Checkpoint, n_params: int):
    adam = nx.AdamState(step=int(ckpt.extra.get("adam_step", 0)))
    if adam.step:
        adam.m = [ckpt.extra_tensors[f"adam.m.{i}"] for i in range(n_params)]
        adam.v = [ckpt.extra_tensors[f"adam.v.{i}"] for i in range(n_params)]
    return adam, int(ckpt.extra.get("step", 0)), ckpt.extra.get("rng_state")


def train(config: TrainConfig, bundle: DatasetBundle | None = None, resume_from=None,
          log_path=None, until_step: int | None = None) -> TrainResult:
    """Run ``config.steps`` optimizer steps (or stop early at ``until_step``).

    Each optimizer step averages the gradients of ``grad_accum_steps``
    micro-batches; every micro-batch holds sub-sequences of a single group.
    """
    if bundle is None:
        if not config.dataset:
            raise ValueError("no dataset given")
        bundle = read_bundle(config.dataset)
    if bundle.manifest.variant != config.variant:
        if bundle.manifest.variant != "AD":
            raise ValueError(f"dataset variant {bundle.manifest.variant} cannot feed {config.variant}")
        bundle = make_variant_dataset(bundle, config.variant)

    model_cfg = config.model if config.model.groups else config.model.with_groups_from(bundle.manifest)
    registered = {g.key for g in model_cfg.groups}
    unknown = [g.key for g in bundle.manifest.groups if g.key not in registered]
    if unknown:
        raise admodel.ModelError(f"dataset groups not registered in model: {unknown}")
    config = replace(config, model=model_cfg)
    gid_map = {g.group_id: model_cfg.group_for_key(g.key).group_id for g in bundle.manifest.groups}

    rng = np.random.default_rng(config.seed)
    if resume_from is not None:
        ckpt = admodel.load_checkpoint(resume_from)
        params = ckpt.params.to(torch.get_default_dtype())
        adam, start_step, rng_state = _restore(ckpt, len(params.parameters()))
        if rng_state is not None:
            rng.bit_generator.state = rng_state
    else:
        params = admodel.init(model_cfg)
        adam, start_step = nx.AdamState(), 0
    params.requires_grad_(True)

    schedule = group_schedule(bundle)
    seq_len = config.sequence_length
    mask_reward = bundle.manifest.reward_masked
    metrics: list[dict[str, Any]] = []
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        new = not log_path.exists() or resume_from is None
        log_file = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(["step", "micro_batch", "loss", "lr", "group_id", "wall_time"])
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    last = min(config.steps, until_step) if until_step is not None else config.steps
    tensors = params.parameters()
    result = TrainResult(params, adam, metrics, start_step, rng.bit_generator.state)
    try:
        for step in range(start_step, last):
            grads = [torch.zeros_like(p) for p in tensors]
            for micro in range(config.grad_accum_steps):
                gid = schedule[(step * config.grad_accum_steps + micro) % len(schedule)]
                subs = [sample_subsequence(bundle, seq_len, rng, group_id=gid)
                        for _ in range(config.batch_size)]
                batch = collate_batch(subs, mask_reward=mask_reward)
                batch.group_id = gid_map[gid]
                value = admodel.loss(admodel.forward(params, batch), batch.target_action)
                mg = nx.backward(value / config.grad_accum_steps, tensors, accumulate=False)
                for acc, g in zip(grads, mg):
                    acc.add_(g)
                row = {"step": step, "micro_batch": micro, "loss": float(value.detach()), "lr": config.lr,
                       "group_id": batch.group_id, "wall_time": time.perf_counter() - t0}
                metrics.append(row)
                if log_file:
                    writer.writerow([row[k] for k in ("step", "micro_batch", "loss", "lr",
                                                      "group_id")] + [f"{row['wall_time']:.3f}"])
            if config.grad_clip:
                norm = torch.sqrt(sum((g ** 2).sum() for g in grads))
                if norm > config.grad_clip:
                    grads = [g * (config.grad_clip / norm) for g in grads]
            nx.adam_step(tensors, grads, adam, lr=config.lr, beta1=config.betas[0],
                         beta2=config.betas[1], eps=config.eps)
            result.step = step + 1
            if config.eval_every and (step + 1) % config.eval_every == 0:
                recent = [m["loss"] for m in metrics[-config.eval_every * config.grad_accum_steps:]]
                logger.info("step %d loss %.5f (%.1fs)", step + 1, float(np.mean(recent)),
                            time.perf_counter() - t0)
            if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                result.rng_state = rng.bit_generator.state
                save_training_checkpoint(out_dir / f"step{step + 1:06d}.ckpt", result, config, bundle)
    finally:
        if log_file:
            log_file.close()
    result.rng_state = rng.bit_generator.state
    if out_dir:
        result.checkpoint = out_dir / "final.ckpt"
        save_training_checkpoint(result.checkpoint, result, config, bundle)
    return result
