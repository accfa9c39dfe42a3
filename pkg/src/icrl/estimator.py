"""Estimator-style facade over dataset, trainer and inference."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import admodel
from .admodel import ModelConfig
from .dataset import DatasetBundle, Manifest, TokenBatch, read_bundle
from .envsuite import TaskSpec
from .inference import CACHE_MODES, ShotCurve, TaskNorm, cold_start_rollout, evaluate_suite
from .trainer import TrainConfig, canonical_variant, save_training_checkpoint, train


def check_bundle(X) -> DatasetBundle:
    """Accept a DatasetBundle or a path to a stored dataset."""
    if isinstance(X, DatasetBundle):
        return X
    if isinstance(X, (str, Path)):
        return read_bundle(X)
    raise TypeError(f"expected a DatasetBundle or a dataset path, got {type(X).__name__}")


class InContextAgent(BaseEstimator):
    """Next-action transformer that is fit on learning histories and improves in context.

    ``fit`` trains on a dataset bundle; ``predict`` maps a token batch to
    actions; ``rollout`` and ``score`` run cold-start multi-shot evaluation.
    """

    def __init__(self, n_layers: int = 4, n_heads: int = 4, embed_dim: int = 64,
                 ff_hidden_dim: int = 256, context_len: int = 512, steps: int = 3000,
                 batch_size: int = 16, grad_accum_steps: int = 2, lr: float = 3e-4,
                 seq_len: int | None = None, variant: str = "AD", cache_mode: str = "exact",
                 random_state: int = 0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.embed_dim = embed_dim
        self.ff_hidden_dim = ff_hidden_dim
        self.context_len = context_len
        self.steps = steps
        self.batch_size = batch_size
        self.grad_accum_steps = grad_accum_steps
        self.lr = lr
        self.seq_len = seq_len
        self.variant = variant
        self.cache_mode = cache_mode
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        model = ModelConfig(n_layers=self.n_layers, n_heads=self.n_heads, embed_dim=self.embed_dim,
                            ff_hidden_dim=self.ff_hidden_dim, context_len=self.context_len,
                            seed=self.random_state)
        return TrainConfig(steps=self.steps, batch_size=self.batch_size,
                           grad_accum_steps=self.grad_accum_steps, lr=self.lr, seed=self.random_state,
                           model=model, seq_len=self.seq_len, variant=canonical_variant(self.variant))

    def fit(self, X, y=None) -> "InContextAgent":
        if self.cache_mode not in CACHE_MODES:
            raise ValueError(f"cache_mode must be one of {CACHE_MODES}")
        bundle = check_bundle(X)
        config = self._train_config()
        result = train(config, bundle)
        self.params_ = result.params.requires_grad_(False)
        self.manifest_ = bundle.manifest
        self.reward_masked_ = config.variant == "AD_no_reward"
        self.n_steps_ = result.step
        self.loss_curve_ = [m["loss"] for m in result.metrics]
        self._result, self._config, self._bundle = result, config, bundle
        return self

    def predict(self, X: TokenBatch) -> np.ndarray:
        """Predicted actions, ``[batch, steps, act_dim]``."""
        check_is_fitted(self, "params_")
        if not isinstance(X, TokenBatch):
            raise TypeError(f"expected a TokenBatch, got {type(X).__name__}")
        with torch.no_grad():
            return admodel.forward(self.params_, X.to(self.params_.dtype)).numpy()

    def norm_for(self, task: TaskSpec) -> TaskNorm:
        check_is_fitted(self, "params_")
        return TaskNorm.for_task(self.manifest_, task)

    def rollout(self, task: TaskSpec, n_shots: int = 40, seed: int = 0) -> ShotCurve:
        check_is_fitted(self, "params_")
        return cold_start_rollout(self.params_, task, n_shots, seed, norm=self.norm_for(task),
                                  mask_reward=self.reward_masked_,
                                  cache_mode=self.cache_mode).curve

    def score(self, tasks: Sequence[TaskSpec], n_shots: int = 40, seeds: Sequence[int] = (0,),
              episodes_after_convergence: int = 10) -> float:
        """Mean converged normalized return over ``tasks``."""
        check_is_fitted(self, "params_")
        report = evaluate_suite(self.params_, tasks, n_shots, episodes_after_convergence, seeds,
                                norms={t.task_id: self.norm_for(t) for t in tasks},
                                mask_reward=self.reward_masked_, cache_mode=self.cache_mode)
        return float(np.mean([t.converged for t in report.tasks]))

    def save(self, path) -> Path:
        check_is_fitted(self, "params_")
        save_training_checkpoint(path, self._result, self._config, self._bundle)
        return Path(path)

    @classmethod
    def load(cls, path, cache_mode: str = "exact") -> "InContextAgent":
        ckpt = admodel.load_checkpoint(path)
        if "manifest" not in ckpt.extra:
            raise admodel.CheckpointError(f"{path}: no dataset manifest stored")
        tc = TrainConfig.from_dict(ckpt.extra["train_config"])
        m = tc.model
        agent = cls(n_layers=m.n_layers, n_heads=m.n_heads, embed_dim=m.embed_dim,
                    ff_hidden_dim=m.ff_hidden_dim, context_len=m.context_len, steps=tc.steps,
                    batch_size=tc.batch_size, grad_accum_steps=tc.grad_accum_steps, lr=tc.lr,
                    seq_len=tc.seq_len, variant=tc.variant, cache_mode=cache_mode,
                    random_state=tc.seed)
        agent.params_ = ckpt.params
        agent.manifest_ = Manifest.from_dict(ckpt.extra["manifest"])
        agent.reward_masked_ = bool(ckpt.extra.get("reward_masked", False))
        agent.n_steps_ = int(ckpt.extra.get("step", 0))
        return agent
