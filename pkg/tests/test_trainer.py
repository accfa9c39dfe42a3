import csv

import numpy as np
import pytest
import torch

from icrl import admodel
from icrl import envsuite as env
from icrl.distill import NoiseSchedule, collect_suite
from icrl.trainer import (TrainConfig, canonical_variant, group_schedule, make_variant_dataset,
                          save_training_checkpoint, train)


def _cfg(tiny_config, **kw):
    base = dict(steps=3, batch_size=2, grad_accum_steps=1, seq_len=8, lr=1e-3,
                model=admodel.ModelConfig(**{**tiny_config.__dict__, "groups": ()}))
    base.update(kw)
    return TrainConfig(**base)


def test_steps_zero_returns_init(tiny_config, small_bundle):
    result = train(_cfg(tiny_config, steps=0), small_bundle)
    assert result.step == 0
    init = admodel.init(result.params.config)
    assert result.params.equal(init)


def test_training_reduces_loss(tiny_config, small_bundle):
    result = train(_cfg(tiny_config, steps=60, batch_size=4), small_bundle)
    losses = [m["loss"] for m in result.metrics]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_accumulation_matches_large_batch(tiny_config, small_tasks, float64):
    reach = [t for t in small_tasks if t.domain_id == "CVecReach"]
    bundle = collect_suite(reach, NoiseSchedule(60), seeds_per_task=1)
    a = train(_cfg(tiny_config, steps=1, batch_size=4, grad_accum_steps=1), bundle)
    b = train(_cfg(tiny_config, steps=1, batch_size=2, grad_accum_steps=2), bundle)
    assert a.params.max_abs_diff(b.params) < 1e-12


def test_resume_is_equivalent(tiny_config, small_bundle, tmp_path, float64):
    full = train(_cfg(tiny_config, steps=4), small_bundle)
    cfg = _cfg(tiny_config, steps=4, out_dir=str(tmp_path))
    half = train(cfg, small_bundle, until_step=2)
    assert half.step == 2
    resumed = train(cfg, small_bundle, resume_from=tmp_path / "final.ckpt")
    assert resumed.step == 4
    assert full.params.max_abs_diff(resumed.params) < 1e-12


def test_metrics_csv(tiny_config, small_bundle, tmp_path):
    log = tmp_path / "m.csv"
    train(_cfg(tiny_config, steps=2, grad_accum_steps=2), small_bundle, log_path=log)
    rows = list(csv.DictReader(open(log)))
    assert len(rows) == 4
    assert list(rows[0]) == ["step", "micro_batch", "loss", "lr", "group_id", "wall_time"]


def test_micro_batches_cycle_groups(small_bundle):
    order = group_schedule(small_bundle)
    counts = {g.group_id: order.count(g.group_id) for g in small_bundle.manifest.groups}
    assert counts == {g.group_id: len(g.tasks) for g in small_bundle.manifest.groups}


def test_checkpoint_records_run(tiny_config, small_bundle, tmp_path):
    cfg = _cfg(tiny_config, steps=1, out_dir=str(tmp_path))
    result = train(cfg, small_bundle)
    ck = admodel.load_checkpoint(result.checkpoint)
    assert ck.manifest_hash == small_bundle.manifest.content_hash()
    assert ck.extra["step"] == 1 and ck.extra["variant"] == "AD"
    assert ck.extra["manifest"] == small_bundle.manifest.to_dict()
    save_training_checkpoint(tmp_path / "again.ckpt", result, cfg, small_bundle)


def test_variant_names():
    assert canonical_variant("ad-no-reward") == "AD_no_reward"
    assert canonical_variant("ed") == "ED"
    with pytest.raises(ValueError):
        canonical_variant("bc")


def test_ed_dataset_is_pure_demonstrator(small_bundle):
    ed = make_variant_dataset(small_bundle, "ED")
    assert ed.manifest.variant == "ED"
    for rec in ed.manifest.records:
        orig = small_bundle.manifest.record(rec.task_id)
        assert rec.n_timesteps == orig.n_timesteps
        for traj in ed.trajectories[rec.task_id]:
            state, _ = env.reset(rec.task, 0)
            for i in range(0, len(traj), 7):
                state.agent_state = traj.obs[i].astype(np.float64)
                if rec.task.domain_id == "CBandit":
                    state.agent_state = np.zeros(0)
                expected = env.demonstrator_action(rec.task, state)
                np.testing.assert_allclose(traj.actions[i], expected, atol=1e-5)


def test_no_reward_variant_masks_rewards(tiny_config, small_bundle):
    masked = make_variant_dataset(small_bundle, "AD_no_reward")
    assert masked.manifest.reward_masked
    assert masked.trajectories is small_bundle.trajectories
    result = train(_cfg(tiny_config, steps=1, variant="ad-no-reward"), small_bundle)
    assert result.step == 1


def test_unregistered_group_rejected(tiny_config, small_bundle):
    reach_only = admodel.ModelConfig(**{**tiny_config.__dict__,
                                        "groups": tiny_config.groups[:1]})
    with pytest.raises(admodel.ModelError):
        train(_cfg(tiny_config, model=reach_only), small_bundle)


def test_config_round_trip(tiny_config):
    cfg = _cfg(tiny_config)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)


def test_log_path_parent_created(tiny_config, small_bundle, tmp_path):
    log = tmp_path / "new" / "dir" / "metrics.csv"
    train(_cfg(tiny_config), small_bundle, log_path=log)
    assert log.exists()
