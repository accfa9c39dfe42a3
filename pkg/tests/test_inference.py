import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from icrl import admodel
from icrl import envsuite as env
from icrl.inference import (CacheDesyncError, RolloutContext, ShotCurve, TaskNorm, Token,
                            batched_rollouts, cold_start_rollout, evaluate_suite, full_window_forward,
                            incremental_forward, iqm, normalize_return, smooth)


@pytest.fixture(scope="module")
def reach_task(small_tasks):
    return small_tasks[0]


def test_exact_cache_matches_oracle_fp32(tiny_config, small_bundle, reach_task):
    params = admodel.init(tiny_config, torch.float32)
    norm = TaskNorm.for_task(small_bundle.manifest, reach_task)
    trace = cold_start_rollout(params, reach_task, 3, seed=0, norm=norm, baselines=(-5.0, -1.0),
                               check_oracle=True)
    assert trace.evictions >= 1
    assert max(trace.oracle_diffs) < 1e-5


def test_exact_cache_matches_oracle_fp64(tiny_config, small_bundle, reach_task, float64):
    params = admodel.init(tiny_config, torch.float64)
    norm = TaskNorm.for_task(small_bundle.manifest, reach_task)
    trace = cold_start_rollout(params, reach_task, 3, seed=1, norm=norm, baselines=(-5.0, -1.0),
                               check_oracle=True)
    assert trace.evictions >= 1
    assert max(trace.oracle_diffs) < 1e-10


def test_stale_cache_exact_until_first_eviction(tiny_config, reach_task, float64):
    params = admodel.init(tiny_config, torch.float64)
    trace = cold_start_rollout(params, reach_task, 3, seed=2, baselines=(-5.0, -1.0),
                               cache_mode="stale", check_oracle=True)
    cap = tiny_config.context_len
    assert max(trace.oracle_diffs[:cap]) < 1e-10
    assert max(trace.oracle_diffs[cap:]) > 1e-8


def test_single_layer_stale_cache_is_exact(tiny_config, reach_task, float64):
    cfg = admodel.ModelConfig(**{**tiny_config.__dict__, "n_layers": 1})
    params = admodel.init(cfg, torch.float64)
    trace = cold_start_rollout(params, reach_task, 3, seed=2, baselines=(-5.0, -1.0),
                               cache_mode="stale", check_oracle=True)
    assert max(trace.oracle_diffs) < 1e-10


def test_batched_matches_single_rollouts(tiny_config, small_tasks, float64):
    params = admodel.init(tiny_config, torch.float64)
    reach = [t for t in small_tasks if t.domain_id == "CVecReach"]
    jobs = [(reach[0], 0), (reach[1], 0), (reach[0], 5)]
    traces = batched_rollouts(params, jobs, 3, baselines=[(-5.0, -1.0)] * 3, check_oracle=True)
    assert max(traces[0].oracle_diffs) < 1e-10 and traces[0].evictions >= 1
    for (task, seed), tr in zip(jobs, traces):
        single = cold_start_rollout(params, task, 3, seed, baselines=(-5.0, -1.0))
        np.testing.assert_allclose(tr.curve.raw, single.curve.raw, rtol=0, atol=1e-9)
        assert tr.curve.seed == seed and tr.curve.task_id == task.task_id


def test_batched_rollouts_reject_mixed_groups(tiny_config, small_tasks):
    params = admodel.init(tiny_config)
    with pytest.raises(ValueError):
        batched_rollouts(params, [(small_tasks[0], 0), (small_tasks[2], 0)], 1)
    with pytest.raises(ValueError):
        batched_rollouts(params, [], 1)


def test_context_bookkeeping(tiny_config, reach_task):
    params = admodel.init(tiny_config)
    ctx = RolloutContext(params, tiny_config.group_for_key(reach_task.group_key).group_id)
    tok = Token(np.zeros(2), 0.0, 0.0, np.zeros(2))
    for i in range(tiny_config.context_len + 5):
        incremental_forward(params, ctx, tok)
        assert len(ctx) == min(i + 1, tiny_config.context_len)
    assert ctx.evictions == 5
    assert list(ctx.positions) == list(range(5, tiny_config.context_len + 5))
    ctx.keys[0] = ctx.keys[0][..., 1:, :]
    with pytest.raises(CacheDesyncError):
        ctx.check()


def test_incremental_equals_oracle_before_eviction(tiny_config, reach_task, float64):
    params = admodel.init(tiny_config, torch.float64)
    ctx = RolloutContext(params, tiny_config.group_for_key(reach_task.group_key).group_id)
    rng = np.random.default_rng(0)
    for _ in range(6):
        tok = Token(rng.uniform(-1, 1, 2), float(rng.normal()), 0.0, rng.normal(size=2))
        out = incremental_forward(params, ctx, tok)
        np.testing.assert_allclose(out, full_window_forward(params, ctx), atol=1e-12)


def test_rollout_deterministic_and_curve_shape(tiny_config, reach_task):
    params = admodel.init(tiny_config)
    a = cold_start_rollout(params, reach_task, 4, seed=3, baselines=(-5.0, -1.0))
    b = cold_start_rollout(params, reach_task, 4, seed=3, baselines=(-5.0, -1.0))
    np.testing.assert_array_equal(a.curve.raw, b.curve.raw)
    assert a.curve.shots == 4
    assert all(np.all(np.abs(x) <= 1) for x in a.actions)
    assert len(a.actions) == 4 * reach_task.episode_len


def test_masked_reward_rollout_runs(tiny_config, reach_task):
    params = admodel.init(tiny_config)
    trace = cold_start_rollout(params, reach_task, 2, seed=0, baselines=(-5.0, -1.0), mask_reward=True)
    assert trace.curve.shots == 2


def test_normalization_identity():
    assert normalize_return(-3.0, -3.0, -1.0) == 0.0
    assert normalize_return(-1.0, -3.0, -1.0) == 1.0
    assert normalize_return(-2.0, -3.0, -1.0) == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, -1), st.floats(0.5, 50), st.floats(-200, 0))
def test_normalization_affine(rand, gap, raw):
    demo = rand + gap
    n = normalize_return(raw, rand, demo)
    assert float(n) * gap + rand == pytest.approx(raw, abs=1e-9)


def test_smooth_and_best_k():
    np.testing.assert_allclose(smooth([1, 2, 3, 4]), [1, 1.5, 2, 3])
    curve = ShotCurve("t", np.zeros(6), np.array([0.0, 0.2, 0.9, 0.8, 0.85, 0.1]))
    assert curve.best_k == 5
    assert curve.shots_to_reach(0.5) == 4
    assert curve.shots_to_reach(2.0) == float("inf")


def test_iqm():
    assert iqm([1, 2, 3, 4]) == pytest.approx(2.5)
    assert iqm([0, 0, 0, 100]) == pytest.approx(0.0)
    assert iqm(list(range(8))) == pytest.approx(3.5)
    assert np.isnan(iqm([]))


def test_task_norm_for_unseen_task_uses_group_stats(small_bundle):
    unseen = env.make_damped_integrator((0.4, 0.2), drag=0.25, episode_len=10)
    norm = TaskNorm.for_task(small_bundle.manifest, unseen)
    seen = small_bundle.manifest.record(
        small_bundle.manifest.group_for_key(unseen.group_key).tasks[0])
    np.testing.assert_array_equal(norm.obs_mean, seen.obs_mean)
    with pytest.raises(KeyError):
        TaskNorm.for_task(small_bundle.manifest, env.make_vec_reach((0.1, 0.1, 0.1)))


def test_evaluate_suite_report(tiny_config, small_tasks):
    params = admodel.init(tiny_config)
    tasks = small_tasks[:1] + small_tasks[2:3]
    report = evaluate_suite(params, tasks, n_shots=4, episodes_after_convergence=2, seeds=[0, 1],
                            baseline_episodes=20)
    assert len(report.tasks) == 2
    rows = report.to_csv().strip().splitlines()
    assert rows[0] == "task,shot,seed,raw,normalized"
    assert len(rows) == 1 + 2 * 2 * 4
    assert set(report.domains()) == {"CVecReach", "CBandit"}
    assert "best_k" in report.summary_text()
    assert report.mean_normalized_curve().shape == (4,)
