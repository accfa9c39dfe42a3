import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icrl import envsuite as env
from icrl.distill import (NoiseSchedule, ScheduleError, collect_suite, collect_trajectory, epsilon,
                          epsilon_curve, improvement_trend)


def eps_oracle(n, N, f, p):
    horizon = (1 - f) * N
    if n > horizon:
        return 0.0
    return max(1 - (n / horizon) ** p, 0.0) ** (1 / p)


def test_epsilon_worked_values():
    s = NoiseSchedule(total_steps=100, zero_noise_fraction=0.0, curvature=1.0)
    assert epsilon(s, 0) == 1.0
    assert epsilon(s, 50) == pytest.approx(0.5)
    assert epsilon(s, 100) == 0.0
    s2 = NoiseSchedule(total_steps=100, zero_noise_fraction=0.5, curvature=2.0)
    assert epsilon(s2, 25) == pytest.approx(np.sqrt(0.75))
    assert epsilon(s2, 60) == 0.0


@pytest.mark.parametrize("f", [0.0, 0.1, 0.3])
@pytest.mark.parametrize("p", [0.5, 1.0, 2.0])
def test_epsilon_matches_oracle(f, p):
    s = NoiseSchedule(total_steps=400, zero_noise_fraction=f, curvature=p)
    for n in range(0, 401, 7):
        assert epsilon(s, n) == pytest.approx(eps_oracle(n, 400, f, p), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3000), st.floats(0.0, 0.95), st.floats(0.1, 5.0))
def test_epsilon_monotone_bounded(n_total, f, p):
    s = NoiseSchedule(total_steps=n_total, zero_noise_fraction=f, curvature=p)
    curve = epsilon_curve(s)
    assert curve[0] == 1.0
    assert np.all(np.diff(curve) <= 1e-15)
    assert np.all((curve >= 0) & (curve <= 1))
    assert epsilon(s, n_total) == 0.0


def test_epsilon_out_of_range():
    s = NoiseSchedule(total_steps=10)
    with pytest.raises(ScheduleError):
        epsilon(s, -1)
    with pytest.raises(ScheduleError):
        epsilon(s, 11)


@pytest.mark.parametrize("kwargs", [dict(total_steps=0), dict(total_steps=10, zero_noise_fraction=1.0),
                                    dict(total_steps=10, curvature=0.0),
                                    dict(total_steps=10, zero_noise_fraction=-0.1)])
def test_schedule_validation(kwargs):
    with pytest.raises(ScheduleError):
        NoiseSchedule(**kwargs)


def test_trajectory_shapes_and_bounds():
    task = env.make_vec_reach((0.5, 0.5), episode_len=10)
    traj = collect_trajectory(task, NoiseSchedule(200), seed=3)
    assert len(traj) == 200
    assert traj.obs.shape == (200, 2) and traj.actions.shape == (200, 2)
    assert traj.n_episodes == 20
    assert np.all(traj.actions >= -1) and np.all(traj.actions <= 1)
    assert traj.dones.sum() == 20
    np.testing.assert_array_equal(traj.obs[1:10], traj.next_obs[:9])


def test_collection_is_deterministic():
    task = env.make_bandit((0.1, 0.2))
    a = collect_trajectory(task, NoiseSchedule(50), seed=9)
    b = collect_trajectory(task, NoiseSchedule(50), seed=9)
    assert a.equals(b)
    c = collect_trajectory(task, NoiseSchedule(50), seed=10)
    assert not a.equals(c)


def test_noise_free_tail_equals_demonstrator():
    task = env.make_vec_reach((0.3, -0.3), episode_len=5)
    sched = NoiseSchedule(100, zero_noise_fraction=0.5)
    traj = collect_trajectory(task, sched, seed=1)
    state, _ = env.reset(task, 0)
    for i in range(51, 100):
        state.agent_state = traj.obs[i].astype(np.float64)
        state.step_index = 0
        np.testing.assert_allclose(traj.actions[i], env.demonstrator_action(task, state), atol=1e-6)


def test_near_one_zero_fraction_is_pure_demonstrator_after_step_zero():
    task = env.make_bandit((0.4, -0.2))
    traj = collect_trajectory(task, NoiseSchedule(50, zero_noise_fraction=0.99), seed=2)
    np.testing.assert_allclose(traj.actions[1:], np.tile([0.4, -0.2], (49, 1)), atol=1e-7)


def test_demonstrator_only_mode():
    task = env.make_bandit((0.4, -0.2))
    traj = collect_trajectory(task, NoiseSchedule(20), seed=2, demonstrator_only=True)
    np.testing.assert_allclose(traj.actions, np.tile([0.4, -0.2], (20, 1)), atol=1e-7)


def test_first_action_is_uniform_noise():
    task = env.make_bandit((0.9,))
    firsts = [collect_trajectory(task, NoiseSchedule(2), seed=s).actions[0, 0] for s in range(400)]
    assert abs(np.mean(firsts)) < 0.1
    assert np.std(firsts) == pytest.approx(np.sqrt(1 / 3), abs=0.05)


def test_improvement_trend_on_reach():
    task = env.make_vec_reach((0.8, -0.8))
    traj = collect_trajectory(task, NoiseSchedule(2000), seed=0)
    assert improvement_trend(traj) > 0.7


def test_collect_suite_reports_all_failures():
    good = env.make_bandit((0.1,))
    with pytest.raises(ScheduleError, match="task list is empty"):
        collect_suite([], NoiseSchedule(10))
    with pytest.raises(ScheduleError):
        collect_suite([good], [NoiseSchedule(10), NoiseSchedule(10)])


def test_collect_suite_parallel_matches_serial(small_tasks):
    sched = NoiseSchedule(40)
    a = collect_suite(small_tasks, sched, base_seed=1)
    b = collect_suite(small_tasks, sched, base_seed=1, workers=2)
    assert a.equals(b)
