import numpy as np
import pytest
import torch

from icrl import admodel
from icrl.distill import NoiseSchedule, collect_suite
from icrl.envsuite import make_bandit, make_damped_integrator, make_vec_reach


@pytest.fixture(scope="session")
def small_tasks():
    return [
        make_vec_reach((0.5, -0.5), episode_len=10),
        make_vec_reach((-0.5, 0.5), episode_len=10),
        make_bandit((0.3, -0.6)),
        make_damped_integrator((0.4, 0.2), drag=0.1, episode_len=10),
    ]


@pytest.fixture(scope="session")
def small_bundle(small_tasks):
    schedules = {t.task_id: NoiseSchedule(total_steps=120 if t.episode_len > 1 else 60)
                 for t in small_tasks}
    return collect_suite(small_tasks, schedules, seeds_per_task=2, base_seed=7)


@pytest.fixture(scope="session")
def tiny_config(small_bundle):
    return admodel.ModelConfig(n_layers=2, n_heads=4, embed_dim=32, ff_hidden_dim=64,
                               context_len=16, encoder_hidden=32, decoder_hidden=32,
                               seed=3).with_groups_from(small_bundle.manifest)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the assertion stays with the caller."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
