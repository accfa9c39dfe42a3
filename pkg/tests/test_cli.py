import csv

import pytest
import yaml

from icrl import cli
from icrl.config import ConfigError, expand_entry, load_run_config, parse_suite
from icrl.estimator import InContextAgent
from icrl.dataset import collate_batch, read_bundle, sample_subsequence
from icrl.plotting import PlotError, line_chart, plot_csv

TINY = {
    "suite": {"seeds_per_task": 1, "tasks": [
        {"domain": "CVecReach", "dim": 2, "goals": [[0.5, 0.5], [-0.5, 0.5]], "episode_len": 5,
         "episodes": 20},
        {"domain": "CBandit", "dim": 2, "optima": [[0.3, 0.3]], "n_steps": 60},
    ]},
    "eval_suite": {"tasks": [{"domain": "CVecReach", "dim": 2, "goals": [[0.2, -0.6]],
                              "episode_len": 5}]},
    "model": {"n_layers": 1, "n_heads": 2, "embed_dim": 8, "ff_hidden_dim": 16, "context_len": 16,
              "encoder_hidden": 8, "decoder_hidden": 8},
    "train": {"steps": 2, "batch_size": 2, "grad_accum_steps": 1, "seq_len": 8},
    "eval": {"n_shots": 3, "seeds": [0, 1], "episodes_after_convergence": 2, "baseline_episodes": 10},
}


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_default_config_suite():
    rc = load_run_config(None)
    suite = rc.suite()
    domains = [t.domain_id for t in suite.tasks]
    assert domains.count("CVecReach") == 8 and domains.count("CBandit") == 8
    assert len({t.task_id for t in suite.tasks}) == 16
    seq_len = rc.section("train")["seq_len"]
    assert all(s.total_steps >= seq_len for s in suite.schedules.values())


def test_expand_entry_grid_and_drags():
    entries = expand_entry({"domain": "DampedIntegrator", "dim": 1, "grid": [-0.5, 0.5],
                            "drags": [0.0, 0.1], "episodes": 10})
    assert len(entries) == 4
    assert entries[0].schedule.total_steps == 250
    with pytest.raises(ConfigError):
        expand_entry({"domain": "Nope"})
    with pytest.raises(ConfigError):
        expand_entry({"domain": "CVecReach", "dim": 2, "goals": [[0.1]]})
    with pytest.raises(ConfigError):
        parse_suite({"tasks": [{"domain": "CBandit", "dim": 1, "optima": [[0.1], [0.1]]}]})


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/none.yaml")


def test_pipeline_commands(tiny_yaml, tmp_path, capsys):
    ds = tmp_path / "d.icrl"
    assert cli.main(["collect", "--config", str(tiny_yaml), "--out", str(ds), "--seed", "3"]) == 0
    assert read_bundle(ds).manifest.records
    assert cli.main(["stats", str(ds), "--out", str(tmp_path / "s.csv")]) == 0
    assert "CVecReach" in capsys.readouterr().out
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(tiny_yaml), "--dataset", str(ds), "--out", str(run),
                     "--steps", "3", "--variant", "ad-no-reward"]) == 0
    assert (run / "final.ckpt").exists() and (run / "metrics.csv").exists()
    assert (run / "resolved_config.yaml").exists()
    ev = tmp_path / "ev"
    assert cli.main(["eval", str(run / "final.ckpt"), "--config", str(tiny_yaml), "--out", str(ev),
                     "--shots", "2", "--suite", "eval_suite"]) == 0
    rows = list(csv.DictReader(open(ev / "eval.csv")))
    assert len(rows) == 1 * 2 * 2
    assert (ev / "plots" / "all_tasks.svg").exists()
    svg = tmp_path / "p.svg"
    assert cli.main(["plot", str(ev / "eval.csv"), "--out", str(svg)]) == 0
    assert svg.read_text().count("<polyline") == 2


def test_demo_and_gradcheck(tiny_yaml, tmp_path):
    assert cli.main(["demo", "--config", str(tiny_yaml), "--out", str(tmp_path / "demo")]) == 0
    assert (tmp_path / "demo" / "eval" / "summary.txt").exists()
    assert cli.main(["gradcheck", "--config", str(tiny_yaml), "--tol", "1e-4"]) == 0
    assert cli.main(["gradcheck", "--config", str(tiny_yaml), "--tol", "0"]) == 3


def test_eval_threshold_failure(tiny_yaml, tmp_path):
    doc = dict(TINY, eval={**TINY["eval"], "min_final_score": 10.0})
    path = tmp_path / "strict.yaml"
    path.write_text(yaml.safe_dump(doc))
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(path), "--out", str(run), "--steps", "1"]) == 0
    assert cli.main(["eval", str(run / "final.ckpt"), "--config", str(path),
                     "--out", str(tmp_path / "ev")]) == 3


def test_exit_codes(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["train", "--variant", "bc"]) == 1
    assert cli.main(["stats", str(tmp_path / "missing.icrl")]) == 2
    (tmp_path / "junk").write_bytes(b"garbage")
    assert cli.main(["stats", str(tmp_path / "junk")]) == 2
    assert cli.main(["eval", str(tmp_path / "junk")]) == 2
    monkeypatch.setenv("ICRL_THREADS", "zero")
    assert cli.main(["stats", str(tmp_path / "junk")]) == 1


def test_threads_env(monkeypatch):
    monkeypatch.setenv("ICRL_THREADS", "3")
    assert cli.threads() == 3
    monkeypatch.delenv("ICRL_THREADS")
    assert cli.threads() == 1


def test_line_chart():
    svg = line_chart({"a": ([1, 2, 3], [0.1, 0.5, 0.2]), "b": ([1, 2], [1.0, 1.0])}, title="t<x>")
    assert svg.startswith("<svg") and svg.count("<polyline") == 2
    assert "t&lt;x&gt;" in svg
    with pytest.raises(PlotError):
        line_chart({})


def test_plot_csv_errors(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("step,loss\n0,1.0\n1,0.5\n")
    assert plot_csv(p, tmp_path / "x.svg", x="step", y="loss", series=None).exists()
    with pytest.raises(PlotError):
        plot_csv(p, tmp_path / "y.svg", x="shot", y="loss")


def test_estimator_api(tiny_yaml, tmp_path):
    from sklearn.base import clone
    from sklearn.exceptions import NotFittedError
    from icrl.distill import collect_suite
    suite = load_run_config(tiny_yaml).suite()
    bundle = collect_suite(suite.tasks, suite.schedules)
    agent = InContextAgent(n_layers=1, n_heads=2, embed_dim=8, ff_hidden_dim=16, context_len=16,
                           steps=2, batch_size=2, grad_accum_steps=1, seq_len=8)
    assert clone(agent).get_params()["embed_dim"] == 8
    with pytest.raises(NotFittedError):
        agent.rollout(suite.tasks[0])
    agent.fit(bundle)
    import numpy as np
    rng = np.random.default_rng(0)
    batch = collate_batch([sample_subsequence(bundle, 8, rng, group_id=0) for _ in range(2)])
    assert agent.predict(batch).shape[:2] == (2, 8)
    curve = agent.rollout(suite.tasks[0], n_shots=2)
    assert curve.shots == 2
    assert np.isfinite(agent.score(suite.tasks[:1], n_shots=2))
    agent.save(tmp_path / "a.ckpt")
    back = InContextAgent.load(tmp_path / "a.ckpt")
    assert back.params_.equal(agent.params_) and back.get_params()["embed_dim"] == 8
    with pytest.raises(TypeError):
        agent.fit(42)
