"""Command-line entry point: collect, stats, train, eval, gradcheck, plot, demo.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 acceptance-check
failure. ``ICRL_THREADS`` caps torch threads and collection workers.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import admodel
from . import numerics as nx
from .admodel import ModelConfig
from .config import ConfigError, RunConfig, load_run_config
from .dataset import (DatasetError, Manifest, collate_batch, read_bundle, sample_subsequence,
                      summarize, write_bundle)
from .distill import ScheduleError, collect_suite
from .envsuite import EnvError
from .inference import SuiteReport, TaskNorm, evaluate_suite
from .plotting import PlotError, plot_csv
from .trainer import TrainConfig, canonical_variant, train

logger = logging.getLogger("icrl")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_ACCEPTANCE = 0, 1, 2, 3
VALIDATION_ERRORS = (ConfigError, DatasetError, ScheduleError, EnvError, admodel.ModelError,
                     admodel.CheckpointError, PlotError, FileNotFoundError, ValueError, KeyError)

TRAIN_KEYS = ("steps", "batch_size", "grad_accum_steps", "lr", "betas", "eps", "seed", "seq_len",
              "eval_every", "checkpoint_every", "variant", "grad_clip")


class UsageError(Exception):
    pass


class AcceptanceFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def threads() -> int:
    raw = os.environ.get("ICRL_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ICRL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("ICRL_THREADS must be >= 1")
    return n


def _resolve(args) -> RunConfig:
    rc = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        rc.override("suite", "seed", args.seed)
        rc.override("train", "seed", args.seed)
        n_seeds = len(rc.section("eval").get("seeds", [0]))
        rc.override("eval", "seeds", list(range(args.seed, args.seed + n_seeds)))
    rc.override("train", "steps", getattr(args, "steps", None))
    rc.override("eval", "n_shots", getattr(args, "shots", None))
    if getattr(args, "variant", None):
        rc.override("train", "variant", canonical_variant(args.variant))
    return rc


def _echo(rc: RunConfig, out_dir: Path | None) -> None:
    text = rc.dump()
    logger.info("resolved config (%s):\n%s", rc.source, text.rstrip())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.yaml").write_text(text)


def collect_from_config(rc: RunConfig, name: str = "suite"):
    suite = rc.suite(name)
    if suite is None:
        raise ConfigError(f"config has no '{name}' section")
    return collect_suite(suite.tasks, suite.schedules, suite.seeds_per_task, suite.reward_scales,
                         base_seed=suite.seed, workers=threads())


def train_config_from(rc: RunConfig, out_dir: Path | None) -> TrainConfig:
    section = rc.section("train")
    unknown = set(section) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    return TrainConfig(model=ModelConfig(**rc.section("model")),
                       out_dir=str(out_dir) if out_dir else None, **section)


def cmd_collect(args) -> int:
    rc = _resolve(args)
    out = Path(args.out or "dataset.icrl")
    _echo(rc, None)
    t0 = time.perf_counter()
    bundle = collect_from_config(rc)
    write_bundle(bundle, out)
    print(f"wrote {out} ({bundle.n_timesteps()} transitions, {len(bundle.tasks)} tasks, "
          f"{time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_stats(args) -> int:
    table = summarize(read_bundle(args.dataset))
    print(table.to_text())
    if args.out:
        Path(args.out).write_text(table.to_csv())
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _resolve(args)
    out_dir = Path(args.out or "run")
    _echo(rc, out_dir)
    bundle = read_bundle(args.dataset) if args.dataset else collect_from_config(rc)
    config = train_config_from(rc, out_dir)
    t0 = time.perf_counter()
    result = train(config, bundle, resume_from=args.resume, log_path=out_dir / "metrics.csv")
    print(f"trained {result.step} steps in {time.perf_counter() - t0:.1f}s; "
          f"checkpoint {result.checkpoint}")
    return EXIT_OK


def evaluate_checkpoint(checkpoint, rc: RunConfig, suite_name: str = "suite") -> SuiteReport:
    """Cold-start evaluation of a training checkpoint on a config suite."""
    ckpt = admodel.load_checkpoint(checkpoint)
    if "manifest" not in ckpt.extra:
        raise admodel.CheckpointError(f"{checkpoint}: no dataset manifest stored")
    manifest = Manifest.from_dict(ckpt.extra["manifest"])
    suite = rc.suite(suite_name)
    if suite is None:
        raise ConfigError(f"config has no '{suite_name}' section")
    ev = rc.section("eval")
    return evaluate_suite(
        ckpt.params, suite.tasks, int(ev.get("n_shots", 40)),
        int(ev.get("episodes_after_convergence", 10)), [int(s) for s in ev.get("seeds", [0])],
        norms={t.task_id: TaskNorm.for_task(manifest, t) for t in suite.tasks},
        mask_reward=bool(ckpt.extra.get("reward_masked", False)),
        cache_mode=ev.get("cache_mode", "exact"),
        baseline_episodes=int(ev.get("baseline_episodes", 500)))


def write_report(report: SuiteReport, out_dir: Path) -> None:
    """eval.csv, summary.txt and per-task plus overall SVG plots."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "eval.csv"
    csv_path.write_text(report.to_csv())
    (out_dir / "summary.txt").write_text(report.summary_text() + "\n")
    plot_dir = out_dir / "plots"
    for t in report.tasks:
        plot_csv(csv_path, plot_dir / f"{_slug(t.task.task_id)}.svg", where={"task": t.task.task_id},
                 title=t.task.task_id)
    plot_csv(csv_path, plot_dir / "all_tasks.svg", title="mean over tasks")


def run_eval(checkpoint, rc: RunConfig, out_dir: Path, suite_name: str = "suite") -> float:
    """Evaluate, write the report files and return the final-3-shot mean."""
    report = evaluate_checkpoint(checkpoint, rc, suite_name)
    write_report(report, out_dir)
    curve = report.mean_normalized_curve()
    print(report.summary_text())
    print(f"shot1 {curve[0]:.3f}  final3 {curve[-3:].mean():.3f}")
    return float(curve[-3:].mean())


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def cmd_eval(args) -> int:
    rc = _resolve(args)
    out_dir = Path(args.out or "eval")
    _echo(rc, out_dir)
    final3 = run_eval(args.checkpoint, rc, out_dir, args.suite)
    threshold = rc.section("eval").get("min_final_score")
    if threshold is not None and final3 < float(threshold):
        raise AcceptanceFailure(f"final-3-shot score {final3:.3f} below {threshold}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rc = _resolve(args)
    bundle = read_bundle(args.dataset) if args.dataset else collect_from_config(rc)
    seed = args.seed or 0
    cfg = ModelConfig(n_layers=2, n_heads=4, embed_dim=32, ff_hidden_dim=64, context_len=16,
                      encoder_hidden=32, decoder_hidden=32, seed=seed).with_groups_from(bundle.manifest)
    rng = np.random.default_rng(seed)
    with nx.precision("float64"):
        params = admodel.init(cfg, torch.float64).requires_grad_()
        gid = bundle.manifest.groups[0].group_id
        batch = collate_batch([sample_subsequence(bundle, 8, rng, group_id=gid) for _ in range(2)],
                              dtype=torch.float64)
        result = nx.gradcheck(lambda: admodel.loss(admodel.forward(params, batch), batch.target_action),
                              params.parameters(), n_coords=args.coords, seed=seed)
    ok = result.passed(args.tol)
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: worst relative error {result.max_rel_err:.3e} "
          f"over {result.n_coords} coordinates (tol {args.tol:g})")
    if not ok:
        raise AcceptanceFailure("gradient check failed")
    return EXIT_OK


def cmd_plot(args) -> int:
    series = None if args.series in ("", "none") else args.series
    out = plot_csv(args.csv, args.out or Path(args.csv).with_suffix(".svg"), x=args.x, y=args.y,
                   series=series)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_demo(args) -> int:
    rc = _resolve(args)
    out_dir = Path(args.out or "demo")
    _echo(rc, out_dir)
    bundle = collect_from_config(rc)
    write_bundle(bundle, out_dir / "dataset.icrl")
    print(summarize(bundle).to_text())
    result = train(train_config_from(rc, out_dir), bundle, log_path=out_dir / "metrics.csv")
    plot_csv(out_dir / "metrics.csv", out_dir / "loss.svg", x="step", y="loss", series=None,
             title="training loss")
    run_eval(result.checkpoint, rc, out_dir / "eval")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="YAML run file (default: packaged desk suite)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("collect", help="noise-distill the configured suite into a dataset file")
    common(sp, "dataset path (default dataset.icrl)")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("stats", help="per-task dataset summary")
    sp.add_argument("dataset")
    sp.add_argument("--out", help="also write the summary as CSV")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("train", help="train a model; writes checkpoints and metrics.csv")
    common(sp, "run directory (default run/)")
    sp.add_argument("--dataset", help="dataset file (default: collect from config)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--variant", choices=["ad", "ed", "ad-no-reward"])
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="cold-start multi-shot evaluation of a checkpoint")
    common(sp, "report directory (default eval/)")
    sp.add_argument("checkpoint")
    sp.add_argument("--shots", type=int)
    sp.add_argument("--suite", default="suite", help="config section holding the tasks")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the tiny transformer")
    common(sp, "unused")
    sp.add_argument("--dataset")
    sp.add_argument("--coords", type=int, default=200)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("plot", help="SVG line chart from an (x, y, series) CSV")
    sp.add_argument("csv")
    sp.add_argument("--out")
    sp.add_argument("--x", default="shot")
    sp.add_argument("--y", default="normalized")
    sp.add_argument("--series", default="seed")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("demo", help="collect, train and evaluate the default suite")
    common(sp, "output directory (default demo/)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--shots", type=int)
    sp.add_argument("--variant", choices=["ad", "ed", "ad-no-reward"])
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        torch.set_num_threads(threads())
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"icrl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AcceptanceFailure as exc:
        print(f"icrl: acceptance check failed: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except VALIDATION_ERRORS as exc:
        print(f"icrl: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
