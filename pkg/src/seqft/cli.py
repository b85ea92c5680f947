"""Command-line entry point: ``seqft <subcommand> [flags]``.

Every subcommand resolves its configuration as embedded defaults, then the
``--config`` JSON file, then ``--seed``, then each ``--override key=value``
in order, and writes the resolved snapshot to the output directory before
doing any work. Exit status is 0 on success, 2 for configuration or input
errors and 1 for failures during computation.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import traceback
from pathlib import Path

from . import checkpoint as ckpt
from . import data, metrics, pipeline
from .checkpoint import CheckpointError
from .losses import DataError
from .nn import ConfigError
from .numerics import ShapeError

log = logging.getLogger("seqft")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
USER_ERRORS = (ConfigError, CheckpointError, ShapeError, DataError, FileNotFoundError, json.JSONDecodeError)


# --- configuration ---------------------------------------------------------------------
def default_config() -> dict:
    return pipeline.Experiment.from_dict({}).to_dict()


def merge_config(base: dict, update: dict, where: str = "") -> dict:
    """Recursive dict merge that refuses keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = merge_config(out[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    """Set ``a.b.0.c=value``; numeric parts index lists, values parse as JSON when they can."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    parts = key.split(".")
    node = cfg
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError(f"override {key!r}: no list item {part!r}")
            part = int(part)
        elif not isinstance(node, dict) or part not in node:
            raise ConfigError(f"override {key!r}: unknown config key {'.'.join(parts[: i + 1])!r}")
        if last:
            node[part] = parse_value(raw)
        else:
            node = node[part]


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = merge_config(cfg, loaded)
    if args.seed is not None:
        cfg["master_seed"] = args.seed
        cfg["seeds"] = [args.seed]
    for item in args.override or ():
        apply_override(cfg, item)
    return cfg


def build_experiment(cfg: dict) -> pipeline.Experiment:
    try:
        exp = pipeline.Experiment.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    exp.validate()
    return exp


def write_snapshot(path: Path, cfg: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --- subcommands ---------------------------------------------------------------------
def cmd_gen_tasks(args, exp: pipeline.Experiment, out: Path) -> None:
    for seed in exp.seeds:
        cfg = exp.run_config(exp.strategies[0], seed)
        root = out / "tasks" / f"seed{seed}"
        ctx_specs = [(s.task_id, dataclasses.replace(s, seed=seed)) for s in cfg.tasks]
        ctx_specs.append(("pretrain_corpus", data.pretrain_corpus_spec(seed, cfg.pretrain_corpus)))
        for name, spec in ctx_specs:
            ds = data.generate_task(spec)
            data.save_task(ds, root / name)
            log.info("wrote %s (%d samples) to %s", name, len(ds.images), root / name)


def cmd_pretrain(args, exp: pipeline.Experiment, out: Path) -> None:
    store = pipeline.StageStore(out / "stages")
    for seed in exp.seeds:
        cfg = exp.run_config(exp.strategies[0], seed)
        ctx = pipeline.Context(cfg, store)
        ckpt.save(out / f"m0_seed{seed}.sqft", ctx.m0.params)
        held_out = data.generate_task(data.pretrain_corpus_spec(seed + 1_000_003, 32))
        loss = pipeline.ssl_eval_loss(ctx.m0, held_out.images, seed)
        print(f"seed {seed}: M_0 written to {out / f'm0_seed{seed}.sqft'}; held-out masked MSE {loss:.6f}")


def cmd_mds(args, exp: pipeline.Experiment, out: Path) -> None:
    store = pipeline.StageStore(out / "stages")
    rows = []
    for seed in exp.seeds:
        cfg = exp.run_config(exp.strategies[0], seed)
        m0 = ckpt.load_model(args.checkpoint, cfg.arch) if args.checkpoint else None
        ctx = pipeline.Context(cfg, store, m0)
        buffer = data.Buffer(cfg.k)
        for task in ctx.tasks:
            scores = ctx.scores(task)
            picked = pipeline.mds_select(None, task, cfg.k, cfg.mds_runs, ctx.seed, scores)
            buffer.add(task, picked)
            chosen = {e.index for e in picked}
            rows += [(seed, task.task_id, i, f"{scores[i]:.8f}", int(i in chosen)) for i in range(scores.size)]
        buffer.save(out / f"buffer_seed{seed}.json")
    (out / "mds_scores.csv").write_text(_csv(("seed", "task_id", "index", "avg_ssl_loss", "selected"), rows))
    print(f"scores for {len(rows)} samples written to {out / 'mds_scores.csv'}")


def cmd_seqft(args, exp: pipeline.Experiment, out: Path) -> None:
    rows = pipeline.run_experiment(exp, out, resume=args.resume, workers=args.parallel_baselines)
    print(f"{len(rows)} metric rows written to {out / 'metrics.csv'}")
    print(pipeline.format_summary([s for s in pipeline.summarize(rows) if s.seed == "mean"]), end="")


def cmd_eval(args, exp: pipeline.Experiment, out: Path) -> None:
    seed = exp.seeds[0]
    specs = {s.task_id: s for s in exp.config.tasks}
    if args.task not in specs:
        raise ConfigError(f"unknown task {args.task!r}; choose from {', '.join(specs)}")
    task = data.generate_task(dataclasses.replace(specs[args.task], seed=seed))
    model = ckpt.load_model(args.checkpoint, exp.config.arch)
    res = metrics.evaluate(model, task, args.split)
    rows = [(c + 1, f"{d:.6f}", f"{h:.6f}") for c, (d, h) in enumerate(zip(res.dice, res.hd95))]
    rows.append(("mean", f"{res.mean_dice:.6f}", f"{res.mean_hd95:.6f}"))
    (out / "eval.csv").write_text(_csv(("class", "dice", "hd95"), rows))
    print(f"{args.task} ({args.split}, seed {seed}): dice {res.mean_dice:.2f}  hd95 {res.mean_hd95:.2f}")


def cmd_analyze(args, exp: pipeline.Experiment, out: Path) -> None:
    if args.analysis == "param-variation":
        before, after = ckpt.load(args.before), ckpt.load(args.after)
        if args.scope != "all":
            before = {k: v for k, v in before.items() if k.startswith(args.scope + ".")}
            after = {k: v for k, v in after.items() if k.startswith(args.scope + ".")}
        report = metrics.param_variation(before, after)
        rows = [(r.name, r.kind, r.depth, f"{r.mean_abs_change:.9g}", f"{r.changed_fraction:.6f}") for r in report.layers]
        out.write_text(_csv(("name", "kind", "depth", "mean_abs_change", "changed_fraction"), rows))
        print(f"{len(rows)} parameter groups written to {out}")
    else:
        rows = pipeline.parse_metric_rows(Path(args.metrics).read_text())
        out.write_text(pipeline.format_summary(pipeline.summarize(rows)))
        print(out.read_text(), end="")


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "pretrain": cmd_pretrain,
    "mds": cmd_mds,
    "seqft": cmd_seqft,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


# --- argument parsing ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults are embedded)", default=None)
    common.add_argument("--seed", type=int, default=None, help="run this single seed instead of the config's seeds")
    common.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="dotted config override such as arch.width=16 or tasks.0.n_train=10 (repeatable)",
    )
    common.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    with_out = argparse.ArgumentParser(add_help=False)
    with_out.add_argument("--out", default="run", help="output directory")

    parser = argparse.ArgumentParser(prog="seqft", description="Sequential fine-tuning experiments.", formatter_class=fmt)
    parser.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.add_parser("gen-tasks", parents=[common, with_out], formatter_class=fmt, help="write the synthetic tasks to disk")
    sub.add_parser("pretrain", parents=[common, with_out], formatter_class=fmt, help="masked-patch pretraining of M_0")
    mds = sub.add_parser("mds", parents=[common, with_out], formatter_class=fmt, help="score samples and select buffers")
    mds.add_argument("--checkpoint", default=None, help="M_0 checkpoint to score with (default: pretrain one)")
    run = sub.add_parser("seqft", parents=[common, with_out], formatter_class=fmt, help="run strategies over seeds")
    run.add_argument("--resume", action="store_true", help="continue a run directory from its manifest")
    run.add_argument("--parallel-baselines", type=int, default=1, metavar="N", help="worker processes for strategy runs")
    ev = sub.add_parser("eval", parents=[common, with_out], formatter_class=fmt, help="evaluate a checkpoint on a task")
    ev.add_argument("--checkpoint", required=True, help="model checkpoint (SQFT)")
    ev.add_argument("--task", required=True, help="task id from the config's task list")
    ev.add_argument("--split", choices=("train", "test"), default="test", help="which split to score")
    an = sub.add_parser("analyze", formatter_class=fmt, help="post-hoc analyses of run artifacts")
    an_sub = an.add_subparsers(dest="analysis", metavar="ANALYSIS", required=True)
    pv = an_sub.add_parser("param-variation", parents=[common], formatter_class=fmt, help="per-layer mean |change|")
    pv.add_argument("--before", required=True, help="checkpoint before")
    pv.add_argument("--after", required=True, help="checkpoint after")
    pv.add_argument("--scope", default="encoder", help="parameter-name prefix to compare, or 'all'")
    pv.add_argument("--out", default="param_variation.csv", help="output CSV")
    sm = an_sub.add_parser("summary", parents=[common], formatter_class=fmt, help="per-strategy means from metrics.csv")
    sm.add_argument("--metrics", required=True, help="metrics.csv of a seqft run")
    sm.add_argument("--out", default="summary.csv", help="output CSV")
    return parser


def configure_logging() -> None:
    level = os.environ.get("SEQFT_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"SEQFT_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging()
        if args.print_defaults:
            print(json.dumps(default_config(), indent=1, sort_keys=True))
            return 0
        if args.command is None:
            parser.print_help()
            return 2
        cfg = resolve_config(args)
        exp = build_experiment(cfg)
        if args.command == "analyze":
            out = Path(args.out)
            write_snapshot(out.with_name(out.stem + ".config.json"), cfg)
        else:
            out = Path(args.out)
            if args.command == "seqft":
                pipeline.Manifest.open(out, exp.digest(), args.resume)
            write_snapshot(out / "config.json", cfg)
        COMMANDS[args.command](args, exp, out)
        return 0
    except USER_ERRORS as exc:
        print(f"seqft: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("seqft: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - turn any failure into exit status 1
        if logging.getLogger().isEnabledFor(logging.DEBUG):
            traceback.print_exc()
        print(f"seqft: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
