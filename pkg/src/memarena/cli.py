"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 lint/validation failure, 3 runtime failure.
The default run-config path may be supplied through ``MEMARENA_CONFIG``.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .datagen import (
    export_features,
    export_jsonl,
    read_features,
    records_to_arrays,
    synthetic_records,
)
from .keyframe import KinThresholds, extract_keyframes
from .memory import MemoryConfig
from .metrics import category_tsr, memory_ratio, suite_stats
from .planners import PLANNERS, make_planner
from .predcode import PRED_WEIGHTS, TrainConfig, keyframe_separability, sweep, train
from .primitives import DurationTable, NoiseConfig, calibrate_durations, shipped_durations
from .scheduler import SchedulerConfig, TimingModel, profile, run_episode
from .tasks import CATEGORIES, load_suite
from .trajectory import Episode
from .world import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_LINT, EXIT_RUNTIME = 0, 1, 2, 3
CONFIG_ENV = "MEMARENA_CONFIG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# Run config


def load_config(path: str | None) -> dict[str, Any]:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: run config must be a mapping")
    return raw


def noise_from(arg: str | None, cfg: dict) -> NoiseConfig:
    if arg is None:
        raw = cfg.get("noise")
        return NoiseConfig(**raw) if isinstance(raw, dict) else NoiseConfig()
    if arg in ("0", "off"):
        return NoiseConfig.off()
    if arg == "default":
        return NoiseConfig()
    raw = yaml.safe_load(Path(arg).read_text()) or {}
    return NoiseConfig(**raw)


def thresholds_from(args, cfg: dict) -> tuple[KinThresholds, int]:
    kf = dict(cfg.get("keyframe") or {})
    eps = args.epsilon if getattr(args, "epsilon", None) is not None else kf.get("epsilon", 0.05)
    theta = args.theta if getattr(args, "theta", None) is not None else kf.get("theta", 30.0)
    gap = args.nms_gap if getattr(args, "nms_gap", None) is not None else kf.get("nms_gap", 3)
    return KinThresholds(float(eps), float(theta)), int(gap)


def timing_from(arg: str | None, cfg: dict) -> TimingModel:
    if arg is None:
        raw = cfg.get("timing", "reference")
    elif arg == "reference":
        raw = "reference"
    else:
        raw = yaml.safe_load(Path(arg).read_text())
    if raw == "reference":
        return TimingModel.reference()
    return TimingModel.from_dict(raw)


def memory_from(cfg: dict) -> MemoryConfig:
    return MemoryConfig(**(cfg.get("memory") or {}))


def scheduler_from(cfg: dict) -> SchedulerConfig:
    return SchedulerConfig(**(cfg.get("scheduler") or {}))


def durations_from(cfg: dict) -> DurationTable:
    p = cfg.get("durations")
    return DurationTable.load(p) if p else shipped_durations()


def _write_sidecar(out: Path, command: str, args: dict) -> None:
    meta = {"command": command, "version": __version__, "created": time.strftime("%Y-%m-%dT%H:%M:%S"), "args": args}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str) + "\n")


def _select(suite, task: str):
    if task == "all":
        return list(suite)
    ids = {int(x) for x in task.split(",")}
    chosen = [t for t in suite if t.task_id in ids]
    if len(chosen) != len(ids):
        raise ConfigError(f"unknown task id in {task!r}")
    return chosen


def _seeds(spec: str) -> list[int]:
    if ":" in spec:
        a, b = spec.split(":")
        return list(range(int(a), int(b)))
    return [int(x) for x in spec.split(",")]


# --------------------------------------------------------------------------
# Subcommands


def cmd_suite(args, cfg) -> int:
    suite = load_suite(args.suite)
    if args.action == "lint":
        r = memory_ratio(suite)
        comp = tuple(sum(t.category == c for t in suite) for c in CATEGORIES)
        ks = sorted(t.k for t in suite)
        print(f"tasks {len(suite)}")
        print(f"subtasks {sum(t.n for t in suite)}  memory-dependent {sum(t.m for t in suite)}")
        print(f"memory ratio {r.total.numerator}/{r.total.denominator} = {r.percent()}")
        print(f"composition {comp} {dict(zip(CATEGORIES, comp))}")
        print(f"stages min {ks[0]} max {ks[-1]} median {statistics.median(ks)}")
        print("lint ok")
    else:
        for t in suite:
            print(f"{t.task_id:>3}  {t.category:<12} n={t.n:<2} m={t.m:<2} K={t.k:<2} steps={t.target_steps:<5} {t.name}")
    return EXIT_OK


def cmd_rollout(args, cfg) -> int:
    suite = load_suite(args.suite)
    tasks = _select(suite, args.task)
    noise = noise_from(args.noise, cfg)
    timing = timing_from(args.timing, cfg)
    mem = memory_from(cfg)
    sched = scheduler_from(cfg)
    durations = durations_from(cfg)
    th, gap = thresholds_from(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for task in tasks:
        for seed in _seeds(args.seed):
            kw = {"thresholds": th, "nms_gap": gap, "chunk_steps": sched.chunk_steps} if args.planner == "oracle" else {}
            planner = make_planner(args.planner, task, **kw)
            rep, log, ep = run_episode(task, planner, timing=timing, memory_config=mem, seed=seed, noise=noise, durations=durations, config=sched)
            stem = f"task{task.task_id:02d}_seed{seed}_{args.planner}"
            ep.save(out / f"{stem}.episode.json")
            log.save(out / f"{stem}.sched.jsonl")
            (out / f"{stem}.report.json").write_text(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
            failed += not rep.success
            print(f"task {task.task_id:>2} seed {seed} {args.planner}: {'success' if rep.success else 'fail'} "
                  f"steps={rep.steps} stages={sum(rep.stage_outcomes)}/{len(rep.stage_outcomes)} ({rep.termination})")
    _write_sidecar(out, "rollout", vars(args))
    if args.require_success and failed:
        print(f"{failed} episodes failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_keyframes(args, cfg) -> int:
    ep = Episode.load(args.inp)
    th, gap = thresholds_from(args, cfg)
    ks = extract_keyframes(ep.frames, th, nms_gap=gap)
    text = json.dumps(ks.to_dict(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _reports(logs: Path) -> list[dict]:
    files = sorted(logs.glob("*.report.json"))
    if not files:
        raise ConfigError(f"no episode reports under {logs}")
    return [json.loads(p.read_text()) for p in files]


def _episodes(logs: Path) -> list[Path]:
    files = sorted(logs.glob("*.episode.json"))
    if not files:
        raise ConfigError(f"no episode logs under {logs}")
    return files


def cmd_eval(args, cfg) -> int:
    suite = load_suite(args.suite)
    logs = Path(args.logs)
    reps = _reports(logs)
    out = Path(args.out) if args.out else logs
    out.mkdir(parents=True, exist_ok=True)
    stats = suite_stats(suite, reps)
    (out / "stats.csv").write_text(stats.to_csv())
    (out / "plot_data.json").write_text(json.dumps(stats.plot_data(), indent=1, sort_keys=True) + "\n")
    print(stats.to_csv(), end="")
    return EXIT_OK


def cmd_export_jsonl(args, cfg) -> int:
    suite = {t.task_id: t for t in load_suite(args.suite)}
    th, gap = thresholds_from(args, cfg)
    out = Path(args.out)
    n = 0
    for i, p in enumerate(_episodes(Path(args.logs))):
        ep = Episode.load(p)
        ks = extract_keyframes(ep.frames, th, nms_gap=gap)
        n += export_jsonl(ep, ks, args.window, out, suite[ep.task_id].instruction, append=i > 0)
    print(f"{n} samples -> {out}")
    return EXIT_OK


def cmd_export_features(args, cfg) -> int:
    out = Path(args.out)
    n = 0
    for i, p in enumerate(_episodes(Path(args.logs))):
        n += export_features(Episode.load(p), out, append=i > 0)
    print(f"{n} records -> {out}")
    return EXIT_OK


def cmd_train_predcode(args, cfg) -> int:
    pc = dict(cfg.get("predcode") or {})
    recs = read_features(args.data) if args.data else synthetic_records(load_suite(args.suite))
    batch = records_to_arrays(recs)
    base = TrainConfig(
        pre_weight=args.lam if args.lam is not None else float(pc.get("pre_weight", 0.1)),
        lr=args.lr if args.lr is not None else float(pc.get("lr", 1e-2)),
        epochs=args.epochs if args.epochs is not None else int(pc.get("epochs", 200)),
        seed=args.seed if args.seed is not None else int(pc.get("seed", 0)),
        hidden=int(pc.get("hidden", 64)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        rows = sweep(batch, PRED_WEIGHTS, base)
        lines = ["pre_weight,l_cls,l_pre,separability"] + [
            f"{r.pre_weight!r},{r.final_cls!r},{r.final_pre!r},{r.separability!r}" for r in rows
        ]
        (out / "sweep.csv").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
        return EXIT_OK
    head, curve = train(batch, base)
    head.save(out / "head.txt", base.pre_weight, base.seed)
    (out / "curve.csv").write_text(curve.to_csv())
    sep = keyframe_separability(head, batch)
    print(f"lambda={base.pre_weight} seed={base.seed} l_cls={curve.cls[-1]:.6f} l_pre={curve.pre[-1]:.6f} separability={sep:.6f}")
    return EXIT_OK


def cmd_profile(args, cfg) -> int:
    suite = load_suite(args.suite)
    timing = timing_from(args.timing, cfg)
    sched = scheduler_from(cfg)
    noise = noise_from(args.noise, cfg)
    logs = []
    for i in range(args.episodes):
        task = suite[i % len(suite)]
        seed = args.seed + i // len(suite)
        planner = make_planner("oracle", task, chunk_steps=sched.chunk_steps)
        _, log, _ = run_episode(task, planner, timing=timing, seed=seed, noise=noise, config=sched)
        logs.append(log)
    prof = profile(logs)
    print(prof.report(), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(prof.to_dict(), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    suite = load_suite(args.suite)
    runs = Path(args.runs)
    reps = sorted(
        [json.loads(p.read_text()) for p in runs.rglob("*.report.json")],
        key=lambda r: (r["planner"], r["task_id"], r["seed"]),
    )
    if not reps:
        raise ConfigError(f"no episode reports under {runs}")
    by_planner: dict[str, list[dict]] = defaultdict(list)
    for r in reps:
        by_planner[r["planner"]].append(r)
    stats = suite_stats(suite, reps)
    comp = dict(zip(CATEGORIES, stats.composition))
    mr = stats.memory_ratio
    md = ["# Run summary", "", "## Suite", ""]
    md.append("| category | tasks |")
    md.append("|---|---|")
    md += [f"| {c} | {n} |" for c, n in comp.items()]
    md += ["", f"Memory-dependent subtasks: {mr.numerator}/{mr.denominator} ({float(mr) * 100:.1f}%)", ""]
    md += ["| stages K | tasks |", "|---|---|"]
    md += [f"| {k} | {v} |" for k, v in sorted(stats.k_histogram.items())]
    md += ["", f"Mean episode length across tasks: {stats.mean_steps:.1f} steps", ""]
    md += ["## Success rate by category", ""]
    md.append("| planner | " + " | ".join(CATEGORIES) + " |")
    md.append("|---|" + "---|" * len(CATEGORIES))
    csv_rows = ["planner,category,tsr"]
    for name, rs in sorted(by_planner.items()):
        cat = category_tsr(rs, suite)
        cells = [f"{cat[c] * 100:.1f}%" if c in cat else "-" for c in CATEGORIES]
        md.append(f"| {name} | " + " | ".join(cells) + " |")
        csv_rows += [f"{name},{c},{cat[c]!r}" for c in CATEGORIES if c in cat]
    out = Path(args.out) if args.out else runs
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text("\n".join(md) + "\n")
    (out / "report.csv").write_text("\n".join(csv_rows) + "\n")
    print("\n".join(md))
    return EXIT_OK


def cmd_calibrate(args, cfg) -> int:
    suite = load_suite(args.suite)
    table = calibrate_durations(suite, noise_from(args.noise, cfg), seeds=_seeds(args.seeds))
    table.save(args.out)
    print(f"durations -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memarena", description="Memory-dependent manipulation workbench.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help=f"run-config YAML (default: ${CONFIG_ENV})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def suite_arg(sp):
        sp.add_argument("--suite", help="suite YAML (default: shipped suite)")

    def kf_args(sp):
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--theta", type=float)
        sp.add_argument("--nms-gap", type=int, dest="nms_gap")

    s = sub.add_parser("suite", help="lint or list a suite")
    s.add_argument("action", choices=("lint", "list"))
    suite_arg(s)
    s.set_defaults(fn=cmd_suite)

    s = sub.add_parser("rollout", help="run planner episodes through the scheduler")
    s.add_argument("--task", default="all", help="task id, comma list, or 'all'")
    s.add_argument("--planner", choices=PLANNERS, default="memory")
    s.add_argument("--seed", default="0", help="seed, comma list, or range a:b")
    s.add_argument("--noise", help="'0'/'off', 'default', or a YAML file")
    s.add_argument("--timing", help="'reference' or a YAML timing file")
    s.add_argument("--out", required=True)
    s.add_argument("--require-success", action="store_true", help="exit 3 if any episode fails")
    suite_arg(s)
    kf_args(s)
    s.set_defaults(fn=cmd_rollout)

    s = sub.add_parser("keyframes", help="extract keyframes from an episode log")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out")
    kf_args(s)
    s.set_defaults(fn=cmd_keyframes)

    s = sub.add_parser("eval", help="TSR/CSR and suite statistics from rollout logs")
    s.add_argument("--logs", required=True)
    s.add_argument("--out")
    suite_arg(s)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export-jsonl", help="multi-image JSONL training windows")
    s.add_argument("--logs", required=True)
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--out", required=True)
    suite_arg(s)
    kf_args(s)
    s.set_defaults(fn=cmd_export_jsonl)

    s = sub.add_parser("export-features", help="per-step feature records")
    s.add_argument("--logs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export_features)

    s = sub.add_parser("train-predcode", help="train the predictive-coding head")
    s.add_argument("--data", help="feature-record JSONL (default: shipped synthetic set)")
    s.add_argument("--lambda", type=float, dest="lam")
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--sweep", action="store_true", help="train every weight in the sweep")
    s.add_argument("--out", required=True)
    suite_arg(s)
    s.set_defaults(fn=cmd_train_predcode)

    s = sub.add_parser("profile-scheduler", help="runtime profile over oracle episodes")
    s.add_argument("--timing", help="'reference' or a YAML timing file")
    s.add_argument("--episodes", type=int, default=26)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", help="'0'/'off', 'default', or a YAML file")
    s.add_argument("--out")
    suite_arg(s)
    s.set_defaults(fn=cmd_profile)

    s = sub.add_parser("report", help="markdown and CSV summary of rollout directories")
    s.add_argument("--runs", required=True)
    s.add_argument("--out")
    suite_arg(s)
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("calibrate", help="fit per-task primitive budgets to target lengths")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", default="0:10")
    s.add_argument("--noise", help="'0'/'off', 'default', or a YAML file")
    suite_arg(s)
    s.set_defaults(fn=cmd_calibrate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"memarena: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"memarena: validation error: {exc}", file=sys.stderr)
        return EXIT_LINT
    except (OSError, ValueError, RuntimeError, KeyError, TypeError) as exc:
        print(f"memarena: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
