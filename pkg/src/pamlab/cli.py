"""Command-line entry point.

Subcommands: run, landscape, sweep, verify, gen-data.  Configuration
problems exit with status 2, run/verification failures with status 1, and
every error path prints a single ``error: ...`` line to stderr.  Partial
outputs from a failed run are left in place for inspection.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, figures, verify
from .config import (
    apply_overrides,
    build_model_spec,
    load_config,
    perturb_config,
    stream_spec,
    train_config,
)
from .errors import ConfigError, PamError
from .models import ce_loss
from .params import load_checkpoint
from .streams import generate, generate_task, dump_task_csv


def _load_cfg(args) -> dict:
    cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "out_dir", None):
        cfg["out_dir"] = args.out_dir
    return cfg


def _write_manifest(out: Path, cfg: dict, extra: dict | None = None) -> None:
    entry = {
        "config": cfg,
        "created_unix": time.time(),
        "artifacts": sorted(
            str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()
            and p.name != "manifest.json"
        ),
    }
    if extra:
        entry.update(extra)
    (out / "manifest.json").write_text(
        json.dumps(entry, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    stream = stream_spec(cfg)
    spec = build_model_spec(cfg)
    tcfg = train_config(cfg)
    pcfg = perturb_config(cfg)
    reports = bench.run_many(
        cfg["methods"], [int(s) for s in cfg["seeds"]], stream, spec, tcfg, pcfg, out
    )
    summary = bench.summarize(reports)

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "final_acc_mean", "final_acc_std", "aaa_mean", "aaa_std",
             "forgetting_mean", "forgetting_std", "plasticity_mean", "plasticity_std"]
        )
        for row in summary:
            writer.writerow(
                [row["method"],
                 *(repr(row[f"{k}_{s}"]) for k in ("final_acc", "aaa", "forgetting", "plasticity")
                   for s in ("mean", "std"))]
            )

    if cfg["figures"]:
        for rep in reports:
            figures.render_report_figure(rep, out / f"report_{rep.method}_{rep.seed}.png")
        figures.render_summary_figure(summary, out / "summary.png")
    _write_manifest(out, cfg)

    header = f"{'method':<12}{'final_acc':>16}{'aaa':>16}{'forgetting':>16}{'plasticity':>16}"
    print(header)
    for row in summary:
        cells = [
            f"{row[f'{k}_mean']:.4f} ± {row[f'{k}_std']:.4f}"
            for k in ("final_acc", "aaa", "forgetting", "plasticity")
        ]
        print(f"{row['method']:<12}" + "".join(f"{c:>16}" for c in cells))
    return 0


def cmd_landscape(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg["out_dir"])
    stream = stream_spec(cfg)
    if not 1 <= args.task <= stream.num_tasks:
        raise PamError(
            f"--task {args.task} outside stream range 1..{stream.num_tasks}"
        )
    seed = args.seed if args.seed is not None else int(cfg["seeds"][0])
    run_dir = out / f"{args.method}_s{seed}"
    ckpt_files = sorted(run_dir.glob("task_*.ckpt.json"))
    if len(ckpt_files) < args.task:
        raise PamError(
            f"no completed run with {args.task} checkpoints under {run_dir}"
        )
    ckpts = [load_checkpoint(p) for p in ckpt_files]
    ckpts.sort(key=lambda c: c.task_id)

    spec = build_model_spec(cfg)
    trajectory = bench.rebuild_trajectory(spec, ckpts)
    theta_prev = trajectory[args.task - 1]
    ckpt = ckpts[args.task - 1]
    theta_star = ckpt.theta_star

    run_stream = dataclasses.replace(stream, master_seed=seed)
    tasks = [generate_task(run_stream, t) for t in range(1, args.task + 1)]
    classes = sorted({c for t in tasks for c in t.classes})
    test_batches = [t.test for t in tasks]

    lo, hi = args.range
    beta_vals = np.linspace(lo, hi, args.grid)
    alpha_vals = np.linspace(lo, hi, args.grid)
    losses = bench.landscape_grid(
        spec, theta_prev, theta_star, test_batches, classes, beta_vals, alpha_vals
    )
    csv_path = run_dir / f"landscape_t{args.task}.csv"
    bench.write_landscape_csv(csv_path, beta_vals, alpha_vals, losses)

    def _avg_loss(point: np.ndarray) -> float:
        return float(np.mean([ce_loss(spec, point, b, classes) for b in test_batches]))

    alpha_star = ckpt.alpha_used
    markers = {
        "alpha_raw": ckpt.alpha_raw,
        "alpha_used": alpha_star,
        "previous": {"beta": 1.0, "alpha": 0.0, "loss": _avg_loss(theta_prev)},
        "task_solution": {"beta": 0.0, "alpha": 1.0, "loss": _avg_loss(theta_star)},
        "merged": {
            "beta": 1.0 - alpha_star,
            "alpha": alpha_star,
            "loss": _avg_loss((1.0 - alpha_star) * theta_prev + alpha_star * theta_star),
        },
    }
    markers_path = run_dir / f"landscape_t{args.task}_markers.json"
    markers_path.write_text(json.dumps(markers, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    if cfg["figures"]:
        figures.render_landscape_figure(
            beta_vals, alpha_vals, losses, markers,
            run_dir / f"landscape_t{args.task}.png",
        )
    print(f"wrote {csv_path} ({args.grid * args.grid} rows) and {markers_path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --values list {args.values!r}: {exc}") from exc
    if not values:
        raise ConfigError("--values must list at least one number")
    stream = stream_spec(cfg)
    spec = build_model_spec(cfg)
    rows, _ = bench.sweep(
        args.param, values, stream, spec, train_config(cfg), perturb_config(cfg),
        [int(s) for s in cfg["seeds"]], out_dir=out,
    )
    csv_path = out / f"sweep_{args.param}.csv"
    bench.write_sweep_csv(rows, csv_path)
    if cfg["figures"]:
        figures.render_sweep_figure(args.param, rows, out / f"sweep_{args.param}.png")
    _write_manifest(out, cfg)
    failures = [r for r in rows if r.get("status") != "ok"]
    print(f"wrote {csv_path} with {len(rows)} rows ({len(failures)} with failures)")
    for row in failures:
        print(f"error: sweep cell value={row['value']}: {row['status']}",
              file=sys.stderr)
    return 1 if failures else 0


def cmd_verify(args) -> int:
    quick = not args.full
    t0 = time.perf_counter()
    results = verify.run_suites(quick=quick, corrupt=args.corrupt)
    elapsed = time.perf_counter() - t0
    for res in results:
        print(f"{'PASS' if res.passed else 'FAIL'} {res.name}: {res.detail}")
    print(f"total {elapsed:.1f}s ({'quick' if quick else 'full'})")
    failing = [r.name for r in results if not r.passed]
    if failing:
        print(f"error: verification suite failed: {', '.join(failing)}", file=sys.stderr)
        return 1
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    stream = stream_spec(cfg)
    paths = []
    for task in generate(stream):
        paths.extend(dump_task_csv(task, out))
    _write_manifest(out, cfg)
    print(f"wrote {len(paths)} CSV files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pamlab",
        description="Continual learning with task-vector perturbation and "
                    "closed-form model merging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file (defaults are built in)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. --set perturb.p0=0.5")
        p.add_argument("--out-dir", default=None, help="output directory override")

    p_run = sub.add_parser("run", help="train and merge all configured methods")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_land = sub.add_parser("landscape", help="loss grid over the merge plane")
    common(p_land)
    p_land.add_argument("--task", type=int, required=True, help="task index (1-based)")
    p_land.add_argument("--grid", type=int, default=bench.LANDSCAPE_POINTS)
    p_land.add_argument("--method", default="pm_full")
    p_land.add_argument("--seed", type=int, default=None)
    p_land.add_argument("--range", type=float, nargs=2, default=list(bench.LANDSCAPE_RANGE),
                        metavar=("LO", "HI"))
    p_land.set_defaults(fn=cmd_landscape)

    p_sweep = sub.add_parser("sweep", help="sweep p0 or eps for the perturbed arm")
    common(p_sweep)
    p_sweep.add_argument("--param", choices=("p0", "eps"), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_verify = sub.add_parser("verify", help="run the analytic verification suites")
    group = p_verify.add_mutually_exclusive_group()
    group.add_argument("--quick", action="store_true", default=True)
    group.add_argument("--full", action="store_true", default=False)
    p_verify.add_argument("--corrupt", choices=("alpha_sign",), default=None,
                          help=argparse.SUPPRESS)  # test hook
    p_verify.set_defaults(fn=cmd_verify)

    p_gen = sub.add_parser("gen-data", help="dump the task stream as CSV files")
    common(p_gen)
    p_gen.set_defaults(fn=cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
