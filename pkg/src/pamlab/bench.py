"""Experiment orchestration: method arms, metrics, landscapes, sweeps.

A run is one (method, seed) pair over a task stream.  All five arms share
one code path; they differ only in perturbation mode and in how the merge
coefficient is chosen, which is what makes the collapse identities exact:
``naive`` is the perturbed-and-merged arm with alpha forced to 1 and the
zero branch forced at every step.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IncompleteRunError
from .fisher import fisher_diag
from .merging import MergeInfo, MergeState, apply_alpha, merge
from .models import (
    Batch,
    ModelSpec,
    accuracy,
    ce_loss,
    head_coords,
    layout,
    loss_and_grad,
    trainable_mask,
)
from .params import TaskCheckpoint, checkpoint_path, save_checkpoint
from .streams import StreamSpec, generate, generic_mixture, stream_rng
from .training import AdamW, PerturbConfig, TrainConfig, train_task

METHODS = ("naive", "avg_fixed", "merge_only", "pm_full", "pm_gauss")

LANDSCAPE_RANGE = (-0.25, 1.25)
LANDSCAPE_POINTS = 41

_P_PRETRAIN_INIT = 21


def worker_count() -> int:
    """Thread cap: PAM_THREADS if set, else all cores."""
    raw = os.environ.get("PAM_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError(f"PAM_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ConfigError("PAM_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


@dataclass
class AccuracyMatrix:
    """Lower-triangular accuracies: rows[t-1][i-1] = task i after task t."""

    num_tasks: int
    rows: list[list[float]] = field(default_factory=list)

    def append_row(self, row: list[float]) -> None:
        if len(row) != len(self.rows) + 1:
            raise IncompleteRunError(
                f"row {len(self.rows) + 1} must have {len(self.rows) + 1} entries"
            )
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append([float(a) for a in row])

    def require_complete(self) -> None:
        if len(self.rows) != self.num_tasks:
            raise IncompleteRunError(
                f"matrix has {len(self.rows)} of {self.num_tasks} rows"
            )


def final_acc(m: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after the last one."""
    m.require_complete()
    return float(np.mean(m.rows[-1]))


def avg_anytime_acc(m: AccuracyMatrix) -> float:
    """Mean over checkpoints t of the mean accuracy on tasks seen so far."""
    m.require_complete()
    return float(np.mean([np.mean(row) for row in m.rows]))


def forgetting(m: AccuracyMatrix) -> tuple[float, bool]:
    """Mean over earlier tasks of (best accuracy ever - final accuracy).

    Returns (value, defined); a single-task run has no earlier tasks and
    reports 0.0 with defined=False.
    """
    m.require_complete()
    if m.num_tasks == 1:
        return 0.0, False
    drops = []
    for i in range(m.num_tasks - 1):
        best = max(m.rows[t][i] for t in range(i, m.num_tasks))
        drops.append(best - m.rows[-1][i])
    return float(np.mean(drops)), True


def plasticity(m: AccuracyMatrix) -> float:
    """Mean accuracy on each task immediately after learning it."""
    m.require_complete()
    return float(np.mean([m.rows[t][t] for t in range(len(m.rows))]))


@dataclass
class RunReport:
    """Everything one (method, seed) run produced, ready to serialize."""

    method: str
    seed: int
    num_tasks: int
    acc_matrix: AccuracyMatrix
    merge_log: list[MergeInfo]
    task_classes: list[list[int]]
    incomplete: bool = False
    error: str | None = None

    def metrics(self) -> dict:
        if self.incomplete:
            raise IncompleteRunError(f"run {self.method}/{self.seed} did not finish")
        forget, defined = forgetting(self.acc_matrix)
        return {
            "final_acc": final_acc(self.acc_matrix),
            "aaa": avg_anytime_acc(self.acc_matrix),
            "forgetting": forget,
            "forgetting_defined": defined,
            "plasticity": plasticity(self.acc_matrix),
        }

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "seed": self.seed,
            "num_tasks": self.num_tasks,
            "task_classes": self.task_classes,
            "acc_matrix": self.acc_matrix.rows,
            "merge_log": [
                {
                    "task_id": info.task_id,
                    "alpha_raw": info.alpha_raw,
                    "alpha_used": info.alpha_used,
                    "denominator": info.denominator,
                    "J_at_alpha": info.j_at_alpha,
                    "bound_first_term": info.bound_first_term,
                    "bound_second_term": info.bound_second_term,
                    "degenerate": info.degenerate,
                }
                for info in self.merge_log
            ],
            "incomplete": self.incomplete,
        }
        if self.incomplete:
            out["error"] = self.error
            out["metrics"] = None
        else:
            out["metrics"] = self.metrics()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def write_merge_log_csv(merge_log: list[MergeInfo], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["task_id", "alpha_raw", "alpha_used", "denominator", "J_at_alpha",
             "bound_first_term", "bound_second_term"]
        )
        for info in merge_log:
            writer.writerow(
                [info.task_id, repr(info.alpha_raw), repr(info.alpha_used),
                 repr(info.denominator), repr(info.j_at_alpha),
                 repr(info.bound_first_term), repr(info.bound_second_term)]
            )


def pretrain_base(
    kind: str,
    input_dim: int,
    num_classes: int,
    hidden_dim: int,
    activation: str,
    adapter_rank: int,
    pretrain_classes: int,
    pretrain_samples_per_class: int,
    pretrain_epochs: int,
    pretrain_lr: float,
    pretrain_noise: float,
    pretrain_seed: int,
) -> ModelSpec:
    """Produce the experiment spec with a frozen pretrained base.

    The full model is trained on a held-out generic mixture with its own
    head, then the backbone blocks are copied into the experiment layout;
    the experiment head starts at zero.  Logistic models have no backbone
    and start from zeros.
    """
    final = ModelSpec(
        kind=kind,
        input_dim=input_dim,
        num_classes=num_classes,
        hidden_dim=hidden_dim,
        activation=activation,
        adapter_rank=adapter_rank,
    )
    if kind == "logistic":
        return final

    pre_spec = ModelSpec(
        kind=kind,
        input_dim=input_dim,
        num_classes=pretrain_classes,
        hidden_dim=hidden_dim,
        activation=activation,
        adapter_rank=0,
    )
    data = generic_mixture(
        pretrain_seed, pretrain_classes, pretrain_samples_per_class,
        input_dim, pretrain_noise,
    )
    rng = stream_rng(pretrain_seed, _P_PRETRAIN_INIT)
    lay = layout(pre_spec)
    theta = np.zeros(lay.dim)
    lay.view(theta, "w1")[:] = rng.standard_normal((input_dim, hidden_dim)) / np.sqrt(input_dim)
    lay.view(theta, "w2")[:] = rng.standard_normal((hidden_dim, pretrain_classes)) / np.sqrt(hidden_dim)

    opt = AdamW([(theta, pretrain_lr)])
    n = data.n
    batch_size = 32
    steps = math.ceil(n / batch_size)
    for epoch in range(1, pretrain_epochs + 1):
        order = stream_rng(pretrain_seed, epoch, _P_PRETRAIN_INIT).permutation(n)
        for step in range(steps):
            idx = order[step * batch_size : (step + 1) * batch_size]
            _, g = loss_and_grad(pre_spec, theta, Batch(data.inputs[idx], data.labels[idx]))
            opt.step([g])

    base = np.zeros(final.dim)
    final_lay = layout(final)
    for block in ("w1", "b1"):
        final_lay.view(base, block)[:] = lay.view(theta, block)
    return ModelSpec(
        kind=kind,
        input_dim=input_dim,
        num_classes=num_classes,
        hidden_dim=hidden_dim,
        activation=activation,
        adapter_rank=adapter_rank,
        frozen_base=base,
    )


def _method_pcfg(method: str, pcfg: PerturbConfig) -> PerturbConfig:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if method in ("naive", "avg_fixed", "merge_only"):
        return PerturbConfig(eps=pcfg.eps, p0=pcfg.p0, mode="off")
    if method == "pm_gauss":
        return PerturbConfig(eps=pcfg.eps, p0=pcfg.p0, mode="gauss_control")
    # pm_full honors the configured mode (stochastic or exact3)
    if pcfg.mode in ("off", "gauss_control"):
        return PerturbConfig(eps=pcfg.eps, p0=pcfg.p0, mode="stochastic")
    return pcfg


def run_method(
    method: str,
    stream: StreamSpec,
    spec: ModelSpec,
    tcfg: TrainConfig,
    pcfg: PerturbConfig,
    seed: int,
    out_dir: str | Path | None = None,
    force_alpha: float | None = None,
) -> RunReport:
    """Execute one method over one stream seed.

    The stream's master seed and the training seed are both replaced by
    ``seed`` so a run is one self-contained draw.  On a mid-run failure a
    partial report marked incomplete is written before the error
    propagates.
    """
    stream = StreamSpec(**{**stream.__dict__, "master_seed": seed})
    tcfg = TrainConfig(**{**tcfg.__dict__, "seed": seed})
    eff_pcfg = _method_pcfg(method, pcfg)
    tasks = generate(stream)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = MergeState.initial(spec.frozen_base)
    seen: list[int] = []
    matrix = AccuracyMatrix(num_tasks=stream.num_tasks)
    merge_log: list[MergeInfo] = []
    report = RunReport(
        method=method,
        seed=seed,
        num_tasks=stream.num_tasks,
        acc_matrix=matrix,
        merge_log=merge_log,
        task_classes=[sorted(t.classes) for t in tasks],
        incomplete=True,
    )
    try:
        for task in tasks:
            new_classes = sorted(set(task.classes) - set(seen))
            seen = sorted(set(seen) | set(task.classes))

            theta_star, tlog = train_task(
                spec, state.theta_hat, task, tcfg, eff_pcfg,
                classes=seen, new_classes=new_classes,
            )
            # Head columns bypass the merge coefficient, so their curvature
            # must not steer it: the checkpointed Fisher keeps adapter-site
            # entries only.  Head entries would otherwise dominate the i=t
            # term and pin alpha at 1.
            fdiag = fisher_diag(
                spec, theta_star, task.train, classes=seen,
                mask=trainable_mask(spec, new_classes=[], include_adapter=True),
            )

            if method == "naive":
                alpha = 1.0
            elif method == "avg_fixed":
                alpha = 1.0 / task.task_id
            else:
                alpha = None
            if force_alpha is not None:
                alpha = force_alpha

            carry = head_coords(spec, new_classes) if new_classes else None
            state, info = merge(
                state, task.task_id, theta_star, fdiag, task.classes,
                alpha=alpha, carry_coords=carry,
            )
            merge_log.append(info)

            if out is not None:
                save_checkpoint(state.history[-1], checkpoint_path(out, task.task_id))
                tlog.to_csv(out / f"train_task_{task.task_id}.csv")

            row = [
                accuracy(spec, state.theta_hat, tasks[i].test, class_subset=seen)
                for i in range(task.task_id)
            ]
            matrix.append_row(row)
        report.incomplete = False
    except Exception as exc:
        report.error = f"{type(exc).__name__}: {exc}"
        if out is not None:
            _write_run_artifacts(report, out)
        raise
    if out is not None:
        _write_run_artifacts(report, out)
    return report


def _write_run_artifacts(report: RunReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_merge_log_csv(report.merge_log, out / "merge_log.csv")
    artifacts = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    (out / "manifest.json").write_text(
        json.dumps(
            {"method": report.method, "seed": report.seed, "artifacts": artifacts},
            indent=2, sort_keys=True,
        ) + "\n",
        encoding="utf-8",
    )


def rebuild_trajectory(spec: ModelSpec, ckpts: list[TaskCheckpoint]) -> list[np.ndarray]:
    """Recompute [theta_hat_0 .. theta_hat_T] from saved checkpoints.

    Applies the logged alpha_used through the same arithmetic the run
    used, so the reconstruction is bit-identical to the live trajectory.
    """
    states = [spec.frozen_base.copy()]
    seen: set[int] = set()
    for ckpt in sorted(ckpts, key=lambda c: c.task_id):
        new_classes = sorted(set(ckpt.classes) - seen)
        seen |= set(ckpt.classes)
        carry = head_coords(spec, new_classes) if new_classes else None
        states.append(
            apply_alpha(states[-1], ckpt.theta_star, ckpt.alpha_used, carry)
        )
    return states


def landscape_grid(
    spec: ModelSpec,
    theta_prev: np.ndarray,
    theta_star: np.ndarray,
    test_batches: list[Batch],
    classes,
    beta_vals: np.ndarray,
    alpha_vals: np.ndarray,
) -> np.ndarray:
    """Mean test loss over tasks at beta*theta_prev + alpha*theta_star.

    Returns losses[i, j] for beta_vals[i], alpha_vals[j]; the (1, 0) and
    (0, 1) corners therefore evaluate the two endpoint models exactly.
    """
    losses = np.empty((beta_vals.size, alpha_vals.size))
    for i, beta in enumerate(beta_vals):
        for j, alpha in enumerate(alpha_vals):
            point = beta * theta_prev + alpha * theta_star
            losses[i, j] = np.mean(
                [ce_loss(spec, point, b, classes) for b in test_batches]
            )
    return losses


def write_landscape_csv(
    path: str | Path, beta_vals: np.ndarray, alpha_vals: np.ndarray, losses: np.ndarray
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "alpha", "avg_loss"])
        for i, beta in enumerate(beta_vals):
            for j, alpha in enumerate(alpha_vals):
                writer.writerow([repr(float(beta)), repr(float(alpha)), repr(float(losses[i, j]))])


def summarize(reports: list[RunReport]) -> list[dict]:
    """Per-method mean and standard deviation of each metric over seeds."""
    by_method: dict[str, list[RunReport]] = {}
    for rep in reports:
        by_method.setdefault(rep.method, []).append(rep)
    rows = []
    for method, reps in by_method.items():
        metrics = [r.metrics() for r in reps]
        row = {"method": method, "seeds": sorted(r.seed for r in reps)}
        for key in ("final_acc", "aaa", "forgetting", "plasticity"):
            vals = np.array([m[key] for m in metrics])
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std())
        rows.append(row)
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: order.get(r["method"], len(order)))
    return rows


def run_many(
    methods: list[str],
    seeds: list[int],
    stream: StreamSpec,
    spec: ModelSpec,
    tcfg: TrainConfig,
    pcfg: PerturbConfig,
    out_dir: str | Path,
) -> list[RunReport]:
    """All (method, seed) runs, thread-parallel up to the PAM_THREADS cap.

    Runs are independent and deterministic per seed, so the schedule
    cannot change results.  Failures propagate after all runs finish.
    """
    out = Path(out_dir)
    jobs = [(m, s) for m in methods for s in seeds]

    def _one(job: tuple[str, int]) -> RunReport:
        method, seed = job
        return run_method(
            method, stream, spec, tcfg, pcfg, seed,
            out_dir=out / f"{method}_s{seed}",
        )

    workers = min(worker_count(), max(len(jobs), 1))
    if workers == 1:
        results = [_one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, jobs))

    for rep in results:
        (out / f"report_{rep.method}_{rep.seed}.json").write_text(
            rep.to_json(), encoding="utf-8"
        )
    return results


def sweep(
    param: str,
    values: list[float],
    stream: StreamSpec,
    spec: ModelSpec,
    tcfg: TrainConfig,
    pcfg: PerturbConfig,
    seeds: list[int],
    out_dir: str | Path | None = None,
) -> tuple[list[dict], dict]:
    """Perturbed-arm runs for each swept value over shared seeds.

    Returns one aggregated table row per value (mean and std over the
    seeds that completed) plus the individual reports keyed by
    (value, seed).  A failing cell poisons only its own row.
    """
    if param not in ("p0", "eps"):
        raise ConfigError(f"sweep parameter must be p0 or eps, got {param!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    reports: dict[tuple[float, int], RunReport] = {}
    for value in values:
        kwargs = {"eps": pcfg.eps, "p0": pcfg.p0, "mode": pcfg.mode}
        kwargs[param] = float(value)
        row = {"param": param, "value": float(value), "n_seeds": 0}
        cell_metrics: list[dict] = []
        errors = []
        try:
            cell_pcfg = PerturbConfig(**kwargs)
        except ConfigError as exc:
            errors.append(f"{type(exc).__name__}: {exc}")
            seeds_for_cell: list[int] = []
        else:
            seeds_for_cell = list(seeds)
        for seed in seeds_for_cell:
            try:
                run_dir = (
                    Path(out_dir) / f"sweep_{param}_{value}_s{seed}"
                    if out_dir is not None else None
                )
                rep = run_method(
                    "pm_full", stream, spec, tcfg, cell_pcfg, seed, out_dir=run_dir
                )
                reports[(float(value), seed)] = rep
                cell_metrics.append(rep.metrics())
            except Exception as exc:  # keep other cells alive
                errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
        row["n_seeds"] = len(cell_metrics)
        for key in ("final_acc", "aaa", "forgetting", "plasticity"):
            vals = [m[key] for m in cell_metrics]
            row[f"{key}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{key}_std"] = float(np.std(vals)) if vals else None
        row["status"] = "ok" if not errors else "; ".join(errors)
        rows.append(row)
    return rows, reports


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    cols = ["param", "value", "n_seeds", "status",
            "final_acc_mean", "final_acc_std", "aaa_mean", "aaa_std",
            "forgetting_mean", "forgetting_std",
            "plasticity_mean", "plasticity_std"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            out = []
            for c in cols:
                v = row.get(c)
                out.append(repr(v) if isinstance(v, float) else v)
            writer.writerow(out)
