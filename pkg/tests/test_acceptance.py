"""End-to-end acceptance battery.

Each test covers one numbered acceptance criterion at its stated size and
tolerance and prints exactly one ``criterion NN PASS/FAIL`` line.  The
expensive default-configuration runs are shared through a module fixture;
everything is single-threaded and seeded.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from pamlab import verify
from pamlab.bench import landscape_grid, run_method, sweep
from pamlab.cli import main
from pamlab.config import (
    build_model_spec,
    perturb_config,
    stream_spec,
    train_config,
    validate_config,
)
from pamlab.fisher import fd_quad_form, fisher_diag, logistic_hessian_quad, quad_form_fd
from pamlab.models import Batch, ce_loss
from pamlab.params import load_checkpoint
from pamlab.streams import generate_task, stream_rng
from pamlab.training import PerturbConfig

from oracles import fisher_loop, quad_loss


def _report(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def bench_runs(tmp_path_factory):
    """Default-config runs shared by criteria 9 through 12.

    naive / merge_only / pm_full over the five default seeds, run strictly
    sequentially so the wall-clock bound is the single-threaded one.
    """
    cfg = validate_config({})
    stream = stream_spec(cfg)
    spec = build_model_spec(cfg)
    tcfg = train_config(cfg)
    pcfg = perturb_config(cfg)
    seeds = [int(s) for s in cfg["seeds"]]
    out = tmp_path_factory.mktemp("acceptance")
    reports = {}
    t0 = time.perf_counter()
    for method in ("naive", "merge_only", "pm_full"):
        for seed in seeds:
            run_dir = out / f"{method}_s{seed}" if (method, seed) == ("pm_full", 1) else None
            reports[(method, seed)] = run_method(
                method, stream, spec, tcfg, pcfg, seed, out_dir=run_dir
            )
    elapsed = time.perf_counter() - t0
    return SimpleNamespace(cfg=cfg, stream=stream, spec=spec, tcfg=tcfg,
                           pcfg=pcfg, seeds=seeds, out=out, reports=reports,
                           elapsed=elapsed)


def test_criterion_01_closed_form_alpha_matches_line_search():
    t0 = time.perf_counter()
    res = verify.suite_alpha_closed_form(n_instances=100)
    elapsed = time.perf_counter() - t0
    _report(1, res.passed and elapsed < 5.0,
            f"{res.detail}; runtime {elapsed:.2f}s (< 5s)")


def test_criterion_02_first_task_identity():
    res = verify.suite_first_task(n_instances=1000)
    _report(2, res.passed, res.detail)


def test_criterion_03_quadratic_exactness():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(20):
        dim = int(rng.integers(2, 9))
        a = rng.uniform(0.5, 4.0, dim)
        theta = rng.standard_normal(dim)
        delta = rng.standard_normal(dim)
        expect = float(np.sum(a * delta * delta))
        for eps in (0.01, 0.1, 0.5, 1.0):
            got = fd_quad_form(quad_loss(a), theta, delta, eps)
            worst = max(worst, abs(got - expect) / abs(expect))
    hand = fd_quad_form(quad_loss(np.array([2.0, 4.0])), np.zeros(2),
                        np.array([1.0, 1.0]), 0.5)
    ok = worst <= 1e-10 and abs(hand - 6.0) <= 6.0 * 1e-10
    _report(3, ok, f"max rel err {worst:.2e} over 20 quadratics x 4 eps; "
                   f"hand value {hand!r}")


def test_criterion_04_logistic_curvature_convergence():
    rng = stream_rng(41)
    worst_small = 0.0
    ratios = []
    for _ in range(5):
        spec, theta, batch = verify.random_logistic_instance(rng, d=5, c=3, n=48)
        delta = rng.standard_normal(spec.dim)
        delta *= 2.0 / np.linalg.norm(delta)
        exact = logistic_hessian_quad(spec, theta, delta, batch)
        small = quad_form_fd(spec, theta, delta, 1e-3, batch)
        worst_small = max(worst_small, abs(small - exact) / abs(exact))
        err1 = abs(quad_form_fd(spec, theta, delta, 0.1, batch) - exact)
        err2 = abs(quad_form_fd(spec, theta, delta, 0.05, batch) - exact)
        ratios.append(err1 / err2)
    ok = worst_small <= 1e-3 and all(3.0 <= r <= 5.0 for r in ratios)
    _report(4, ok, f"rel err @eps=1e-3 {worst_small:.2e}; "
                   f"halving ratios {[f'{r:.2f}' for r in ratios]}")


def test_criterion_05_stochastic_unbiasedness():
    res = verify.suite_unbiasedness(draws=100_000)
    _report(5, res.passed, res.detail)


def test_criterion_06_cauchy_schwarz_bound():
    res = verify.suite_bound(n_instances=1000)
    _report(6, res.passed, res.detail)


def test_criterion_07_fisher_matches_per_sample_loop():
    rng = stream_rng(71)
    worst = 0.0
    for n in (1, 17, 128, 512):
        spec, theta, _ = verify.random_logistic_instance(rng, d=6, c=4, n=8)
        batch = Batch(rng.standard_normal((n, 6)), rng.integers(0, 4, n))
        fast = fisher_diag(spec, theta, batch)
        slow = fisher_loop(spec, theta, batch)
        worst = max(worst, float(np.max(np.abs(fast.values - slow))))
    _report(7, worst <= 1e-12, f"max abs gap {worst:.2e} over N in (1, 17, 128, 512)")


def test_criterion_08_gradient_check_both_kinds():
    rng = stream_rng(81)
    worst = 0.0
    for maker in (verify.random_logistic_instance, verify.random_mlp2_instance):
        spec, theta, batch = maker(rng)
        worst = max(worst, verify._fd_gradient_check(spec, theta, batch, rng,
                                                     n_coords=20))
    _report(8, worst < 1e-5, f"max rel err {worst:.2e} on 20 coords per kind")


def test_criterion_09_method_ordering_and_margins(bench_runs):
    means = {}
    for method in ("naive", "merge_only", "pm_full"):
        ms = [bench_runs.reports[(method, s)].metrics() for s in bench_runs.seeds]
        means[method] = {k: float(np.mean([m[k] for m in ms]))
                         for k in ("final_acc", "forgetting", "plasticity")}
    fa = {m: means[m]["final_acc"] for m in means}
    ok_order = fa["pm_full"] >= fa["merge_only"] >= fa["naive"]
    gap = fa["pm_full"] - fa["naive"]
    ok_gap = gap >= 0.05
    ok_forget = means["pm_full"]["forgetting"] <= 0.7 * means["naive"]["forgetting"]
    ok_plast = means["pm_full"]["plasticity"] >= means["naive"]["plasticity"] - 0.05
    ok_time = bench_runs.elapsed < 600.0
    ok = ok_order and ok_gap and ok_forget and ok_plast and ok_time
    _report(9, ok,
            f"final_acc naive/merge_only/pm_full = "
            f"{fa['naive']:.3f}/{fa['merge_only']:.3f}/{fa['pm_full']:.3f} "
            f"(gap {gap:+.3f} >= 0.05); forgetting {means['pm_full']['forgetting']:.3f} "
            f"<= 0.7 x {means['naive']['forgetting']:.3f}; plasticity "
            f"{means['pm_full']['plasticity']:.3f} vs {means['naive']['plasticity']:.3f}; "
            f"runtime {bench_runs.elapsed:.0f}s (< 600s)")


def test_criterion_10_collapse_identities(bench_runs):
    b = bench_runs
    forced = run_method("pm_full", b.stream, b.spec, b.tcfg,
                        PerturbConfig(eps=b.pcfg.eps, p0=1.0, mode="stochastic"),
                        seed=1, force_alpha=1.0)
    naive = b.reports[("naive", 1)]
    same_acc = forced.acc_matrix.rows == naive.acc_matrix.rows
    same_log = all(
        (x.alpha_used, x.denominator, x.j_at_alpha) == (y.alpha_used, y.denominator, y.j_at_alpha)
        for x, y in zip(forced.merge_log, naive.merge_log)
    )
    _, cell_reports = sweep("p0", [1.0], b.stream, b.spec, b.tcfg, b.pcfg, seeds=[1])
    cell = cell_reports[(1.0, 1)]
    merge_only = b.reports[("merge_only", 1)]
    same_cell = (cell.acc_matrix.rows == merge_only.acc_matrix.rows and
                 [i.alpha_used for i in cell.merge_log]
                 == [i.alpha_used for i in merge_only.merge_log])
    ok = same_acc and same_log and same_cell
    _report(10, ok, f"forced==naive acc {same_acc}, merge log {same_log}; "
                    f"p0=1 sweep cell==merge_only {same_cell}")


def test_criterion_11_landscape_corners_and_marker(bench_runs, capsys):
    b = bench_runs
    import json

    from pamlab.bench import rebuild_trajectory

    run_dir = b.out / "pm_full_s1"
    task_t = 3
    ckpts = [load_checkpoint(run_dir / f"task_{t}.ckpt.json")
             for t in range(1, b.stream.num_tasks + 1)]
    states = rebuild_trajectory(b.spec, ckpts)
    theta_prev = states[task_t - 1]
    theta_star = ckpts[task_t - 1].theta_star
    run_stream = type(b.stream)(**{**b.stream.__dict__, "master_seed": 1})
    tasks = [generate_task(run_stream, t) for t in range(1, task_t + 1)]
    classes = sorted({c for t in tasks for c in t.classes})
    batches = [t.test for t in tasks]
    grid = landscape_grid(b.spec, theta_prev, theta_star, batches, classes,
                          np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    at_prev = float(np.mean([ce_loss(b.spec, theta_prev, x, classes) for x in batches]))
    at_star = float(np.mean([ce_loss(b.spec, theta_star, x, classes) for x in batches]))
    corner_gap = max(abs(grid[1, 0] - at_prev), abs(grid[0, 1] - at_star))

    code = main(["landscape", "--out-dir", str(b.out), "--task", str(task_t),
                 "--grid", "41"])
    capsys.readouterr()
    markers = json.loads(
        (run_dir / f"landscape_t{task_t}_markers.json").read_text()
    )
    logged = ckpts[task_t - 1].alpha_used
    marker_exact = (markers["alpha_used"] == logged
                    and markers["merged"]["alpha"] == logged
                    and markers["merged"]["beta"] == 1.0 - logged)
    rows = (run_dir / f"landscape_t{task_t}.csv").read_text().strip().splitlines()
    ok = corner_gap <= 1e-12 and code == 0 and marker_exact and len(rows) == 1 + 41 * 41
    _report(11, ok, f"corner gap {corner_gap:.2e}; marker alpha == logged "
                    f"{logged!r}: {marker_exact}; grid rows {len(rows) - 1}")


def test_criterion_12_full_verify_and_reproducibility(bench_runs):
    b = bench_runs
    t0 = time.perf_counter()
    results = verify.run_suites(quick=False)
    elapsed = time.perf_counter() - t0
    all_green = all(r.passed for r in results)
    repeat = run_method("pm_full", b.stream, b.spec, b.tcfg, b.pcfg, seed=1)
    identical = repeat.to_json() == b.reports[("pm_full", 1)].to_json()
    ok = all_green and elapsed < 300.0 and identical
    _report(12, ok, f"six suites green {all_green} in {elapsed:.1f}s (< 300s); "
                    f"repeat run byte-identical {identical}")
