import json

import numpy as np
import pytest

from pamlab.bench import (
    AccuracyMatrix,
    avg_anytime_acc,
    final_acc,
    forgetting,
    landscape_grid,
    plasticity,
    pretrain_base,
    rebuild_trajectory,
    run_method,
    summarize,
    sweep,
    worker_count,
    write_landscape_csv,
    write_merge_log_csv,
    write_sweep_csv,
)
from pamlab.errors import ConfigError, IncompleteRunError
from pamlab.models import ce_loss
from pamlab.params import load_checkpoint
from pamlab.streams import StreamSpec, generate
from pamlab.training import PerturbConfig, TrainConfig


def matrix(rows):
    m = AccuracyMatrix(num_tasks=len(rows))
    for row in rows:
        m.append_row(row)
    return m


def tiny_stream(num_tasks=3, seed=0):
    return StreamSpec(generator="gauss_split", num_tasks=num_tasks,
                      classes_per_task=2, samples_per_class=20,
                      input_dim=6, noise_scale=0.25, master_seed=seed)


def tiny_spec(num_classes=6):
    return pretrain_base(
        kind="mlp2", input_dim=6, num_classes=num_classes, hidden_dim=8,
        activation="tanh", adapter_rank=2, pretrain_classes=4,
        pretrain_samples_per_class=30, pretrain_epochs=2, pretrain_lr=0.01,
        pretrain_noise=0.5, pretrain_seed=99,
    )


def tiny_tcfg(**kw):
    base = dict(epochs=2, batch_size=16, lr_adapter=0.02, lr_head=0.2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- metrics


def test_metric_hand_examples():
    assert avg_anytime_acc(matrix([[0.9], [0.8, 0.7]])) == pytest.approx(0.825, abs=1e-12)
    m = matrix([[1.0], [0.6, 1.0]])
    forget, defined = forgetting(m)
    assert defined
    assert forget == pytest.approx(0.4, abs=1e-12)
    assert plasticity(m) == pytest.approx(1.0, abs=1e-12)
    assert final_acc(matrix([[0.5], [0.8, 0.6]])) == pytest.approx(0.7, abs=1e-12)


def test_forgetting_single_task_is_flagged_undefined():
    m = AccuracyMatrix(num_tasks=1)
    m.append_row([0.9])
    forget, defined = forgetting(m)
    assert (forget, defined) == (0.0, False)


def test_constant_rows_have_zero_forgetting():
    m = matrix([[0.8], [0.8, 0.9], [0.8, 0.9, 0.7]])
    forget, _ = forgetting(m)
    assert forget == pytest.approx(0.0, abs=1e-12)


def test_matrix_shape_and_range_enforced():
    m = AccuracyMatrix(num_tasks=2)
    with pytest.raises(IncompleteRunError):
        m.append_row([0.5, 0.5])  # row 1 must have exactly one entry
    m.append_row([0.5])
    with pytest.raises(ValueError):
        m.append_row([0.5, 1.5])
    with pytest.raises(IncompleteRunError):
        final_acc(m)  # still missing a row


# ---------------------------------------------------------------- running


@pytest.fixture(scope="module")
def shared_spec():
    return tiny_spec()


def test_run_method_writes_artifacts(tmp_path, shared_spec):
    out = tmp_path / "run"
    report = run_method("pm_full", tiny_stream(), shared_spec, tiny_tcfg(),
                        PerturbConfig(eps=0.5, p0=1.0 / 3.0), seed=1, out_dir=out)
    assert not report.incomplete
    names = sorted(p.name for p in out.iterdir())
    for t in (1, 2, 3):
        assert f"task_{t}.ckpt.json" in names
        assert f"train_task_{t}.csv" in names
    assert "report.json" in names
    assert "merge_log.csv" in names
    assert "manifest.json" in names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["method"] == "pm_full"
    assert "manifest.json" not in manifest["artifacts"]
    assert len(report.merge_log) == 3
    assert report.merge_log[0].alpha_used == 1.0  # first-task identity


def test_run_report_is_deterministic(shared_spec):
    kw = dict(stream=tiny_stream(), spec=shared_spec, tcfg=tiny_tcfg(),
              pcfg=PerturbConfig(eps=0.5, p0=1.0 / 3.0), seed=2)
    a = run_method("pm_full", **kw)
    b = run_method("pm_full", **kw)
    assert a.to_json() == b.to_json()
    payload = json.loads(a.to_json())
    assert payload["metrics"] is not None
    assert set(payload["merge_log"][0]) == {
        "task_id", "alpha_raw", "alpha_used", "denominator", "J_at_alpha",
        "bound_first_term", "bound_second_term", "degenerate",
    }


def test_naive_equals_forced_full_arm(shared_spec):
    """One code path serves every arm: pinning the perturbation's zero
    branch and the merge coefficient at 1 must reproduce naive bitwise."""
    kw = dict(stream=tiny_stream(), spec=shared_spec, tcfg=tiny_tcfg(), seed=3)
    naive = run_method("naive", pcfg=PerturbConfig(eps=0.5, p0=1.0 / 3.0), **kw)
    forced = run_method("pm_full", pcfg=PerturbConfig(eps=0.5, p0=1.0),
                        force_alpha=1.0, **kw)
    assert naive.acc_matrix.rows == forced.acc_matrix.rows
    for a, b in zip(naive.merge_log, forced.merge_log):
        assert (a.alpha_raw, a.alpha_used, a.denominator) == (b.alpha_raw, b.alpha_used, b.denominator)
        assert a.j_at_alpha == b.j_at_alpha


def test_avg_fixed_uses_one_over_t(shared_spec):
    report = run_method("avg_fixed", tiny_stream(), shared_spec, tiny_tcfg(),
                        PerturbConfig(), seed=1)
    assert [i.alpha_used for i in report.merge_log] == [1.0, 0.5, 1.0 / 3.0]


def test_incomplete_report_written_on_failure(tmp_path, shared_spec):
    out = tmp_path / "dead"
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(Exception):
            run_method("pm_full", tiny_stream(), shared_spec,
                       tiny_tcfg(lr_adapter=1e200, lr_head=1e200),
                       PerturbConfig(), seed=1, out_dir=out)
    payload = json.loads((out / "report.json").read_text())
    assert payload["incomplete"] is True
    assert payload["metrics"] is None
    assert payload["error"]


def test_rebuild_trajectory_matches_live_run(tmp_path, shared_spec):
    out = tmp_path / "traj"
    stream = tiny_stream()
    report = run_method("pm_full", stream, shared_spec, tiny_tcfg(),
                        PerturbConfig(eps=0.5, p0=1.0 / 3.0), seed=4, out_dir=out)
    ckpts = [load_checkpoint(out / f"task_{t}.ckpt.json") for t in (1, 2, 3)]
    states = rebuild_trajectory(shared_spec, ckpts)
    assert len(states) == 4
    np.testing.assert_array_equal(states[0], shared_spec.frozen_base)
    # the reconstructed final model reproduces the logged accuracy row
    from pamlab.models import accuracy
    run_stream = StreamSpec(**{**stream.__dict__, "master_seed": 4})
    tasks = generate(run_stream)
    seen = sorted(c for t in tasks for c in t.classes)
    row = [accuracy(shared_spec, states[-1], tasks[i].test, class_subset=seen)
           for i in range(3)]
    assert row == report.acc_matrix.rows[-1]


# ---------------------------------------------------------------- landscape


def test_landscape_corner_identities(shared_spec):
    rng = np.random.default_rng(0)
    theta_prev = 0.1 * rng.standard_normal(shared_spec.dim)
    theta_star = 0.1 * rng.standard_normal(shared_spec.dim)
    tasks = generate(tiny_stream())
    batches = [t.test for t in tasks[:2]]
    classes = sorted(set(tasks[0].classes) | set(tasks[1].classes))
    betas = np.array([0.0, 1.0])
    alphas = np.array([0.0, 1.0])
    losses = landscape_grid(shared_spec, theta_prev, theta_star, batches,
                            classes, betas, alphas)
    at_prev = np.mean([ce_loss(shared_spec, theta_prev, b, classes) for b in batches])
    at_star = np.mean([ce_loss(shared_spec, theta_star, b, classes) for b in batches])
    assert abs(losses[1, 0] - at_prev) <= 1e-12
    assert abs(losses[0, 1] - at_star) <= 1e-12


def test_landscape_csv_row_count(tmp_path, shared_spec):
    betas = np.linspace(-0.25, 1.25, 5)
    alphas = np.linspace(-0.25, 1.25, 5)
    losses = np.zeros((5, 5))
    path = tmp_path / "grid.csv"
    write_landscape_csv(path, betas, alphas, losses)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "beta,alpha,avg_loss"
    assert len(lines) == 1 + 25


# ---------------------------------------------------------------- sweep


def test_sweep_p0_one_cell_matches_merge_only(tmp_path, shared_spec):
    stream = tiny_stream()
    tcfg = tiny_tcfg()
    rows, reports = sweep("p0", [1.0], stream, shared_spec, tcfg,
                          PerturbConfig(eps=0.5, p0=1.0 / 3.0), seeds=[5])
    assert len(rows) == 1
    assert rows[0]["status"] == "ok"
    assert rows[0]["n_seeds"] == 1
    cell = reports[(1.0, 5)]
    baseline = run_method("merge_only", stream, shared_spec, tcfg,
                          PerturbConfig(eps=0.5, p0=1.0 / 3.0), seed=5)
    assert cell.acc_matrix.rows == baseline.acc_matrix.rows


def test_sweep_bad_cell_poisons_only_its_row(shared_spec):
    rows, reports = sweep("eps", [0.0, 0.5], tiny_stream(), shared_spec,
                          tiny_tcfg(), PerturbConfig(), seeds=[1])
    assert len(rows) == 2
    assert rows[0]["status"] != "ok"
    assert rows[0]["n_seeds"] == 0
    assert rows[0]["final_acc_mean"] is None
    assert rows[1]["status"] == "ok"
    assert (0.5, 1) in reports


def test_sweep_validation(shared_spec):
    with pytest.raises(ConfigError):
        sweep("lr", [0.1], tiny_stream(), shared_spec, tiny_tcfg(),
              PerturbConfig(), seeds=[1])
    with pytest.raises(ConfigError):
        sweep("p0", [], tiny_stream(), shared_spec, tiny_tcfg(),
              PerturbConfig(), seeds=[1])


def test_sweep_csv_columns(tmp_path):
    rows = [{"param": "p0", "value": 0.5, "n_seeds": 2, "status": "ok",
             "final_acc_mean": 0.5, "final_acc_std": 0.01,
             "aaa_mean": 0.6, "aaa_std": 0.02,
             "forgetting_mean": 0.1, "forgetting_std": 0.0,
             "plasticity_mean": 0.9, "plasticity_std": 0.05}]
    path = tmp_path / "sweep.csv"
    write_sweep_csv(rows, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:4] == ["param", "value", "n_seeds", "status"]
    assert len(lines) == 2


# ---------------------------------------------------------------- misc


def test_summarize_orders_methods_and_aggregates(shared_spec):
    reports = []
    for method in ("pm_full", "naive"):
        for seed in (1, 2):
            reports.append(run_method(method, tiny_stream(), shared_spec,
                                      tiny_tcfg(), PerturbConfig(), seed=seed))
    rows = summarize(reports)
    assert [r["method"] for r in rows] == ["naive", "pm_full"]
    for row in rows:
        assert row["seeds"] == [1, 2]
        assert 0.0 <= row["final_acc_mean"] <= 1.0
        assert row["final_acc_std"] >= 0.0


def test_merge_log_csv_columns(tmp_path, shared_spec):
    report = run_method("merge_only", tiny_stream(), shared_spec, tiny_tcfg(),
                        PerturbConfig(), seed=1)
    path = tmp_path / "m.csv"
    write_merge_log_csv(report.merge_log, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ("task_id,alpha_raw,alpha_used,denominator,"
                        "J_at_alpha,bound_first_term,bound_second_term")
    assert len(lines) == 4


def test_pretrain_logistic_base_is_zero():
    spec = pretrain_base(kind="logistic", input_dim=4, num_classes=3,
                         hidden_dim=0, activation="tanh", adapter_rank=0,
                         pretrain_classes=3, pretrain_samples_per_class=30,
                         pretrain_epochs=1, pretrain_lr=0.01,
                         pretrain_noise=0.5, pretrain_seed=7)
    np.testing.assert_array_equal(spec.frozen_base, np.zeros(spec.dim))


def test_pretrained_mlp_backbone_is_nonzero_head_zero(shared_spec):
    from pamlab.models import layout
    lay = layout(shared_spec)
    assert np.any(lay.view(shared_spec.frozen_base, "w1") != 0.0)
    np.testing.assert_array_equal(
        lay.view(shared_spec.frozen_base, "w2"),
        np.zeros(lay.shape_of("w2")),
    )


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("PAM_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("PAM_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv("PAM_THREADS", "0")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv("PAM_THREADS")
    assert worker_count() >= 1
