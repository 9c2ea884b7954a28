"""End-to-end acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s``; each test prints a
single PASS/FAIL line and the lines are repeated in the terminal summary.
"""

import dataclasses
import hashlib
import time

import numpy as np
import pytest

from unlearn_lab import cli
from unlearn_lab import evaluation as ev
from unlearn_lab import numerics as nx
from unlearn_lab.config import DataConfig, ExperimentConfig
from unlearn_lab.datasets import gen_blobs, make_partition, with_label_noise
from unlearn_lab.experiments import influence_check, run_cell
from unlearn_lab.models import Checkpoint, ModelSpec, sample_objective
from unlearn_lab.seeding import stream_seed
from unlearn_lab.training import TrainConfig, fit_newton, gr_loss, gr_loss_grad, grad_norm_stats, train
from unlearn_lab.unlearning import (InfluenceQuery, UnlearnRequest, default_eta, gradient_sum, iau_unlearn,
                                    influence_remove, predict_add_from_gradient, predict_remove_from_gradient,
                                    sample_gradient)

pytestmark = pytest.mark.acceptance

SEEDS = range(10)
ORACLE_L2 = (1e-3, 1e-2, 1e-1)


def blobs_config(model, lr):
    return ExperimentConfig(
        seed=0,
        data=DataConfig(source="blobs", d=10, classes=3, spread=0.5,
                        sizes=(("train", 1000), ("val", 200), ("test", 2000), ("shadow", 0))),
        model=model,
        train=TrainConfig(lr=lr, batch_size=32, max_epochs=200, patience=10),
    )


LOGISTIC = blobs_config({"kind": "logistic", "hidden": (), "activation": "relu", "l2": 1e-3}, 0.5)
MLP32 = blobs_config({"kind": "mlp", "hidden": (32,), "activation": "relu", "l2": 1e-3}, 0.1)


@pytest.fixture(scope="module")
def logistic_cells():
    return [run_cell(LOGISTIC, s, with_attack=False) for s in SEEDS]


@pytest.fixture(scope="module")
def mlp_cells():
    return [run_cell(MLP32, s, strategies=("iau", "retrain"), with_attack=False) for s in SEEDS]


def oracle_instance(i):
    """Binary l2-logistic instance ``i``: 200 training points plus one extra point."""
    pts = gen_blobs(201, 10, 2, 0.15, seed=i)
    train_set, extra = pts.subset(np.arange(200)), pts.subset([200])
    return ModelSpec.logistic(10, 2, ORACLE_L2[i % 3]), train_set, extra


def oracle_runs(direction):
    results = []
    for i in range(20):
        spec, train_set, extra = oracle_instance(i)
        index = (i * 7) % 200 if direction == "remove" else 0
        results.append(influence_check(spec, train_set, direction, index, extra=extra, damping=0.0, tol=1e-10))
    return results


def _kink_free(spec, theta, x, h):
    if spec.kind == "logistic" or spec.activation != "relu":
        return True
    pres, _ = nx.net_forward(spec.net, theta, x[None, :])
    return all(np.min(np.abs(z)) > 100 * h * (1 + np.abs(x).sum()) for z in pres[:-1])


def test_criterion_01_gradient_correctness(report):
    specs = [ModelSpec.logistic(4, 3, 1e-2), ModelSpec.logistic(6, 2, 0.0),
             ModelSpec.mlp(4, [6], 3, "tanh", 1e-3), ModelSpec.mlp(3, [5, 4], 2, "relu", 1e-2)]
    r = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    worst_plain = worst_gr = 0.0
    probes = 0
    while probes < 1000:
        spec = specs[probes % len(specs)]
        theta, x = r.standard_normal(spec.n_params), r.standard_normal(spec.input_dim)
        y = int(r.integers(spec.classes))
        if not _kink_free(spec, theta, x, 1e-5):
            continue
        obj = sample_objective(spec, x, y)
        g = nx.value_and_grad(obj, theta)[1]
        worst_plain = max(worst_plain, nx.rel_error(g, nx.finite_diff_grad(obj, theta, h=1e-5)))
        alpha = float(r.uniform(0.01, 1.0))
        fd = nx.finite_diff_grad(lambda t: gr_loss(spec, t, x, y, alpha), theta, h=1e-5)
        worst_gr = max(worst_gr, nx.rel_error(gr_loss_grad(spec, theta, x, y, alpha), fd))
        probes += 1
    elapsed = time.perf_counter() - t0
    ok = worst_plain <= 1e-5 and worst_gr <= 1e-4 and elapsed < 60
    report(1, "gradient correctness", ok,
           f"max rel err {worst_plain:.2e} (<=1e-5), GR {worst_gr:.2e} (<=1e-4), {elapsed:.1f}s (<60s)")
    assert ok


@pytest.mark.parametrize("number,direction", [(2, "add"), (3, "remove")])
def test_criteria_02_03_oracle_fidelity(report, number, direction):
    t0 = time.perf_counter()
    runs = oracle_runs(direction)
    elapsed = time.perf_counter() - t0
    good = sum(r.cosine >= 0.99 and r.rel_error <= 0.05 for r in runs)
    ok = good >= 18 and elapsed < 120
    report(number, f"influence {direction} vs retrain", ok,
           f"{good}/20 instances with cosine>=0.99 and rel err<=5% (need 18), "
           f"min cosine {min(r.cosine for r in runs):.5f}, max rel err {max(r.rel_error for r in runs):.2%}, "
           f"{elapsed:.1f}s (<120s)")
    assert ok


def test_criterion_04_opposite_gradient_identity(report):
    r = np.random.default_rng(4)
    worst = 0.0
    for k in range(50):
        spec, train_set, _ = oracle_instance(k % 20)
        ck = Checkpoint(spec, r.standard_normal(spec.n_params) * 0.5)
        g = r.standard_normal(spec.n_params)
        q = InfluenceQuery(damping=float(r.choice([0.0, 1e-3])), tol=1e-10)
        add = predict_add_from_gradient(ck, train_set, -g, q) - ck.params
        rem = predict_remove_from_gradient(ck, train_set, g, q) - ck.params
        worst = max(worst, nx.rel_error(add, rem))
    ok = worst <= 1e-8
    report(4, "opposite-gradient identity", ok, f"max rel diff {worst:.2e} over 50 probes (<=1e-8)")
    assert ok


def test_criterion_05_erm_stationarity(report):
    worst_grad, worst_cos = 0.0, 1.0
    for i in range(20):
        spec, train_set, _ = oracle_instance(i)
        ck = Checkpoint(spec, fit_newton(spec, train_set.features, train_set.labels, tol=1e-10))
        _, total = nx.sum_loss_and_grad(spec, ck.params, train_set.features, train_set.labels)
        worst_grad = max(worst_grad, float(np.linalg.norm(total)))
        part = make_partition(train_set.n, ratio=0.05, seed=i)
        eta = default_eta(0.5, train_set.n)
        out, _ = iau_unlearn(ck, train_set, UnlearnRequest(part, eta))
        g_f = gradient_sum(spec, ck.params, train_set, part.forget_indices)
        worst_cos = min(worst_cos, nx.cosine(out.params - ck.params, 2 * eta * g_f))
    ok = worst_grad <= 1e-6 and worst_cos >= 0.99
    report(5, "ERM stationarity", ok,
           f"max ||sum grad|| {worst_grad:.2e} (<=1e-6), min cosine(IAU step, 2 eta G_f) {worst_cos:.6f} (>=0.99)")
    assert ok


def test_criterion_06_iau_utility(report, logistic_cells):
    mus = [c.mu["iau"] for c in logistic_cells]
    ok = float(np.mean(mus)) <= 3.0
    report(6, "IAU model utility", ok, f"mean MU {np.mean(mus):.3f} points over 10 seeds (<=3), max {max(mus):.2f}")
    assert ok


def test_criterion_07_speedup(report, logistic_cells, mlp_cells):
    details, ok = [], True
    for name, cells in (("logistic", logistic_cells), ("mlp[32]", mlp_cells)):
        t_iau = sum(c.outputs["iau"][1] for c in cells)
        t_retrain = sum(c.outputs["retrain"][1] for c in cells)
        ratio = t_retrain / t_iau
        ok &= t_iau <= t_retrain / 10
        details.append(f"{name} retrain/iau {ratio:.1f}x")
    report(7, "speedup over retraining", ok, ", ".join(details) + " (>=10x)")
    assert ok


def test_criterion_08_hessian_avoidance(report):
    spec, train_set, _ = oracle_instance(0)
    ck = Checkpoint(spec, fit_newton(spec, train_set.features, train_set.labels, tol=1e-10))
    part = make_partition(train_set.n, ratio=0.05, seed=0)
    with nx.count_ops() as iau_ops:
        iau_unlearn(ck, train_set, UnlearnRequest(part, default_eta(0.5, train_set.n)))
    with nx.count_ops() as inf_ops:
        influence_remove(ck, train_set, int(part.forget_indices[0]))
    ok = (iau_ops.hvp_calls == 0 and iau_ops.cg_iterations == 0
          and inf_ops.hvp_calls >= 1 and inf_ops.cg_iterations >= 1)
    report(8, "Hessian avoidance", ok,
           f"iau hvp={iau_ops.hvp_calls} cg={iau_ops.cg_iterations}; "
           f"influence hvp={inf_ops.hvp_calls} cg={inf_ops.cg_iterations}")
    assert ok


def test_criterion_09_gr_effect(report):
    spec = ModelSpec.logistic(10, 3, 1e-3)
    wins, pairs = 0, []
    for seed in SEEDS:
        clean = gen_blobs(1000, 10, 3, 0.5, stream_seed(seed, "train-data"))
        noisy, _ = with_label_noise(clean, 0.05, stream_seed(seed, "label-noise"))
        val = gen_blobs(200, 10, 3, 0.5, stream_seed(seed, "val-data"))
        medians = []
        for alpha in (0.0, 0.05):
            cfg = TrainConfig(lr=0.5, batch_size=32, max_epochs=200, patience=10, alpha=alpha, seed=seed)
            ck, _ = train(spec, noisy, cfg, val=val)
            medians.append(grad_norm_stats(spec, ck.params, noisy).median)
        wins += medians[1] < medians[0]
        pairs.append(medians)
    ok = wins >= 8
    report(9, "GR lowers median gradient norm", ok,
           f"{wins}/10 seeds (need 8); mean median plain {np.mean([p[0] for p in pairs]):.4f} "
           f"vs GR {np.mean([p[1] for p in pairs]):.4f}")
    assert ok


def test_criterion_10_mia_sanity(report):
    t0 = time.perf_counter()
    spec = ModelSpec.mlp(10, [64], 3, "relu", 0.0)
    n, k, spread = 200, 10, 1.5
    attack_acc, control_acc, ue_self = [], [], []
    for seed in range(5):
        cfg = TrainConfig(lr=0.1, batch_size=16, max_epochs=500, patience=500, seed=seed, early_stopping=False)
        members = gen_blobs(n, 10, 3, spread, stream_seed(seed, "train-data"))
        outsiders = gen_blobs(n, 10, 3, spread, stream_seed(seed, "nonmember-data"))
        pool = gen_blobs(2 * k * n, 10, 3, spread, stream_seed(seed, "shadow-data"))
        target, _ = train(spec, members, cfg)
        shadows = ev.train_shadows(spec, pool, k, cfg, train_size=n, seed=seed)
        data = ev.build_attack_dataset(shadows, pool)
        attack = ev.train_attack(data, seed=seed)
        control = ev.train_attack(ev.shuffled_labels(data, seed), seed=seed)
        attack_acc.append(ev.attack_accuracy(attack, target, members, outsiders))
        control_acc.append(100 * control.heldout_accuracy)
        ue_self.append(ev.compute_metrics(target, target, outsiders, members, attack, 0.0).ue)
    elapsed = time.perf_counter() - t0
    ok = (min(attack_acc) > 55 and all(45 <= a <= 55 for a in control_acc)
          and all(u == 0.0 for u in ue_self) and elapsed < 300)
    report(10, "MIA pipeline sanity", ok,
           f"overfit attack acc min {min(attack_acc):.1f}% (>55), shuffled control "
           f"{min(control_acc):.1f}-{max(control_acc):.1f}% (45-55), UE(gold, gold) {max(ue_self)}, "
           f"{elapsed:.0f}s (<300s)")
    assert ok


CLI_CONFIG = """\
seed: 7
data:
  source: blobs
  d: 10
  classes: 3
  spread: 0.5
  sizes: {train: 1000, val: 200, test: 1000, shadow: 600}
model: {kind: logistic, l2: 0.001}
train: {lr: 0.5, batch_size: 32, max_epochs: 200, patience: 10}
unlearn: {ratio: 0.05, mode: iau}
evaluation: {shadows: 3}
bench: {seeds: [0, 1]}
out: run
"""

TIMING_FILES = {"train_timing.txt", "unlearned_timing.txt", "gold_timing.txt", "timing.csv", "summary.txt",
                "report.txt"}


def _run_cli(cfg, out):
    for argv in (["train"], ["unlearn"], ["unlearn", "--mode", "incremental_only"], ["bench"]):
        assert cli.main([argv[0], "--config", str(cfg), "--out", str(out)] + argv[1:]) == 0
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.iterdir()) if p.name not in TIMING_FILES}


def test_criterion_11_cli_determinism(report, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(CLI_CONFIG)
    first, second = _run_cli(cfg, tmp_path / "a"), _run_cli(cfg, tmp_path / "b")
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = first == second and {"checkpoint.ulck", "unlearned.ulck", "bench_metrics.csv"} <= set(first)
    report(11, "CLI determinism", ok,
           f"{len(first)} hashed outputs, {len(differing)} differ" + (f": {differing}" if differing else ""))
    assert ok


def test_criterion_12_ablation_ordering(report, logistic_cells):
    mu_ia = float(np.mean([c.mu["incremental_only"] for c in logistic_cells]))
    mu_iau = float(np.mean([c.mu["iau"] for c in logistic_cells]))
    ok = mu_ia >= mu_iau
    report(12, "ablation ordering", ok,
           f"mean MU incremental_only {mu_ia:.3f} vs iau {mu_iau:.3f} over 10 seeds (need incremental_only >= iau)")
    assert ok
