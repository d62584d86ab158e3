"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Criteria 5 to 7 share one ablation run on full MUTAG (about half an hour on a
single core); its reports are written under ``acceptance_out/`` for inspection.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import TESTS
from hgcn import tensor as T
from hgcn.fixtures import fixture_dataset
from hgcn.graphs import normalize_adjacency, stratified_subset
from hgcn.model import ModelConfig, coarsen, forward, init_params, route, tgnn_param_count
from hgcn.objectives import MarginConfig, ObjectiveConfig, margin_loss, reconstruction_loss, total_objective
from hgcn.tensor import Tensor
from hgcn.train import (CSTAR, SHARED, ExperimentConfig, TrainConfig, ablation_suite,
                        ablation_table, parse_kv, read_grid_tsv, select_epoch, train_fold,
                        write_report)

OUT = TESTS.parent / "acceptance_out"


def verdict(capsys, number, ok, detail):
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    OUT.mkdir(exist_ok=True)
    with open(OUT / "verdicts.txt", "a") as fh:
        fh.write(line + "\n")
    return ok


@pytest.fixture(scope="session")
def ablations(mutag):
    cfg = ExperimentConfig(ModelConfig.for_dataset(mutag.feature_dim, mutag.num_classes))
    reports = ablation_suite(mutag, 10, cfg, seed=0, criterion=SHARED)
    for name, rep in reports.items():
        write_report(rep, OUT / "ablation" / name, title=f"MUTAG {name}")
    (OUT / "ablation" / "ablation.tsv").write_text(ablation_table(reports))
    return reports


@pytest.fixture(scope="session")
def memorization(mutag):
    subset = stratified_subset(mutag, 20, 0)
    cfg = ExperimentConfig(ModelConfig.for_dataset(mutag.feature_dim, mutag.num_classes),
                           train=TrainConfig(epochs=200))
    start = time.perf_counter()
    res = train_fold(subset.graphs, [], cfg, 0, track_train_accuracy=True)
    return res, time.perf_counter() - start


def test_criterion_1_gradient_oracle(capsys):
    ds = fixture_dataset()
    cfg = ModelConfig.for_dataset(ds.feature_dim, ds.num_classes)
    assert (cfg.K, cfg.R, cfg.num_layers, cfg.h) == (4, 3, 2, 32)
    params = init_params(cfg, seed=0)
    start = time.perf_counter()
    worst, failures = 0.0, []
    for g in ds.graphs:
        def f(ps, g=g):
            return total_objective(g, forward(g, ps, cfg), ps, MarginConfig(),
                                   ObjectiveConfig()).total

        report = T.grad_check(f, params, step=1e-5, tolerance=1e-4)
        worst = max(worst, report.worst)
        failures += [f"{n}@{g.node_count}" for n in report.failures]
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    verdict(capsys, 1, ok, f"fixtures {[g.node_count for g in ds.graphs]} nodes, max relative "
            f"error {worst:.3e} (< 1e-4), {elapsed:.1f}s (< 60s)"
            + (f", offending {failures}" if failures else ""))
    assert ok


def test_criterion_2_routing_golden_trace(capsys):
    golden = json.loads((TESTS / "golden" / "routing_trace.json").read_text())
    history = []
    route(np.array(golden["votes"]), golden["R"], history)
    dev = 0.0
    for mine, want in zip(history, golden["iterations"]):
        for key, attr in (("b", "logits"), ("c", "weights"), ("u", "poses"),
                          ("b_next", "updated_logits")):
            dev = max(dev, float(np.max(np.abs(getattr(mine, attr) - np.array(want[key])))))
    ok = len(history) == golden["R"] == 3 and dev <= 1e-12
    verdict(capsys, 2, ok, f"R=3 trace, max |deviation| over b, c, u = {dev:.2e} (<= 1e-12)")
    assert ok


def test_criterion_3_invariant_suite(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    checks = {}

    mags = np.sort(rng.uniform(0, 100, 500))
    lengths = [np.linalg.norm(T.squash(Tensor(np.array([m, 0.0, 0.0]))).data) for m in mags]
    checks["squash range/monotone"] = all(0 <= v < 1 for v in lengths) and \
        all(a <= b for a, b in zip(lengths, lengths[1:]))

    ok = True
    for _ in range(50):
        history = []
        route(rng.standard_normal((6, 3, 4)), 3, history)
        for it in history:
            ok &= bool(np.all(it.weights >= 0)) and \
                bool(np.all(np.abs(it.weights.sum(axis=1) - 1) <= 1e-12))
    checks["routing simplex"] = ok

    ok = True
    for _ in range(50):
        A = rng.uniform(size=(7, 7))
        A = A + A.T
        C = T.softmax(Tensor(rng.standard_normal((7, 3))), axis=1).data
        out = coarsen(A, C).data
        ok &= bool(np.allclose(out, out.T, atol=1e-12, rtol=0)) and bool(np.all(out >= 0))
    checks["coarsening symmetry"] = ok

    ds = fixture_dataset()
    cfg = ModelConfig.for_dataset(ds.feature_dim, ds.num_classes)
    params = init_params(cfg, seed=0)
    dev = 0.0
    for g in ds.graphs:
        base = forward(g, params, cfg).lengths
        for _ in range(100):
            other = forward(g.permuted(rng.permutation(g.node_count)), params, cfg).lengths
            dev = max(dev, float(np.max(np.abs(other - base))))
    checks[f"permutation invariance ({dev:.1e})"] = dev <= 1e-9

    dev = 0.0
    for _ in range(100):
        caps = rng.uniform(-0.4, 0.4, (2, 32))
        q = [np.linalg.qr(rng.standard_normal((32, 32)))[0] for _ in range(2)]
        rotated = np.stack([q[i] @ caps[i] for i in range(2)])
        dev = max(dev, abs(margin_loss(rotated, 0).item() - margin_loss(caps, 0).item()))
    checks[f"margin rotation ({dev:.1e})"] = dev <= 1e-12

    dev = 0.0
    for g in ds.graphs:
        Z = rng.standard_normal((g.node_count, 32)) * 0.3
        base = reconstruction_loss(g.adjacency, Z).item()
        for _ in range(100):
            p = rng.permutation(g.node_count)
            dev = max(dev, abs(reconstruction_loss(g.adjacency[np.ix_(p, p)], Z[p]).item() - base))
    checks[f"reconstruction permutation ({dev:.1e})"] = dev <= 1e-12

    elapsed = time.perf_counter() - start
    ok = all(checks.values()) and elapsed < 120
    bad = [k for k, v in checks.items() if not v]
    verdict(capsys, 3, ok, f"{len(checks)} invariants, {elapsed:.1f}s (< 120s)"
            + (f", failing {bad}" if bad else "; " + ", ".join(checks)))
    assert ok


def test_criterion_4_memorization(capsys, memorization):
    res, elapsed = memorization
    best = float(res.train_accuracy.max())
    first = int(np.argmax(res.train_accuracy >= 0.99)) + 1 if best >= 0.99 else None
    ok = best >= 0.99 and elapsed < 300
    verdict(capsys, 4, ok, f"20-graph stratified subset (seed 0), best training accuracy "
            f"{best:.3f} (>= 0.99), first reached at epoch {first}, {elapsed:.1f}s (< 300s)")
    assert ok


def test_criterion_5_mutag_cross_validation(capsys, ablations):
    full = ablations["full"]
    ok = full.criterion == SHARED and full.k == 10 and full.mean_accuracy >= 0.80 \
        and full.wall_time <= 1800
    verdict(capsys, 5, ok, f"MUTAG 10-fold shared-epoch accuracy {100 * full.mean_accuracy:.2f} "
            f"+- {100 * full.std_accuracy:.2f} at epoch {full.selected_epoch} (>= 80%), "
            f"{full.wall_time:.0f}s on this machine (<= 1800s)")
    assert ok


def test_criterion_6_ablation_reports(capsys, ablations):
    names = list(ablations)
    problems = []
    if names != ["full", "A1", "A2", "A3"]:
        problems.append(f"variants {names}")
    if len({r.seed for r in ablations.values()}) != 1:
        problems.append("seeds differ")
    if len({r.accuracy_grid.shape for r in ablations.values()}) != 1:
        problems.append("grid shapes differ")
    for name in names:
        d = OUT / "ablation" / name
        grid = read_grid_tsv((d / "accuracy_grid.tsv").read_text())
        kv = parse_kv((d / "report.kv").read_text())
        _, acc, _ = select_epoch(grid, kv["criterion"])
        if abs(acc.mean() - float(kv["mean_accuracy"])) > 1e-12 or \
                abs(acc.std() - float(kv["std_accuracy"])) > 1e-12:
            problems.append(f"{name} not recomputable")
    ok = not problems
    summary = ", ".join(f"{n} {100 * r.mean_accuracy:.2f}" for n, r in ablations.items())
    verdict(capsys, 6, ok, f"four reports from seed {ablations['full'].seed}: {summary}"
            + (f"; problems {problems}" if problems else "; recomputed from archived grids"))
    assert ok


def test_criterion_7_cstar_dominance(capsys, memorization, ablations):
    grids = {"memorization (training curve)": memorization[0].train_accuracy[None, :]}
    grids.update({f"ablation {n}": r.accuracy_grid for n, r in ablations.items()})
    gaps = {}
    for name, grid in grids.items():
        _, shared, _ = select_epoch(grid, SHARED)
        _, cstar, _ = select_epoch(grid, CSTAR)
        gaps[name] = cstar.mean() - shared.mean()
    ok = all(g >= 0 for g in gaps.values())
    verdict(capsys, 7, ok, f"C* - shared on {len(gaps)} grids: "
            + ", ".join(f"{n} {100 * g:+.2f}" for n, g in gaps.items()))
    assert ok


def test_criterion_8_parameter_count(capsys):
    h, classes = 32, 2
    counts = {}
    for n_parts in (5, 50):
        params = init_params(ModelConfig(7, (n_parts, classes), h=h), seed=0)
        counts[n_parts] = tgnn_param_count(params, 2)
    ok = counts[5] == counts[50] == classes * h * h
    verdict(capsys, 8, ok, f"layer TGNN parameters with N_l = 5: {counts[5]}, N_l = 50: "
            f"{counts[50]}, expected N_(l+1) d_l d_(l+1) = {classes * h * h}")
    assert ok
