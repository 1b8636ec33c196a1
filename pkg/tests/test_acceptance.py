"""End-to-end acceptance suite: one test per criterion, one PASS/FAIL line each.

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``. MNIST criteria read the IDX files from
``$MNIST_DIR`` (default ``/root/data/mnist``).
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from dpconsensus.accountant import MechanismParams, calibrate_sigma, compose, rdp_sampled_gaussian, to_eps_delta
from dpconsensus.attack import AttackConfig, audit
from dpconsensus.engines import consensus_distance
from dpconsensus.errors import BadMagicError
from dpconsensus.experiment import (
    ExperimentConfig,
    run_connectivity_sweep,
    run_experiment,
    run_sigma_sweep,
    run_split_sweep,
)
from dpconsensus.graphs import build_mixing_matrix
from dpconsensus.idx import find_mnist, load_idx_dataset
from oracles import rdp_quadrature
from scenarios import PAIRS, reduction_trajectories, structural_fuzz

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# canonical MNIST label histograms
TRAIN_COUNTS = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
TEST_COUNTS = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]

# one tuned config per algorithm family; the private/non-private variants only differ in epsilon
MNIST_CONFIGS = {"dsgd": "mnist_dsgd.json", "dsgt": "mnist_desk.json", "dinno": "mnist_dinno.json"}


@pytest.fixture
def report(capsys):
    """Prints ``criterion N: PASS|FAIL (...)`` outside pytest's capture."""

    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def mnist_config(mnist_dir, algorithm, epsilon=None, **changes):
    raw = json.loads((CONFIGS / MNIST_CONFIGS[algorithm.removeprefix("dp-")]).read_text())
    raw.update(output_dir=None, algorithm=algorithm, data={"kind": "mnist", "path": str(mnist_dir)})
    raw["target_epsilon"] = epsilon if algorithm.startswith("dp-") else None
    raw.update(changes)
    return ExperimentConfig.from_dict(raw)


def test_criterion_01_reduction_identity(report):
    start = time.perf_counter()
    same = {}
    for pair in PAIRS:
        private, base = reduction_trajectories(pair, rounds=200)
        same[pair[0]] = bool(np.array_equal(private, base))
    elapsed = time.perf_counter() - start
    ok = all(same.values()) and elapsed < 5
    assert report(1, ok, f"bitwise={same} runtime={elapsed:.1f}s"), same


def test_criterion_02_noise_floor_scaling(report):
    base = ExperimentConfig.from_dict({**json.loads((CONFIGS / "sigma_ring.json").read_text()), "output_dir": None})
    start = time.perf_counter()
    fits = {}
    for alg, changes in (("dp-dsgd", {}), ("dp-dsgt", {}), ("dp-dinno", {"lr": 0.02})):
        r = run_sigma_sweep(dataclasses.replace(base, algorithm=alg, **changes), [0.5, 1, 2, 4], repetitions=5)
        fits[alg] = (round(r.slope, 3), round(r.r_squared, 4))
    elapsed = time.perf_counter() - start
    ok = all(0.7 <= s <= 1.3 and r2 >= 0.9 for s, r2 in fits.values()) and elapsed < 600
    assert report(2, ok, f"(slope, R^2)={fits} runtime={elapsed:.0f}s"), fits


def test_criterion_03_non_private_consensus(report):
    start = time.perf_counter()
    results = {}
    for alg, changes in (
        ("dsgt", {"lr": 0.1}),
        ("dinno", {"lr": 0.05, "rho": 1.0, "primal_steps": 3, "primal_optimizer": "sgd"}),
        ("dsgd", {"lr": 0.2, "lr_half": 10}),
    ):
        cfg = ExperimentConfig(algorithm=alg, agents=5, graph={"kind": "ring"}, iterations=10_000,
                               metrics_every=10_000, **changes)
        trace = run_experiment(cfg)
        opt = np.array(trace.manifest["optimum"])
        results[alg] = (float(np.linalg.norm(trace.final_thetas.mean(axis=0) - opt)),
                        consensus_distance(trace.final_thetas))
    elapsed = time.perf_counter() - start
    ok = (
        all(err <= 1e-6 and cons <= 1e-6 for a, (err, cons) in results.items() if a != "dsgd")
        and results["dsgd"][0] <= 1e-4
        and elapsed < 120
    )
    shown = {a: (f"{e:.2e}", f"{c:.2e}") for a, (e, c) in results.items()}
    assert report(3, ok, f"(error, consensus)={shown} runtime={elapsed:.0f}s"), results


def test_criterion_04_accountant_oracle(report):
    start = time.perf_counter()
    gen = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        q, sigma, alpha = float(gen.uniform(0.001, 0.5)), float(gen.uniform(0.6, 4.0)), int(gen.integers(2, 33))
        ours = rdp_sampled_gaussian(MechanismParams(q, sigma), [alpha]).values[0]
        worst = max(worst, abs(ours - rdp_quadrature(q, sigma, alpha)) / ours)
    worst_full = 0.0
    for _ in range(5):
        sigma, alpha = float(gen.uniform(0.5, 5.0)), int(gen.integers(2, 257))
        ours = rdp_sampled_gaussian(MechanismParams(1.0, sigma), [alpha]).values[0]
        worst_full = max(worst_full, abs(ours - alpha / (2 * sigma**2)) / (alpha / (2 * sigma**2)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and worst_full <= 1e-10 and elapsed < 60
    assert report(4, ok, f"max rel err subsampled={worst:.1e} full={worst_full:.1e} runtime={elapsed:.1f}s")


def test_criterion_05_calibration_round_trip(report):
    start = time.perf_counter()
    sigma = calibrate_sigma(0.05, 2000, 1.0, 1e-5)
    eps = to_eps_delta(compose(rdp_sampled_gaussian(MechanismParams(0.05, sigma)), 2000), 1e-5).epsilon
    elapsed = time.perf_counter() - start
    ok = 0.95 <= eps <= 1.0 and elapsed < 10
    assert report(5, ok, f"sigma={sigma:.4f} eps={eps:.4f} runtime={elapsed:.2f}s")


@pytest.mark.slow
def test_criterion_06_desk_scale_mnist(report, mnist_dir):
    start = time.perf_counter()
    acc = {}
    for alg in ("dsgd", "dsgt", "dinno"):
        acc[(alg, "non-private")] = run_experiment(mnist_config(mnist_dir, alg)).manifest["final_accuracy"]
        for eps in (10.0, 0.5):
            acc[(alg, eps)] = run_experiment(mnist_config(mnist_dir, "dp-" + alg, eps)).manifest["final_accuracy"]
    elapsed = time.perf_counter() - start
    ordered = {a: acc[(a, "non-private")] >= acc[(a, 10.0)] >= acc[(a, 0.5)] for a in ("dsgd", "dsgt", "dinno")}
    ok = acc[("dsgt", 10.0)] >= 0.80 and acc[("dsgt", "non-private")] >= 0.90 and all(ordered.values()) \
        and elapsed < 1800
    shown = {f"{a}@{e}": round(v, 4) for (a, e), v in acc.items()}
    assert report(6, ok, f"accuracy={shown} orderings={ordered} runtime={elapsed:.0f}s"), shown


@pytest.mark.slow
def test_criterion_07_connectivity_invariance(report, mnist_dir):
    start = time.perf_counter()
    rows = {}
    for alg in ("dp-dsgt", "dp-dsgd"):
        for r in run_connectivity_sweep(mnist_config(mnist_dir, alg, 10.0), [0.06, 0.4, 1.0], trials=3):
            rows[(alg, r.value)] = r
    elapsed = time.perf_counter() - start
    means = [rows[("dp-dsgt", v)].mean for v in (0.06, 0.4, 1.0)]
    dsgt_spread = 100 * (max(means) - min(means))
    sparse, full = rows[("dp-dsgd", 0.06)].spread, rows[("dp-dsgd", 1.0)].spread
    ok = dsgt_spread <= 5 and sparse > full and elapsed < 7200
    table = {f"{a}@{v}": (round(r.mean, 4), round(r.spread, 4)) for (a, v), r in rows.items()}
    assert report(7, ok, f"dp-dsgt spread={dsgt_spread:.2f}pt dp-dsgd trial spread 0.06={sparse:.4f} "
                         f"1.0={full:.4f} (mean, spread)={table} runtime={elapsed:.0f}s"), table


@pytest.mark.slow
def test_criterion_08_split_invariance(report, mnist_dir):
    start = time.perf_counter()
    graph = {"kind": "generated", "target_fiedler": 0.06, "tolerance": 0.05, "seed": 1}
    rows = {}
    for alg in ("dp-dsgt", "dp-dsgd"):
        for r in run_split_sweep(mnist_config(mnist_dir, alg, 10.0, graph=graph), [0.0, 0.5, 1.0], trials=2):
            rows[(alg, r.value)] = r
    elapsed = time.perf_counter() - start
    means = [rows[("dp-dsgt", t)].mean for t in (0.0, 0.5, 1.0)]
    dsgt_spread = 100 * (max(means) - min(means))
    ok = dsgt_spread <= 5 and rows[("dp-dsgd", 1.0)].mean < rows[("dp-dsgd", 0.0)].mean and elapsed < 7200
    table = {f"{a}@t={t}": round(r.mean, 4) for (a, t), r in rows.items()}
    assert report(8, ok, f"dp-dsgt spread={dsgt_spread:.2f}pt mean accuracy={table} runtime={elapsed:.0f}s"), table


def test_criterion_09_structural_invariants(report):
    start = time.perf_counter()
    failures = []
    for alg in ("dsgd", "dsgt", "dinno", "dp-dsgd", "dp-dsgt", "dp-dinno"):
        for seed in range(4):
            fz = structural_fuzz(alg, 100 + seed, rounds=100)
            W = fz.W
            adj = fz.graph.adjacency() != 0
            off = ~np.eye(len(W), dtype=bool)
            checks = {
                "symmetric": np.array_equal(W, W.T),
                "nonnegative": bool(np.all(W >= 0)),
                "doubly stochastic": np.allclose(W.sum(0), 1, atol=1e-12) and np.allclose(W.sum(1), 1, atol=1e-12),
                "sparsity": np.array_equal(W[off] != 0, adj[off]),
                "tracker sum": all(x <= 1e-9 for x in fz.tracker_gap),
                "dual sum": all(x <= 1e-9 for x in fz.dual_sum),
                "clip bound": fz.clip.violations == 0,
                "eps monotone": all(a <= b for a, b in zip(fz.eps, fz.eps[1:])),
            }
            failures += [f"{alg}/{seed}/{k}" for k, v in checks.items() if not v]
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    assert report(9, ok, f"violations={failures or 'none'} runtime={elapsed:.1f}s"), failures


@pytest.mark.slow
def test_criterion_10_attack_audit(report, mnist_dir, tmp_path):
    raw = json.loads((CONFIGS / "attack_audit.json").read_text())
    base = AttackConfig.from_dict({**raw, "mnist_dir": str(mnist_dir), "output_dir": None})
    start = time.perf_counter()
    bounds = []
    for repeat in range(10):
        bounds.append(audit(dataclasses.replace(base, seed=repeat)).eps_lower_bound)
    open_audit = audit(dataclasses.replace(base, algorithm="dsgd", epsilon=None, output_dir=str(tmp_path)))
    elapsed = time.perf_counter() - start
    below = sum(b < 1 for b in bounds)
    ok = below >= 9 and open_audit.eps_lower_bound > 1 and elapsed < 2700
    shown = [round(b, 3) for b in bounds]
    assert report(10, ok, f"DP bounds={shown} below 1: {below}/10 non-private bound="
                          f"{open_audit.eps_lower_bound:.3f} runtime={elapsed:.0f}s"), shown


def test_criterion_11_idx_ingestion(report, mnist_dir, tmp_path):
    start = time.perf_counter()
    files = find_mnist(mnist_dir)
    train = load_idx_dataset(*files["train"])
    test = load_idx_dataset(*files["test"])
    hist_train = np.bincount(train.labels, minlength=10).tolist()
    hist_test = np.bincount(test.labels, minlength=10).tolist()
    bad = tmp_path / "bad-labels"
    bad.write_bytes((0x803).to_bytes(4, "big") + (1).to_bytes(4, "big") + b"\x00")
    try:
        load_idx_dataset(files["test"][0], bad)
        rejected = False
    except BadMagicError:
        rejected = True
    elapsed = time.perf_counter() - start
    ok = (
        len(train) == 60_000 and len(test) == 10_000 and train.features.shape[1] == 784
        and hist_train == TRAIN_COUNTS and hist_test == TEST_COUNTS and rejected and elapsed < 10
    )
    assert report(11, ok, f"train={len(train)} test={len(test)} histograms match="
                          f"{hist_train == TRAIN_COUNTS and hist_test == TEST_COUNTS} bad magic rejected={rejected} "
                          f"runtime={elapsed:.1f}s")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
