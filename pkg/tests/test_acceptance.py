"""Acceptance criteria 1-12.

Each test records a PASS/FAIL line (printed immediately and again in the
terminal summary) and then asserts, so a failing criterion fails the suite.
The directional criteria (5-8, 12) share one set of runs on the default
synthetic task over the three repeat seeds of master seed 0.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, param_bytes
from mixfed.autodiff import Parameter, cross_entropy, finite_diff_grad, max_relative_error
from mixfed.config import ExperimentConfig
from mixfed.data import (LabeledDataset, dirichlet_partition, generate_synthetic,
                         pathological_partition, split_train_test)
from mixfed.metrics import read_csv, windowed_descent_fraction, write_jsonl
from mixfed.models import (NUM_VARIANTS, MixVector, build_homo_extractor, build_zoo_model,
                           mixed_backward, mixed_forward)
from mixfed.protocol import aggregate, build_federation, run_experiment, run_round
from mixfed.runner import repeat_seeds, sweep

DEFAULT = ExperimentConfig()  # C=10 classes, d=32, N=10, full participation, 2 of 10, T=30, E=1, b=64
SEEDS = repeat_seeds(DEFAULT.replace(repeats=3))


def record(n, title, ok, detail):
    ACCEPTANCE[n] = (title, bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  [{n:2d}] {title}: {detail}")
    assert ok, f"criterion {n} ({title}) failed: {detail}"


def wins(pairs):
    return sum(bool(w) for w in pairs)


# -- shared directional runs ------------------------------------------------------------

@pytest.fixture(scope="module")
def default_runs():
    runs = {}
    start = time.perf_counter()
    for algo in ("pfedafm", "standalone"):
        runs[algo] = [run_experiment(DEFAULT.replace(algorithm=algo), seed=s) for s in SEEDS]
    runs["elapsed_5"] = time.perf_counter() - start
    runs["pfedafm_e2e"] = [run_experiment(DEFAULT.replace(algorithm="pfedafm_e2e"), seed=s)
                           for s in SEEDS]
    return runs


def best(result):
    return max(r["mean_accuracy"] for r in result.records)


# -- 1 -----------------------------------------------------------------------------------

def test_01_gradient_oracle():
    start = time.perf_counter()
    worst = 0.0
    for seed, variant in itertools.product(range(10), range(NUM_VARIANTS)):
        rng = np.random.default_rng([seed, variant])
        input_dim, d, c, n = 6, 4, 3, 5
        homo = build_homo_extractor(input_dim, d, seed=[seed, variant, 1])
        model = build_zoo_model(variant, input_dim, d, c, seed=[seed, variant, 2])
        alpha = MixVector(Parameter(rng.uniform(-0.5, 1.5, size=d), name="alpha"), 0.1)
        x = rng.standard_normal((n, input_dim))
        y = rng.integers(0, c, size=n)
        params = homo.parameters() + model.extractor_params() + model.header_params() + [alpha.alpha]
        logits, tape = mixed_forward(x, homo, model, alpha)
        mixed_backward(tape, cross_entropy(logits, y)[1])
        numeric = finite_diff_grad(
            lambda: cross_entropy(mixed_forward(x, homo, model, alpha)[0], y)[0], params, 1e-5)
        worst = max(worst, max_relative_error([p.grad for p in params], numeric))
    elapsed = time.perf_counter() - start
    record(1, "gradient oracle", worst < 1e-4 and elapsed < 30.0,
           f"max rel err {worst:.2e} (< 1e-4) over 10 seeds x {NUM_VARIANTS} variants in {elapsed:.1f}s")


# -- 2 -----------------------------------------------------------------------------------

def test_02_freeze_soundness():
    fed = build_federation(DEFAULT.replace(T=5))
    checks = {"phase1": 0, "phase2": 0}
    violations = []
    after_phase1 = {}
    round_theta = []

    def observer(phase, i, client):
        local = param_bytes(client.model.parameters() + [client.alpha.alpha])
        if phase == "phase1":
            if param_bytes(client.theta.parameters()) != round_theta[0]:
                violations.append(("theta moved in phase 1", client.client_id, i))
            after_phase1[client.client_id] = local
        elif phase == "phase2":
            if local != after_phase1[client.client_id]:
                violations.append(("local model or alpha moved in phase 2", client.client_id, i))
        checks[phase] += 1

    for _ in range(5):
        round_theta[:] = [param_bytes(fed.server.shared)]
        run_round(fed, observer)
    ok = not violations and checks["phase1"] > 0 and checks["phase2"] > 0
    record(2, "freeze soundness", ok,
           f"{checks['phase1']} phase-1 and {checks['phase2']} phase-2 batches checked, "
           f"{len(violations)} violations")


# -- 3 -----------------------------------------------------------------------------------

def test_03_aggregation_exactness():
    rng = np.random.default_rng(2024)
    worst, idem_fail, hull_fail = 0.0, 0, 0
    for _ in range(100):
        k = int(rng.integers(1, 8))
        shapes = [(int(rng.integers(1, 5)), int(rng.integers(1, 5))), (int(rng.integers(1, 6)),)]
        thetas = [[rng.standard_normal(s) * 10.0 ** rng.integers(-3, 4) for s in shapes] for _ in range(k)]
        sizes = [int(s) for s in rng.integers(1, 1000, size=k)]
        out = aggregate(thetas, sizes)
        total = sum(sizes)
        for j, o in enumerate(out):
            ref = np.zeros_like(o)
            for th, n in zip(thetas, sizes):
                ref += th[j] * (n / total)
            worst = max(worst, float(np.max(np.abs(o - ref))))
            stacked = np.stack([th[j] for th in thetas])
            hull_fail += int(np.any(o < stacked.min(axis=0)) or np.any(o > stacked.max(axis=0)))
        same = aggregate([[a.copy() for a in thetas[0]] for _ in range(k)], sizes)
        idem_fail += int(any(s.tobytes() != a.tobytes() for s, a in zip(same, thetas[0])))
    ok = worst <= 1e-12 and idem_fail == 0 and hull_fail == 0
    record(3, "aggregation exactness", ok,
           f"max |err| {worst:.1e} (<= 1e-12), idempotence failures {idem_fail}, "
           f"convexity failures {hull_fail} over 100 cases")


# -- 4 -----------------------------------------------------------------------------------

def test_04_alpha_one_reduction():
    fed = build_federation(DEFAULT)
    equal = 0
    for c in fed.clients:
        x = c.split.test.features
        mixed, _ = mixed_forward(x, c.theta, c.model, c.alpha)
        equal += int(mixed.tobytes() == c.model.logits(x).tobytes())
    record(4, "alpha=1 reduction", equal == len(fed.clients),
           f"{equal}/{len(fed.clients)} clients bitwise equal at round 0")


# -- 5 -----------------------------------------------------------------------------------

def test_05_beats_standalone(default_runs):
    ours = [best(r) for r in default_runs["pfedafm"]]
    alone = [best(r) for r in default_runs["standalone"]]
    n = wins(a >= b for a, b in zip(ours, alone))
    elapsed = default_runs["elapsed_5"]
    record(5, "pfedafm >= standalone", n >= 2 and elapsed < 180.0,
           f"{n}/3 seeds (best acc {fmt(ours)} vs {fmt(alone)}), runtime {elapsed:.1f}s")


def fmt(xs):
    return "[" + ", ".join(f"{x:.4f}" for x in xs) + "]"


# -- 6 -----------------------------------------------------------------------------------

def test_06_iterative_beats_end_to_end(default_runs):
    ours = [best(r) for r in default_runs["pfedafm"]]
    e2e = [best(r) for r in default_runs["pfedafm_e2e"]]
    n = wins(a >= b for a, b in zip(ours, e2e))
    record(6, "iterative >= end-to-end", n >= 2, f"{n}/3 seeds (best acc {fmt(ours)} vs {fmt(e2e)})")


# -- 7 -----------------------------------------------------------------------------------

def test_07_mixed_model_ordering(default_runs):
    gaps = []
    for res in default_runs["pfedafm"]:
        rec = max(res.records, key=lambda r: r["mean_accuracy"])  # first best round
        gaps.append(rec["mean_accuracy"] - max(rec["small_mean_accuracy"], rec["large_mean_accuracy"]))
    n = wins(g >= -0.01 for g in gaps)
    record(7, "mixed >= max(small, large) - 1pp", n >= 2,
           f"{n}/3 seeds (mixed minus best single: {fmt(gaps)})")


# -- 8 -----------------------------------------------------------------------------------

def test_08_non_iid_monotonicity(tmp_path):
    rows = sweep(DEFAULT.replace(repeats=3), "classes_per_client", ["2", "10"], tmp_path / "sweep",
                 echo=lambda _: None)
    on_disk = read_csv(tmp_path / "sweep" / "comparison.csv")
    assert len(on_disk) == 6
    acc = {(r["value"], r["repeat"]): r["best_mean_accuracy"] for r in rows}
    k2 = [acc[(2, r)] for r in range(3)]
    k10 = [acc[(10, r)] for r in range(3)]
    n = wins(a > b for a, b in zip(k2, k10))
    record(8, "non-IID monotonicity", n >= 2, f"{n}/3 seeds (k=2 {fmt(k2)} vs k=10 {fmt(k10)})")


# -- 9 -----------------------------------------------------------------------------------

def test_09_partitioner_invariants():
    start = time.perf_counter()
    failures = 0
    cases = 0
    data = generate_synthetic(4, 2, 12, 1.0, seed=1)
    for n, k, seed in itertools.product(range(1, 9), range(1, 5), range(3)):
        parts = pathological_partition(data, n, k, seed=seed)
        allidx = np.concatenate(parts)
        failures += int(len(allidx) != len(set(allidx.tolist())))
        failures += sum(len(set(data.labels[p].tolist())) != k for p in parts)
        cases += 1
    for n, gamma, seed in itertools.product(range(1, 7), (0.05, 0.5, 5.0, 500.0), range(5)):
        parts = dirichlet_partition(data, n, gamma, seed)
        allidx = np.concatenate(parts)
        failures += int(sorted(allidx.tolist()) != list(range(len(data))))
        cases += 1
    for sizes in itertools.product(range(5, 12), repeat=2):
        labels = [0] * sizes[0] + [1] * sizes[1]
        ds = LabeledDataset(np.zeros((len(labels), 1)), labels, 2)
        s = split_train_test(ds, np.arange(len(labels)), seed=sum(sizes))
        tr, te = set(s.train_indices.tolist()), set(s.test_indices.tolist())
        failures += int(bool(tr & te) or len(tr | te) != len(labels))
        for c, m in enumerate(sizes):
            failures += int(abs(int(np.sum(s.test.labels == c)) - 0.2 * m) >= 1)
        cases += 1
    elapsed = time.perf_counter() - start
    record(9, "partitioner invariants", failures == 0 and elapsed < 5.0,
           f"{cases} instances, {failures} failures, {elapsed:.2f}s")


# -- 10 ----------------------------------------------------------------------------------

def test_10_accounting():
    cfg = DEFAULT.replace(T=1)
    rec = run_experiment(cfg).records[0]
    # hand count of the shared extractor: input -> d/2 -> d, weights plus biases
    i, h, d = cfg.input_dim, cfg.d // 2, cfg.d
    homo_params = (i * h + h) + (h * d + d)
    expected = 2 * len(rec["selected"]) * homo_params
    ours = rec["uplink_params"] + rec["downlink_params"]
    alone = run_experiment(cfg.replace(algorithm="standalone")).records[0]
    alone_total = alone["uplink_params"] + alone["downlink_params"]
    record(10, "communication accounting", ours == expected and alone_total == 0,
           f"pfedafm {ours} == {expected}, standalone {alone_total} == 0")


# -- 11 ----------------------------------------------------------------------------------

def test_11_determinism(tmp_path):
    write_jsonl(run_experiment(DEFAULT).records, tmp_path / "a.jsonl")
    write_jsonl(run_experiment(DEFAULT).records, tmp_path / "b.jsonl")
    a, b = (tmp_path / "a.jsonl").read_bytes(), (tmp_path / "b.jsonl").read_bytes()
    record(11, "determinism", a == b, f"{len(a)} bytes of JSON-lines, identical={a == b}")


# -- 12 ----------------------------------------------------------------------------------

def test_12_convergence_monitor(default_runs):
    fractions, finite = [], True
    for res in default_runs["pfedafm"]:
        down, total = windowed_descent_fraction([r["mean_train_loss"] for r in res.records], window=5)
        fractions.append(down / total)
        finite &= all(r["delta_sq"] is not None and np.isfinite(r["delta_sq"]) for r in res.records)
    ok = all(f >= 0.8 for f in fractions) and finite
    record(12, "convergence monitor", ok,
           f"non-increasing window fraction per seed {fmt(fractions)} (>= 0.80), delta^2 finite={finite}")
