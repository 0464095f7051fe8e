"""Acceptance criteria, one test each, tolerances as pinned below.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
"""

import gc
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracle
from conftest import MICRO_ROWS, random_rows
from efc.classifier import classify_symbols, fit_multiclass
from efc.evaluation import cross_validate, unknown_attack_experiment
from efc.model_io import load, save
from efc.potts import fit_class, flat_index, site_freq
from efc.schema import builtin_schema, concat_tables, read_csv
from efc.synthesis import generate, separable_spec, with_class

ORACLE_RTOL = 1e-8
ORACLE_INSTANCES = 50
ORACLE_SECONDS = 10.0
MICRO_TOL = 1e-4
COVERAGE_CLASSES = 20
SEPARATION_MIN_F1 = 0.95
SEPARATION_SECONDS = 120.0
UNKNOWN_MIN_FRACTION = 0.90
SCALING_MAX_RATIO = 2.5
PER_FLOW_TOLERANCE = 0.20
ROUND_TRIP_FLOWS = 10_000
CIDDS_TARGET, CIDDS_TOL = 0.605, 0.10


def close(actual, expected, scale):
    """Agreement to ORACLE_RTOL relative to the magnitude of the compared quantity."""
    return abs(actual - expected) <= ORACLE_RTOL * max(scale, 1e-300)


def test_1_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    failures = []
    start = time.perf_counter()
    for k in range(ORACLE_INSTANCES):
        m, Q = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        n = int(rng.integers(10, 201))
        alpha = float(rng.uniform(0.1, 0.9))
        X = random_rows(rng, n, m, Q)
        model = fit_class(X, Q, alpha)
        e, h, _ = oracle.fit(X.tolist(), Q, alpha)
        e_scale = max(abs(v) for v in e.values())
        h_scale = max(abs(v) for v in h.values())
        for (i, a, j, b), v in e.items():
            got = model.couplings[flat_index(i, a, Q), flat_index(j, b, Q)]
            worst = max(worst, abs(got - v) / e_scale)
            if not close(got, v, e_scale):
                failures.append((k, "e", i, a, j, b))
        for (i, a), v in h.items():
            got = model.fields[i, a - 1]
            worst = max(worst, abs(got - v) / max(h_scale, 1e-300))
            if not close(got, v, h_scale):
                failures.append((k, "h", i, a))
        energies = model.energies(X)
        ref = [oracle.energy(row, e, h, Q) for row in X.tolist()]
        H_scale = max(abs(v) for v in ref) or 1.0
        for got, v in zip(energies, ref):
            worst = max(worst, abs(got - v) / H_scale)
            if not close(got, v, H_scale):
                failures.append((k, "H"))
        if abs(model.threshold - oracle.nearest_rank_95(ref)) > ORACLE_RTOL * H_scale:
            failures.append((k, "threshold"))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < ORACLE_SECONDS
    criterion(1, ok, f"{ORACLE_INSTANCES} instances, worst relative deviation {worst:.2e} "
                     f"(limit {ORACLE_RTOL:g}), {elapsed:.2f}s (limit {ORACLE_SECONDS:g}s)")
    assert not failures, failures[:5]
    assert elapsed < ORACLE_SECONDS


def test_2_micro_instance(criterion):
    model = fit_class(MICRO_ROWS, 2, 0.5)
    got = {
        "f_1(1)": (site_freq(MICRO_ROWS, 2, 0.5)[0, 0], 0.625),
        "e_12(1,1)": (model.couplings[0, 1], -0.285714),
        "h_1(1)": (model.fields[0, 0], 0.689397),
        "H(1,1)": (model.energy([1, 1]), -1.093080),
    }
    devs = {k: abs(a - b) for k, (a, b) in got.items()}
    ok = all(d <= MICRO_TOL for d in devs.values())
    criterion(2, ok, ", ".join(f"{k}={a:.6f}" for k, (a, _) in got.items())
              + f" (max deviation {max(devs.values()):.1e}, limit {MICRO_TOL:g})")
    assert ok


def test_3_threshold_coverage(criterion):
    rng = np.random.default_rng(7)
    worst_margin = -np.inf
    bad = []
    for k in range(COVERAGE_CLASSES):
        n = int(rng.integers(100, 5001))
        m, Q = int(rng.integers(2, 9)), int(rng.integers(2, 11))
        X = random_rows(rng, n, m, Q)
        model = fit_class(X, Q, 0.5)
        above = float((model.energies(X) > model.threshold).mean())
        limit = 0.05 + 1 / n
        worst_margin = max(worst_margin, above - limit)
        if above > limit:
            bad.append((k, n, above, limit))
    ok = not bad
    criterion(3, ok, f"{COVERAGE_CLASSES} classes, largest (fraction above - limit) = "
                     f"{worst_margin:+.4f} (must be <= 0)")
    assert ok, bad


def test_4_all_reference_energy_zero(criterion):
    rng = np.random.default_rng(11)
    energies = []
    for _ in range(10):
        m, Q = int(rng.integers(2, 9)), int(rng.integers(2, 31))
        model = fit_class(random_rows(rng, 300, m, Q), Q, 0.5)
        energies.append(model.energy([Q] * m))
    spec = separable_spec(n_classes=3, m=10, Q=10, rows=500, seed=1)
    multi = fit_multiclass(generate(spec), 0.5)
    energies += classify_symbols([[10] * 10], multi).energies[0].tolist()
    ok = all(e == 0.0 for e in energies)
    criterion(4, ok, f"{len(energies)} class models, all-Q energies exactly 0: {ok}")
    assert ok


def test_5_synthetic_separation(criterion):
    spec = separable_spec(n_classes=3, m=10, Q=10, rows=5000, seed=0)
    table = generate(spec)
    start = time.perf_counter()
    report = cross_validate(table, k=5, alpha=0.5, seed=0)
    elapsed = time.perf_counter() - start
    ok = report.macro_f1 >= SEPARATION_MIN_F1 and elapsed < SEPARATION_SECONDS
    criterion(5, ok, f"macro F1 {report.macro_f1:.4f} +/- {float(report.ci95('macro_f1')):.4f} "
                     f"(min {SEPARATION_MIN_F1}), {elapsed:.2f}s (limit {SEPARATION_SECONDS:g}s)")
    assert report.macro_f1 >= SEPARATION_MIN_F1
    assert elapsed < SEPARATION_SECONDS


def test_6_unknown_attack_detection(criterion):
    disjoint = generate(separable_spec(n_classes=4, m=10, Q=10, rows=5000, seed=0,
                                       labels=["benign", "dos", "scan", "unknown"]))
    a = unknown_attack_experiment(disjoint, "unknown", "benign", k=5, seed=0).fractions

    base = separable_spec(n_classes=3, m=10, Q=10, rows=5000, seed=0,
                          labels=["benign", "dos", "scan"])
    lookalike = generate(with_class(base, "unknown", base.classes[0].distributions))
    b = unknown_attack_experiment(lookalike, "unknown", "benign", k=5, seed=0).fractions

    ok_a = a["suspicious"] >= UNKNOWN_MIN_FRACTION
    ok_b = b["suspicious"] + b["benign"] >= UNKNOWN_MIN_FRACTION
    criterion(6, ok_a and ok_b,
              f"disjoint withheld class suspicious {a['suspicious']:.4f}; benign-distributed "
              f"withheld class suspicious+benign {b['suspicious'] + b['benign']:.4f} "
              f"(benign {b['benign']:.4f}); both must be >= {UNKNOWN_MIN_FRACTION}")
    assert ok_a and ok_b


def _best_times(fns, repeats=7):
    """Best wall time of each callable, runs interleaved so load drift hits all equally."""
    for fn in fns:
        fn()  # warm-up
    best = [np.inf] * len(fns)
    gc.collect()
    gc.disable()
    try:
        for _ in range(repeats):
            for k, fn in enumerate(fns):
                t = time.perf_counter()
                fn()
                best[k] = min(best[k], time.perf_counter() - t)
    finally:
        gc.enable()
    return best


def test_7_linear_scaling(criterion):
    m, Q = 8, 30
    rng = np.random.default_rng(3)
    X = random_rows(rng, 200_000, m, Q)
    small, large = X[:100_000], X
    t_small, t_large = _best_times([lambda: fit_class(small, Q, 0.5),
                                    lambda: fit_class(large, Q, 0.5)])
    train_ratio = t_large / t_small

    probe = random_rows(rng, 100_000, m, Q)
    model_small, model_large = fit_class(small, Q, 0.5), fit_class(large, Q, 0.5)
    c_small, c_large = (t / len(probe) for t in
                        _best_times([lambda: model_small.energies(probe),
                                     lambda: model_large.energies(probe)]))
    per_flow_ratio = c_large / c_small

    ok = train_ratio < SCALING_MAX_RATIO and abs(per_flow_ratio - 1) <= PER_FLOW_TOLERANCE
    criterion(7, ok, f"training {t_small:.3f}s @1e5 vs {t_large:.3f}s @2e5, ratio "
                     f"{train_ratio:.2f} (limit {SCALING_MAX_RATIO}); per-flow classification "
                     f"{c_small * 1e9:.0f} ns vs {c_large * 1e9:.0f} ns, ratio "
                     f"{per_flow_ratio:.3f} (within +/-{PER_FLOW_TOLERANCE:.0%})")
    assert train_ratio < SCALING_MAX_RATIO
    assert abs(per_flow_ratio - 1) <= PER_FLOW_TOLERANCE


def test_8_serialization_round_trip(criterion, tmp_path):
    spec = separable_spec(n_classes=3, m=10, Q=10, rows=2000, seed=4)
    model = fit_multiclass(generate(spec), 0.5)
    save(model, tmp_path / "model.efc")
    back = load(tmp_path / "model.efc")
    flows = np.random.default_rng(8).integers(1, 11, size=(ROUND_TRIP_FLOWS, 10))
    a, b = classify_symbols(flows, model), classify_symbols(flows, back)
    same_energy = a.energies.tobytes() == b.energies.tobytes()
    same_verdict = a.verdicts.tolist() == b.verdicts.tolist()
    ok = same_energy and same_verdict
    criterion(8, ok, f"{ROUND_TRIP_FLOWS} flows: energies bit-identical {same_energy}, "
                     f"verdicts identical {same_verdict}")
    assert ok


CIDDS_FILES = [f"CIDDS-001-internal-week{w}.csv" for w in (1, 2, 3, 4)]


@pytest.mark.slow
def test_9_cidds001_optional(criterion):
    root = os.environ.get("EFC_CIDDS001_DIR")
    paths = [Path(root) / f for f in CIDDS_FILES] if root else []
    if not paths or not all(p.is_file() for p in paths):
        line = ("dataset not available; set EFC_CIDDS001_DIR to the directory holding "
                + ", ".join(CIDDS_FILES))
        print(f"[criterion 9] SKIP: {line}")
        pytest.skip(line)
    schema = builtin_schema("cidds001")
    table = concat_tables([read_csv(p, schema) for p in paths])
    report = cross_validate(table, k=5, Q=30, alpha=0.5, cap=6000, seed=0)
    deviation = report.macro_f1 - CIDDS_TARGET
    within = abs(deviation) <= CIDDS_TOL
    # a deviation is reported, not treated as a hard failure
    criterion(9, within, f"macro F1 {report.macro_f1:.3f} vs {CIDDS_TARGET} "
                         f"(deviation {deviation:+.3f}, tolerance {CIDDS_TOL})")
