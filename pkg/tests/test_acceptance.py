"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``PASS``/``FAIL`` line (also repeated in the terminal
summary). Experiments run with their shipped defaults, which are the
acceptance settings.
"""

import itertools
import json
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from msgd.cli import main
from msgd.experiments import equivalence, moments, sde_order, theorem1, train_toy
from msgd.models import MLP, Dataset, LinearRegression, LogisticRegression, gradient_matrix, weighted_loss_grad
from msgd.noise import Kind, SamplingSpec, draw_sampling_vector, theoretical_sampling_cov
from msgd.rng import derive_stream

SEED = 1


def verdict(label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def checks_by_prefix(result, prefix):
    return [c for c in result.checks if c.name.startswith(prefix)]


def test_1_closed_form_covariances_by_enumeration():
    start = time.perf_counter()
    worst = 0.0
    for n in range(1, 7):
        for b in range(1, n + 1):
            wr = np.array([np.bincount(p, minlength=n) / b for p in itertools.product(range(n), repeat=b)])
            wo = np.zeros((0, n))
            for subset in itertools.combinations(range(n), b):
                w = np.zeros(n)
                w[list(subset)] = 1 / b
                wo = np.vstack([wo, w])
            for weights, kind in ((wr, Kind.SGD_WITH_REPLACEMENT), (wo, Kind.SGD_WITHOUT_REPLACEMENT)):
                v = weights - weights.mean(axis=0)
                exact = v.T @ v / len(weights)
                worst = max(worst, np.abs(exact - theoretical_sampling_cov(SamplingSpec(n, b, kind))).max())
    elapsed = time.perf_counter() - start
    verdict("1 enumeration", worst <= 1e-12 and elapsed < 1.0, f"max abs error {worst:.2e} (<= 1e-12), {elapsed:.2f}s (< 1s)")


def test_2_moment_suite_all_kinds():
    start = time.perf_counter()
    result = moments({}, SEED)
    elapsed = time.perf_counter() - start
    kinds = {row["kind"] for row in result.results.rows}
    z = max(row["max_mean_z"] for row in result.results.rows)
    frob = max(row["frob_rel_cov_dev"] for row in result.results.rows)
    ok = len(kinds) == 8 and z <= 4 and frob < 0.05 and elapsed < 30
    verdict("2 moments", ok, f"{len(kinds)} kinds, max mean z {z:.2f} (<= 4), max cov dev {frob:.4f} (< 0.05), {elapsed:.1f}s (< 30s)")


def test_3_commutation_identity():
    start = time.perf_counter()
    s = derive_stream(SEED, "acceptance/commutation")
    X = s.normal((30, 3))
    y = X @ np.array([1.0, -1.0, 0.5]) + 0.3 * s.normal(30)
    cases = [
        (LinearRegression(l2=0.1), Dataset(X, y)),
        (LogisticRegression(), Dataset(X, (y > 0).astype(int))),
        (MLP(hidden=6), Dataset(X, (y > 0).astype(int))),
    ]
    spec = SamplingSpec(30, 4, Kind.GAUSSIAN_COV)
    worst = 0.0
    for model, data in cases:
        for _ in range(5):
            theta = s.normal(model.n_params(3))
            w = draw_sampling_vector(spec, s)
            direct = weighted_loss_grad(model, theta, data, w)
            via_matrix = gradient_matrix(model, theta, data) @ w
            worst = max(worst, np.linalg.norm(direct - via_matrix) / max(np.linalg.norm(via_matrix), 1e-300))
    elapsed = time.perf_counter() - start
    verdict("3 commutation", worst <= 1e-10 and elapsed < 5, f"max rel error {worst:.2e} (<= 1e-10), {elapsed:.2f}s (< 5s)")


def test_4_fisher_covariance_identity_and_shared_noise_gap():
    result = equivalence({}, SEED)
    resid = checks_by_prefix(result, "fisher_identity_residual")[0]
    gap = checks_by_prefix(result, "mean_fisher_cov_gap")[0]
    verdict(
        "4 Fisher/Cov",
        resid.passed and gap.passed,
        f"identity residual {resid.value:.1e} (<= 1e-10), mean gap {gap.value:.4f} (< {gap.threshold:.4f}) at n=400",
    )


@pytest.fixture(scope="module")
def theorem1_result():
    start = time.perf_counter()
    result = theorem1({}, SEED)
    return result, time.perf_counter() - start


def test_5a_excess_risk_under_bound(theorem1_result):
    result, _ = theorem1_result
    ratios = checks_by_prefix(result, "bound_ratio.")
    worst = max(ratios, key=lambda c: c.value)
    detail = ", ".join(f"{c.name.split('.', 1)[1]} {c.value:.3f}" for c in ratios)
    verdict("5a bound", all(c.passed for c in ratios), f"max (mean+2SE)/bound {worst.value:.3f} (<= 1.05); {detail}")


def test_5b_rate_slope(theorem1_result):
    result, _ = theorem1_result
    slopes = checks_by_prefix(result, "rate_slope_error.")
    worst = max(c.value for c in slopes)
    verdict("5b rate", bool(slopes) and all(c.passed for c in slopes), f"max |slope + 1| {worst:.3f} (<= 0.15) over {len(slopes)} curves")


def test_5c_batch_size_curves_overlap(theorem1_result):
    result, elapsed = theorem1_result
    overlaps = checks_by_prefix(result, "ci_overlap.")
    failed = [c.name for c in overlaps if not c.passed]
    ok = bool(overlaps) and not failed and elapsed < 300
    verdict("5c overlap", ok, f"{len(overlaps) - len(failed)}/{len(overlaps)} CI pairs overlap, {elapsed:.0f}s (< 300s) {failed or ''}")


def test_6_sde_strong_order():
    start = time.perf_counter()
    result = sde_order({}, SEED)
    elapsed = time.perf_counter() - start
    slope = result.tables["summary.csv"].rows[0]["slope"]
    ok = abs(slope - 2) <= 0.3 and elapsed < 300
    verdict("6 SDE order", ok, f"slope {slope:.3f} (2 +- 0.3), {elapsed:.0f}s (< 300s)")


def test_7_toy_generalization_parity():
    start = time.perf_counter()
    result = train_toy({}, SEED)
    elapsed = time.perf_counter() - start
    spread = checks_by_prefix(result, "parity_spread")[0]
    gap = checks_by_prefix(result, "compensated_minibatch_gap")[0]
    ok = spread.passed and gap.passed and elapsed < 600
    verdict(
        "7 toy parity",
        ok,
        f"accuracy spread {100 * spread.value:.2f}pp, compensated gap {100 * gap.value:.2f}pp (<= 2pp), {elapsed:.0f}s (< 600s)",
    )


SMALL_CONFIGS = [
    {"experiment": "moments", "draws": 2000},
    {"experiment": "equivalence", "draws": 500},
    {"experiment": "train-toy", "seeds": 2, "steps": 40, "eval_every": 20, "n": 40, "n_test": 50},
    {"experiment": "theorem1", "seeds": 3, "log_n": [10, 100, 1000], "runs": [{"kind": "TheoremGaussian", "B": 4, "n": 1000}]},
    {"experiment": "sde-order", "trials": 5, "m": 8, "etas": [0.1, 0.05, 0.025]},
]


def test_8_reruns_are_byte_identical(tmp_path):
    mismatched = []
    files = 0
    for config in SMALL_CONFIGS:
        path = tmp_path / f"{config['experiment']}.json"
        path.write_text(json.dumps({**config, "seed": 7}))
        runs = [tmp_path / config["experiment"] / r for r in ("a", "b")]
        for out in runs:
            main(["run", str(path), "--out", str(out)])
        for csv in sorted(runs[0].rglob("*.csv")):
            files += 1
            if csv.read_bytes() != (runs[1] / csv.relative_to(runs[0])).read_bytes():
                mismatched.append(str(csv.relative_to(tmp_path)))
    verdict("8 determinism", files > 0 and not mismatched, f"{files} CSV files compared across 5 experiments, mismatches {mismatched or 'none'}")
