"""Experiment drivers behind the command line.

Every experiment takes a parameter dict (defaults filled in, unknown keys
rejected) and a root seed, and returns tables plus named checks. Streams are
derived from ``(seed, label)`` with labels fixed per run, so results do not
depend on execution order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from msgd.models import (
    MLP,
    Dataset,
    LinearRegression,
    LogisticRegression,
    fisher,
    generate_classification_data,
    sgd_covariance,
)
from msgd.noise import Kind, SamplingSpec, empirical_moments, fisher_cov_gap
from msgd.optim import TRAJECTORY_COLUMNS, OptimizerConfig, minibatch_compensation, run_gld, run_minibatch_msgd, run_msgd
from msgd.rng import derive_stream
from msgd.sde import least_squares_problem, strong_error_curve
from msgd.stats import cis_overlap, loglog_slope, mean_ci
from msgd.theory import (
    OnlineKind,
    RegressionProblem,
    expected_excess_risk,
    run_online_batch,
    stability_limit,
    theorem1_bound,
)


class ConfigError(ValueError):
    """Invalid experiment configuration (exit status 2)."""


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    relation: str  # "<", "<=" or ">="
    passed: bool
    enforced: bool = True

    def describe(self) -> str:
        return f"{self.name} = {self.value:.6g} (required {self.relation} {self.threshold:.6g})"


@dataclass
class Table:
    columns: tuple
    rows: list


@dataclass
class ExperimentResult:
    results: Table
    tables: dict = field(default_factory=dict)  # relative path -> Table
    checks: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.enforced)


def _check(name, value, threshold, relation, enforced=True) -> Check:
    value = float(value)
    ok = {
        "<": value < threshold,
        "<=": value <= threshold,
        ">=": value >= threshold,
    }[relation]
    return Check(name, value, float(threshold), relation, bool(ok), enforced)


def _params(given: dict, defaults: dict, experiment: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown parameters for {experiment}: {sorted(unknown)}")
    return {**defaults, **given}


# ---------------------------------------------------------------- moments

MOMENTS_DEFAULTS = {
    "kinds": [k.value for k in Kind],
    "n": 10,
    "b": 3,
    "B": 6,
    "draws": 100_000,
    "mean_z": 4.0,
    "cov_tol": 0.05,
}
MOMENTS_COLUMNS = ("kind", "n", "b", "B", "draws", "max_abs_mean_dev", "max_mean_z", "frob_rel_cov_dev")


def moments(params: dict, seed: int) -> ExperimentResult:
    p = _params(params, MOMENTS_DEFAULTS, "moments")
    rows, checks, tables, info = [], [], {}, {}
    for name in p["kinds"]:
        try:
            kind = Kind(name)
            spec = SamplingSpec(n=p["n"], b=p["b"], kind=kind, B=p["B"])
            report = empirical_moments(spec, derive_stream(seed, f"moments/{kind.value}"), p["draws"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        rows.append({c: getattr(report, c) for c in MOMENTS_COLUMNS if c != "draws"} | {"draws": report.draw_count})
        tables[f"covariance/{kind.value}.csv"] = Table(
            ("i", "j", "value"),
            [{"i": i, "j": j, "value": v} for i, r in enumerate(report.empirical_cov) for j, v in enumerate(r)],
        )
        checks.append(_check(f"{kind.value}.max_mean_z", report.max_mean_z, p["mean_z"], "<="))
        checks.append(_check(f"{kind.value}.frob_rel_cov_dev", report.frob_rel_cov_dev, p["cov_tol"], "<"))
        if report.extra:
            info[kind.value] = report.extra
    return ExperimentResult(Table(MOMENTS_COLUMNS, rows), tables, checks, info)


# ------------------------------------------------------------ equivalence

EQUIVALENCE_DEFAULTS = {
    "n": 400,
    "b": 1,
    "draws": 10_000,
    "states": 5,
    "data_n": 40,
    "data_p": 3,
    "batch": 4,
    "identity_tol": 1e-10,
}
EQUIVALENCE_COLUMNS = ("quantity", "model", "state", "value")


def _toy_models(s, n, p):
    X = s.spawn("X").normal((n, p))
    y_reg = X @ np.linspace(1.0, -1.0, p) + 0.5 * s.spawn("y").normal(n)
    y_cls = (y_reg > 0).astype(int)
    return [
        ("linear", LinearRegression(l2=0.1), Dataset(X, y_reg)),
        ("logistic", LogisticRegression(), Dataset(X, y_cls)),
        ("mlp", MLP(hidden=8), Dataset(X, y_cls)),
    ]


def fisher_identity_residual(model, theta, data, b) -> float:
    """``|F - bC - g g^T|_F`` relative to ``max(1, |F|_F)``."""
    F = fisher(model, theta, data)
    C = sgd_covariance(model, theta, data, b)
    g = model.grad(theta, data)
    return float(np.linalg.norm(F - b * C - np.outer(g, g)) / max(1.0, np.linalg.norm(F)))


def equivalence(params: dict, seed: int) -> ExperimentResult:
    p = _params(params, EQUIVALENCE_DEFAULTS, "equivalence")
    rows = []
    worst = 0.0
    for name, model, data in _toy_models(derive_stream(seed, "equivalence/data"), p["data_n"], p["data_p"]):
        s = derive_stream(seed, f"equivalence/states/{name}")
        for k in range(p["states"]):
            theta = s.normal(model.n_params(data.X.shape[1]))
            r = fisher_identity_residual(model, theta, data, p["batch"])
            worst = max(worst, r)
            rows.append({"quantity": "fisher_identity_residual", "model": name, "state": k, "value": r})
    gap = fisher_cov_gap(p["n"], p["b"], derive_stream(seed, "equivalence/shared-eps"), p["draws"])
    mean_gap = float(gap.mean())
    rows.append({"quantity": "mean_fisher_cov_gap", "model": "", "state": "", "value": mean_gap})
    checks = [
        _check("fisher_identity_residual", worst, p["identity_tol"], "<="),
        _check("mean_fisher_cov_gap", mean_gap, 2 / np.sqrt(p["n"]), "<"),
    ]
    return ExperimentResult(Table(EQUIVALENCE_COLUMNS, rows), checks=checks)


# -------------------------------------------------------------- train-toy

TRAIN_TOY_DEFAULTS = {
    "centers": [[1.0, 0.0], [-1.0, 0.0]],
    "spread": 1.0,
    "n": 200,
    "n_test": 2000,
    "hidden": 16,
    "b": 5,
    "batch_factor": 10,
    "eta": 0.2,
    "steps": 2000,
    "eval_every": 100,
    "seeds": 10,
    "kinds": ["SgdWithReplacement", "GaussianCov", "GaussianFisher", "Bernoulli"],
    "compensation_scales": [0.0, 0.5, 1.0, 2.0],
    "compensation": "fisher",
    "gld_modes": ["diag"],
    "tolerance_pp": 2.0,
}
TRAIN_TOY_COLUMNS = ("method", "seed", "final_test_acc", "final_train_loss", "diverged")
SUMMARY_COLUMNS = ("method", "mean_test_acc", "ci_half_width", "seeds")


def _toy_runs(p, model, train, test, theta0, root):
    n, b = p["n"], p["b"]
    B = p["batch_factor"] * b
    common = dict(eta=p["eta"], steps=p["steps"], eval_every=p["eval_every"])
    for kind in p["kinds"]:
        spec = SamplingSpec(n=n, b=b, kind=kind, B=B if Kind(kind) is Kind.SPARSE_GAUSSIAN_FISHER else None)
        yield f"msgd-{kind}", lambda spec=spec, kind=kind: run_msgd(
            model, train, OptimizerConfig(spec=spec, **common), root.spawn(kind), theta0, test
        )
    for scale in p["compensation_scales"]:
        inner, std = minibatch_compensation(n, B, b, tune=scale, centered=p["compensation"] == "centered")
        cfg = OptimizerConfig(spec=inner, batch_size=B, noise_scale=std, **common)
        yield f"minibatch-B{B}-scale{scale:g}", lambda cfg=cfg, scale=scale: run_minibatch_msgd(
            model, train, cfg, root.spawn(f"minibatch/{scale!r}"), theta0, test
        )
    for mode in p["gld_modes"]:
        cfg = OptimizerConfig(spec=SamplingSpec(n=n, b=b), **common)
        yield f"gld-{mode}", lambda cfg=cfg, mode=mode: run_gld(
            model, train, cfg, root.spawn(f"gld/{mode}"), mode, theta0, test
        )


def train_toy(params: dict, seed: int) -> ExperimentResult:
    p = _params(params, TRAIN_TOY_DEFAULTS, "train-toy")
    if 1.0 not in p["compensation_scales"]:
        raise ConfigError("compensation_scales must include 1.0, the matched magnitude")
    if p["compensation"] not in ("fisher", "centered"):
        raise ConfigError(f"compensation must be 'fisher' or 'centered', got {p['compensation']!r}")
    if "SgdWithReplacement" not in p["kinds"]:
        raise ConfigError("kinds must include SgdWithReplacement, the reference run")
    B = p["batch_factor"] * p["b"]
    if not 1 <= p["b"] <= B <= p["n"]:
        raise ConfigError(f"need 1 <= b <= batch_factor*b <= n, got b={p['b']}, B={B}, n={p['n']}")
    rows, tables, acc = [], {}, {}
    for k in range(p["seeds"]):
        root = derive_stream(seed, f"train-toy/seed={k}")
        train, test = generate_classification_data(p["centers"], p["spread"], p["n"], root.spawn("data"), p["n_test"])
        model = MLP(hidden=p["hidden"], n_classes=len(p["centers"]))
        theta0 = model.init_params(train.X.shape[1], root.spawn("init"))
        for method, run in _toy_runs(p, model, train, test, theta0, root):
            traj = run()
            final = traj.records[-1]
            rows.append(
                {
                    "method": method,
                    "seed": k,
                    "final_test_acc": final["test_acc"],
                    "final_train_loss": final["train_loss"],
                    "diverged": traj.diverged,
                }
            )
            acc.setdefault(method, []).append(final["test_acc"])
            tables[f"trajectories/{method}-seed{k}.csv"] = Table(TRAJECTORY_COLUMNS, traj.records)

    summary = []
    means = {}
    for method, values in acc.items():
        m, h = mean_ci(np.asarray(values)) if len(values) > 1 else (values[0], float("nan"))
        means[method] = m
        summary.append({"method": method, "mean_test_acc": m, "ci_half_width": h, "seeds": len(values)})
    tables["summary.csv"] = Table(SUMMARY_COLUMNS, summary)

    tol = p["tolerance_pp"] / 100
    parity = [f"msgd-{k}" for k in p["kinds"] if Kind(k) in (Kind.SGD_WITH_REPLACEMENT, Kind.GAUSSIAN_COV, Kind.GAUSSIAN_FISHER, Kind.BERNOULLI)]
    spread = max(means[m] for m in parity) - min(means[m] for m in parity)
    sgd = means["msgd-SgdWithReplacement"]
    comp = means[f"minibatch-B{B}-scale1"]
    checks = [
        _check("parity_spread_test_acc", spread, tol, "<="),
        _check("compensated_minibatch_gap_test_acc", abs(comp - sgd), tol, "<="),
    ]
    if "msgd-Bernoulli" in means:
        for mode in p["gld_modes"]:
            gap = means["msgd-Bernoulli"] - means[f"gld-{mode}"]
            checks.append(_check(f"bernoulli_minus_gld_{mode}_test_acc", gap, 0.0, ">=", enforced=False))
    return ExperimentResult(Table(TRAIN_TOY_COLUMNS, rows), tables, checks)


# --------------------------------------------------------------- theorem1

THEOREM1_DEFAULTS = {
    "Sigma": None,  # identity of size len(theta_star)
    "theta_star": [1.0, -1.0, 0.5, 0.0],
    "theta0_offset": 0.01,
    "sigma2": 0.01,
    "b": 1,
    "eta": 0.01,
    "seeds": 50,
    "log_n": [10, 30, 100, 300, 1000, 3000, 10_000, 30_000, 100_000],
    "runs": [
        {"kind": "SmallBatchSgd", "B": 1, "n": 100_000},
        {"kind": "TheoremSubsample", "B": 16, "n": 100_000},
        {"kind": "TheoremGaussian", "B": 16, "n": 100_000},
        {"kind": "TheoremSubsample", "B": 4, "n": 10_000},
        {"kind": "TheoremSubsample", "B": 64, "n": 10_000},
    ],
    "bound_slack": 1.05,
    "rate_window": [1000, 100_000],
    "rate_target": -1.0,
    "rate_tol": 0.15,
    "overlap_n": [1000, 10_000],
}
THEOREM1_COLUMNS = ("n", "kind", "B", "b", "eta", "seed", "excess_risk")
BOUND_COLUMNS = ("n", "bound", "expected_excess_risk")


def theorem1_problem(p) -> tuple[RegressionProblem, np.ndarray]:
    theta_star = np.asarray(p["theta_star"], dtype=float)
    Sigma = np.eye(theta_star.size) if p["Sigma"] is None else np.asarray(p["Sigma"], dtype=float)
    try:
        problem = RegressionProblem(Sigma, theta_star, p["sigma2"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return problem, theta_star + p["theta0_offset"]


def _run_label(run) -> str:
    return f"{run['kind']}-B{run['B']}"


def theorem1(params: dict, seed: int) -> ExperimentResult:
    p = _params(params, THEOREM1_DEFAULTS, "theorem1")
    problem, theta0 = theorem1_problem(p)
    b, eta = p["b"], p["eta"]
    if not 0 < eta < stability_limit(problem, b):
        # raised before any simulation so the message reaches the user unchanged
        raise ConfigError(
            f"step size {eta} violates the stability condition eta < 2b/(R2+(b-1)lambda) "
            f"= {stability_limit(problem, b):.6g}"
        )
    rows, curves = [], {}
    for run in p["runs"]:
        kind = OnlineKind(run["kind"])
        B = run["B"] if kind is not OnlineKind.SMALL_BATCH_SGD else b
        log_n = [k for k in p["log_n"] if k <= run["n"]]
        label = _run_label(run)
        streams = [derive_stream(seed, f"theorem1/{label}/seed={i}") for i in range(p["seeds"])]
        out = run_online_batch(problem, B, b, eta, run["n"], kind, streams, theta0=theta0, log_n=log_n)
        for j, n in enumerate(out.log_n):
            for i in range(p["seeds"]):
                rows.append(
                    {"n": n, "kind": kind.value, "B": B, "b": b, "eta": eta, "seed": i, "excess_risk": out.excess_risk[i, j]}
                )
        curves[label] = (out.log_n, out.excess_risk)

    all_n = sorted({int(n) for ns, _ in curves.values() for n in ns})
    bound = theorem1_bound(problem, b, eta, theta0, all_n)
    exact = expected_excess_risk(problem, b, eta, theta0, all_n)
    bound_rows = [{"n": n, "bound": bv, "expected_excess_risk": ev} for n, bv, ev in zip(all_n, bound, exact)]
    bound_at = dict(zip(all_n, bound))

    checks = []
    stats = {}
    for label, (ns, risk) in curves.items():
        stats[label] = {}
        worst = -np.inf
        for j, n in enumerate(ns):
            m = risk[:, j].mean()
            se = risk[:, j].std(ddof=1) / np.sqrt(risk.shape[0])
            stats[label][int(n)] = mean_ci(risk[:, j])
            worst = max(worst, (m + 2 * se) / bound_at[int(n)])
        checks.append(_check(f"bound_ratio.{label}", worst, p["bound_slack"], "<="))

    lo, hi = p["rate_window"]
    for label, (ns, risk) in curves.items():
        sel = [(n, risk[:, j].mean()) for j, n in enumerate(ns) if lo <= n <= hi]
        if len(sel) >= 3 and max(n for n, _ in sel) >= hi:
            slope = loglog_slope(sel).slope
            checks.append(_check(f"rate_slope_error.{label}", abs(slope - p["rate_target"]), p["rate_tol"], "<="))

    overlap_labels = [l for l in curves if l.startswith("SmallBatchSgd") or l.startswith("TheoremSubsample")]
    for n in p["overlap_n"]:
        present = [l for l in overlap_labels if n in stats[l]]
        for a, c in itertools.combinations(present, 2):
            ok = cis_overlap(stats[a][n], stats[c][n])
            checks.append(_check(f"ci_overlap.n={n}.{a}.vs.{c}", float(ok), 1.0, ">="))
    gauss = [l for l in curves if l.startswith("TheoremGaussian")]
    for g in gauss:
        twin = g.replace("TheoremGaussian", "TheoremSubsample")
        if twin in curves:
            n = int(curves[g][0][-1])
            ok = cis_overlap(stats[g][n], stats[twin][n])
            checks.append(_check(f"ci_overlap.n={n}.{g}.vs.{twin}", float(ok), 1.0, ">="))

    info = {"problem": problem.to_dict(), "theta0": theta0.tolist(), "stability_limit": stability_limit(problem, b)}
    return ExperimentResult(Table(THEOREM1_COLUMNS, rows), {"bound.csv": Table(BOUND_COLUMNS, bound_rows)}, checks, info)


# -------------------------------------------------------------- sde-order

SDE_DEFAULTS = {
    "N": 10,
    "d": 2,
    "l2": 0.1,
    "label_noise": 0.3,
    "b": 10,
    "offset": 0.5,
    "etas": [0.04, 0.02, 0.01, 0.005],
    "m": 64,
    "T": 1.0,
    "trials": 200,
    "slope_target": 2.0,
    "slope_tol": 0.3,
}
SDE_COLUMNS = ("eta", "trial", "max_sq_error")
SDE_SUMMARY_COLUMNS = ("eta", "mean_max_sq_error", "ci_half_width", "trials", "slope", "slope_stderr")


def sde_order(params: dict, seed: int) -> ExperimentResult:
    p = _params(params, SDE_DEFAULTS, "sde-order")
    model, data, opt = least_squares_problem(derive_stream(seed, "sde/problem"), p["N"], p["d"], p["l2"], p["label_noise"])
    direction = np.where(np.arange(p["d"]) % 2 == 0, 1.0, -1.0)
    theta0 = opt + p["offset"] * direction
    try:
        curve = strong_error_curve(
            model, data, theta0, p["etas"], p["m"], p["T"], p["b"], p["trials"], derive_stream(seed, "sde/paths")
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    slope = curve.fit.slope if curve.fit else float("nan")
    stderr = curve.fit.slope_stderr if curve.fit else float("nan")
    summary = [
        {"eta": e, "mean_max_sq_error": m, "ci_half_width": h, "trials": curve.trials, "slope": slope, "slope_stderr": stderr}
        for e, m, h in zip(curve.etas, curve.mean_max_sq_error, curve.ci_half_width)
    ]
    ratios = curve.mean_max_sq_error[:-1] / curve.mean_max_sq_error[1:]
    checks = [_check("slope_error", abs(slope - p["slope_target"]), p["slope_tol"], "<=")]
    info = {"theta0": theta0.tolist(), "optimum": opt.tolist(), "halving_ratios": ratios.tolist()}
    return ExperimentResult(Table(SDE_COLUMNS, curve.rows), {"summary.csv": Table(SDE_SUMMARY_COLUMNS, summary)}, checks, info)


EXPERIMENTS = {
    "moments": (moments, MOMENTS_DEFAULTS, "empirical mean/covariance of every sampling-noise kind"),
    "equivalence": (equivalence, EQUIVALENCE_DEFAULTS, "Fisher/SGD-covariance identity and shared-noise gap"),
    "train-toy": (train_toy, TRAIN_TOY_DEFAULTS, "blob classification with an MLP under each noise"),
    "theorem1": (theorem1, THEOREM1_DEFAULTS, "averaged online least squares against the excess-risk bound"),
    "sde-order": (sde_order, SDE_DEFAULTS, "strong error of Gaussian MSGD against its diffusion"),
}
