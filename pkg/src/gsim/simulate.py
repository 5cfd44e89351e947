"""Seeded data generators and Monte Carlo study drivers.

Generators reproduce four synthetic designs: a gaussian response with a
sinusoidal mean on the index, and three binary designs (complementary
log-log, unimodal, monotonic success curves). Replicates draw from
independent RNG substreams keyed by (master seed, replicate index,
stream role), so studies are reproducible for any worker count or
execution order.

Study drivers estimate Type-1 error rates of the PLRT / F-adjusted PLRT
/ Wald tests over nested "drop the last k coefficients" hypotheses, and
the accuracy of equivalent and Wald standard errors against simulation
truth. Replicates with failed fits are excluded and counted.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import beta as beta_dist

from .exceptions import GSIMError, StudyError, UsageError
from .families import BINOMIAL, GAUSSIAN
from .fitting import Dataset, FitConfig, fit_gsim
from .inference import (
    HypothesisConstraint,
    equivalent_se,
    plrt,
    plrt_f_adjusted,
    wald_covariance,
    wald_test,
)

GAUSS_SIN = "gauss_sin"
BINARY_CLOGLOG = "binary_cloglog"
BINARY_UNIMODAL = "binary_unimodal"
BINARY_MONOTONIC = "binary_monotonic"

DESIGNS = (GAUSS_SIN, BINARY_CLOGLOG, BINARY_UNIMODAL, BINARY_MONOTONIC)

METHOD_PLRT = "plrt"
METHOD_PLRT_F = "plrt_f"
METHOD_WALD = "wald"

ALL_METHODS = (METHOD_PLRT, METHOD_PLRT_F, METHOD_WALD)

# Stream roles inside one replicate.
_ROLE_COVARIATES = 0
_ROLE_NOISE = 1

# Studies abort when more than this fraction of replicates fail to fit.
_MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class SimSetting:
    """One synthetic-design configuration."""

    design: str
    n: int
    d: int
    beta_true: np.ndarray
    sigma: float = 0.2
    a: float = math.pi / 2
    seed: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise UsageError(f"unknown design {self.design!r}")
        bt = np.asarray(self.beta_true, dtype=float)
        if bt.shape != (self.d,):
            raise UsageError("beta_true must have length d")
        if abs(float(bt @ bt) - 1.0) > 1e-8:
            raise UsageError("beta_true must have unit norm")
        object.__setattr__(self, "beta_true", bt)


def make_setting(design: str, n: int | None = None, seed: int = 0, **kwargs) -> SimSetting:
    """Build a :class:`SimSetting` with the standard defaults per design.

    The gaussian sinusoidal design uses d = 10 with true coefficients
    (2, 1, 0, ..., 0)/sqrt(5); the binary designs use d = 4 with
    (2, 1, 0, 0)/sqrt(5).
    """
    if design == GAUSS_SIN:
        d = kwargs.pop("d", 10)
        n = 100 if n is None else n
    elif design in DESIGNS:
        d = kwargs.pop("d", 4)
        n = 350 if n is None else n
    else:
        raise UsageError(f"unknown design {design!r}")
    beta = kwargs.pop("beta_true", None)
    if beta is None:
        beta = np.zeros(d)
        beta[0], beta[1] = 2.0, 1.0
        beta /= np.linalg.norm(beta)
    return SimSetting(design=design, n=n, d=d, beta_true=beta, seed=seed, **kwargs)


def _stream(setting: SimSetting, replicate: int, role: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(setting.seed), int(replicate), int(role)])
    )


def gen_gaussian_sinusoidal(setting: SimSetting, replicate: int = 0) -> Dataset:
    """y = sin(a * x'beta) + sigma * eps with x entries iid N(2, 1)."""
    if setting.design != GAUSS_SIN:
        raise UsageError("setting is not a gaussian sinusoidal design")
    rng_x = _stream(setting, replicate, _ROLE_COVARIATES)
    rng_e = _stream(setting, replicate, _ROLE_NOISE)
    X = 2.0 + rng_x.standard_normal((setting.n, setting.d))
    z = X @ setting.beta_true
    y = np.sin(setting.a * z) + setting.sigma * rng_e.standard_normal(setting.n)
    return Dataset(X=X, y=y, family=GAUSSIAN)


def binary_success_probability(design: str, z) -> np.ndarray:
    """Success probability of the binary designs at index value(s) z."""
    z = np.asarray(z, dtype=float)
    if design == BINARY_CLOGLOG:
        return 1.0 - np.exp(-np.exp(z))
    if design == BINARY_UNIMODAL:
        return expit(-0.05 * (0.5 - 4.0 * z) ** 2 + 0.8)
    if design == BINARY_MONOTONIC:
        return expit(np.exp(5.0 * z - 2.0) / (1.0 + np.exp(5.0 * z - 3.0)) - 1.5)
    raise UsageError(f"not a binary design: {design!r}")


def gen_binary(setting: SimSetting, replicate: int = 0) -> Dataset:
    """Bernoulli responses with x entries iid Uniform(-2, 2)."""
    if setting.design not in (BINARY_CLOGLOG, BINARY_UNIMODAL, BINARY_MONOTONIC):
        raise UsageError("setting is not a binary design")
    rng_x = _stream(setting, replicate, _ROLE_COVARIATES)
    rng_e = _stream(setting, replicate, _ROLE_NOISE)
    X = rng_x.uniform(-2.0, 2.0, size=(setting.n, setting.d))
    p = binary_success_probability(setting.design, X @ setting.beta_true)
    y = (rng_e.random(setting.n) < p).astype(float)
    return Dataset(X=X, y=y, family=BINOMIAL)


def generate(setting: SimSetting, replicate: int = 0) -> Dataset:
    if setting.design == GAUSS_SIN:
        return gen_gaussian_sinusoidal(setting, replicate)
    return gen_binary(setting, replicate)


# ---------------------------------------------------------------------------
# Study reports
# ---------------------------------------------------------------------------


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial confidence interval for a rejection count."""
    if n == 0:
        return 0.0, 1.0
    alpha = 1.0 - level
    lo = 0.0 if k == 0 else float(beta_dist.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


@dataclass(frozen=True)
class RateCell:
    drop: str
    level: float
    method: str
    n_reject: int
    n_used: int
    rate: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class SERow:
    coefficient: int
    sim_sd: float
    mean_wald_se: float
    mean_eq_se: float
    n_used: int


@dataclass(eq=False)
class StudyReport:
    """Aggregated Monte Carlo results for one setting.

    ``wall_clock_seconds`` is runtime bookkeeping and is deliberately
    left out of the serialized payload so that reports are byte-identical
    across worker counts.
    """

    kind: str
    design: str
    n: int
    d: int
    seed: int
    n_reps: int
    rejection_rule: str = "p < alpha"
    cells: tuple = ()
    se_rows: tuple = ()
    n_failures: int = 0
    failed_replicates: tuple = ()
    wall_clock_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        payload = {
            "schema": "gsim-study-report/v1",
            "kind": self.kind,
            "design": self.design,
            "n": self.n,
            "d": self.d,
            "seed": self.seed,
            "n_reps": self.n_reps,
            "rejection_rule": self.rejection_rule,
            "n_failures": self.n_failures,
            "failed_replicates": list(self.failed_replicates),
            "cells": [
                {
                    "drop": c.drop,
                    "level": c.level,
                    "method": c.method,
                    "n_reject": c.n_reject,
                    "n_used": c.n_used,
                    "rate": c.rate,
                    "ci_low": c.ci_low,
                    "ci_high": c.ci_high,
                }
                for c in self.cells
            ],
            "se": [
                {
                    "coefficient": r.coefficient,
                    "sim_sd": r.sim_sd,
                    "mean_wald_se": r.mean_wald_se,
                    "mean_eq_se": r.mean_eq_se,
                    "n_used": r.n_used,
                }
                for r in self.se_rows
            ],
        }
        payload.update(self.extra)
        return payload

    def to_csv_rows(self) -> list[list]:
        if self.kind == "type1":
            rows = [["drop", "level", "method", "n_reject", "n_used", "rate", "ci_low", "ci_high"]]
            for c in self.cells:
                rows.append(
                    [c.drop, c.level, c.method, c.n_reject, c.n_used, c.rate, c.ci_low, c.ci_high]
                )
        else:
            rows = [["coefficient", "sim_sd", "mean_wald_se", "mean_eq_se", "n_used"]]
            for r in self.se_rows:
                rows.append([r.coefficient, r.sim_sd, r.mean_wald_se, r.mean_eq_se, r.n_used])
        return rows


# ---------------------------------------------------------------------------
# Replicate workers
# ---------------------------------------------------------------------------


def _normalize_drop_specs(setting: SimSetting, drop_specs) -> list[tuple[str, tuple[int, ...]]]:
    """Map drop counts (tail convention) or explicit index tuples to labels.

    An integer k means "test that the last k coefficients are zero";
    an iterable of 0-based indices names the tested coefficients directly.
    """
    out = []
    for spec in drop_specs:
        if isinstance(spec, (int, np.integer)):
            k = int(spec)
            if not 1 <= k < setting.d:
                raise UsageError(f"drop count {k} out of range")
            idx = tuple(range(setting.d - k, setting.d))
            label = f"drop{k}"
        else:
            idx = tuple(sorted(int(j) for j in spec))
            if any(j < 0 or j >= setting.d for j in idx):
                raise UsageError("drop indices out of range")
            label = "drop_" + ",".join(str(j) for j in idx)
        if any(setting.beta_true[list(idx)] != 0.0):
            raise UsageError("drop set includes a truly nonzero coefficient")
        out.append((label, idx))
    return out


def _fit_alt_and_nulls(data: Dataset, config: FitConfig, drop_specs):
    """Fit the alternative and every null, repairing dominance if needed.

    Nulls are fitted largest-drop-set last so each can warm-start from the
    previous; if any null exceeds the alternative, the alternative is
    refit once with the offending null solution as an extra start.
    """
    alt = fit_gsim(data, config)
    nulls = {}
    order = sorted(drop_specs, key=lambda item: len(item[1]))
    prev_beta = None
    for label, idx in order:
        inits = [alt.beta] if prev_beta is None else [alt.beta, prev_beta]
        nulls[label] = fit_gsim(data, config, drop_set=idx, extra_inits=inits)
        prev_beta = nulls[label].beta
    best_null = max(nulls.values(), key=lambda f: f.loglik, default=None)
    if best_null is not None and best_null.loglik > alt.loglik:
        alt = fit_gsim(data, config, extra_inits=[best_null.beta, alt.beta])
    return alt, nulls


def _type1_replicate(args):
    setting, config, rep, drop_specs, methods = args
    data = generate(setting, rep)
    try:
        alt, nulls = _fit_alt_and_nulls(data, config, drop_specs)
        cov = wald_covariance(data, alt) if METHOD_WALD in methods else None
        pvals = {}
        for label, idx in drop_specs:
            r = len(idx)
            if METHOD_PLRT in methods:
                pvals[(label, METHOD_PLRT)] = plrt(nulls[label], alt, r).p_value
            if METHOD_PLRT_F in methods:
                pvals[(label, METHOD_PLRT_F)] = plrt_f_adjusted(
                    nulls[label], alt, r, data.n
                ).p_value
            if METHOD_WALD in methods:
                M = HypothesisConstraint.drop(idx, setting.d)
                pvals[(label, METHOD_WALD)] = wald_test(alt, cov, M).p_value
        return rep, pvals, None
    except GSIMError as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"


def _se_replicate(args):
    setting, config, rep = args
    data = generate(setting, rep)
    try:
        alt = fit_gsim(data, config)
        from .inference import wald_se

        wse = wald_se(data, alt)
        out = {}
        for j in (0, 1):
            se_eq = equivalent_se(data, config, alt, j)
            if not np.isfinite(se_eq):
                raise StudyError(f"equivalent SE for coefficient {j} is not finite")
            out[j] = (float(alt.beta[j]), float(wse[j]), float(se_eq))
        return rep, out, None
    except GSIMError as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"


def _resolve_workers(n_workers: int | None) -> int:
    if n_workers is None:
        env = os.environ.get("GSIM_THREADS", "")
        n_workers = int(env) if env.strip() else (os.cpu_count() or 1)
    return max(1, int(n_workers))


def _run_tasks(worker, tasks, n_workers: int):
    if n_workers == 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(tasks))) as pool:
        chunk = max(1, len(tasks) // (4 * n_workers))
        return list(pool.map(worker, tasks, chunksize=chunk))


# ---------------------------------------------------------------------------
# Study drivers
# ---------------------------------------------------------------------------


def type1_error_study(
    setting: SimSetting,
    n_reps: int,
    drop_sets,
    levels=(0.01, 0.05, 0.10),
    methods=ALL_METHODS,
    config: FitConfig | None = None,
    n_workers: int | None = None,
) -> StudyReport:
    """Estimate Type-1 error rates over null-true drop hypotheses.

    Each cell reports the fraction of replicates with p < alpha together
    with an exact binomial 95% confidence interval. Replicates whose fits
    fail are excluded; more than 5% failures aborts the study.
    """
    config = config or FitConfig()
    methods = tuple(m for m in ALL_METHODS if m in set(methods))
    drop_specs = _normalize_drop_specs(setting, drop_sets)
    t0 = time.perf_counter()
    tasks = [(setting, config, rep, drop_specs, methods) for rep in range(n_reps)]
    results = _run_tasks(_type1_replicate, tasks, _resolve_workers(n_workers))
    results.sort(key=lambda r: r[0])

    failures = [(rep, msg) for rep, pv, msg in results if pv is None]
    if n_reps > 0 and len(failures) > _MAX_FAILURE_FRACTION * n_reps:
        raise StudyError(
            f"{len(failures)} of {n_reps} replicates failed: {failures[:3]}"
        )
    usable = [(rep, pv) for rep, pv, msg in results if pv is not None]
    cells = []
    for label, _idx in drop_specs:
        for level in levels:
            for method in methods:
                ps = [pv[(label, method)] for _, pv in usable]
                k = int(sum(p < level for p in ps))
                n_used = len(ps)
                lo, hi = clopper_pearson(k, n_used)
                cells.append(
                    RateCell(
                        drop=label,
                        level=float(level),
                        method=method,
                        n_reject=k,
                        n_used=n_used,
                        rate=k / n_used if n_used else 0.0,
                        ci_low=lo,
                        ci_high=hi,
                    )
                )
    return StudyReport(
        kind="type1",
        design=setting.design,
        n=setting.n,
        d=setting.d,
        seed=setting.seed,
        n_reps=n_reps,
        cells=tuple(cells),
        n_failures=len(failures),
        failed_replicates=tuple(rep for rep, _ in failures),
        wall_clock_seconds=time.perf_counter() - t0,
    )


def se_study(
    setting: SimSetting,
    n_reps: int,
    config: FitConfig | None = None,
    n_workers: int | None = None,
) -> StudyReport:
    """Compare simulation-truth coefficient spread with reported SEs.

    Reports, for the two nonzero coefficients, the empirical standard
    deviation of the estimates across replicates, the mean Wald SE, and
    the mean equivalent SE from inverting the PLRT.
    """
    config = config or FitConfig()
    t0 = time.perf_counter()
    tasks = [(setting, config, rep) for rep in range(n_reps)]
    results = _run_tasks(_se_replicate, tasks, _resolve_workers(n_workers))
    results.sort(key=lambda r: r[0])
    failures = [(rep, msg) for rep, out, msg in results if out is None]
    if n_reps > 0 and len(failures) > _MAX_FAILURE_FRACTION * n_reps:
        raise StudyError(
            f"{len(failures)} of {n_reps} replicates failed: {failures[:3]}"
        )
    usable = [out for _, out, msg in results if out is not None]
    rows = []
    for j in (0, 1):
        betas = np.array([out[j][0] for out in usable])
        wald = np.array([out[j][1] for out in usable])
        eq = np.array([out[j][2] for out in usable])
        rows.append(
            SERow(
                coefficient=j,
                sim_sd=float(np.std(betas, ddof=1)) if betas.size > 1 else float("nan"),
                mean_wald_se=float(np.mean(wald)) if wald.size else float("nan"),
                mean_eq_se=float(np.mean(eq)) if eq.size else float("nan"),
                n_used=len(usable),
            )
        )
    return StudyReport(
        kind="se",
        design=setting.design,
        n=setting.n,
        d=setting.d,
        seed=setting.seed,
        n_reps=n_reps,
        se_rows=tuple(rows),
        n_failures=len(failures),
        failed_replicates=tuple(rep for rep, _ in failures),
        wall_clock_seconds=time.perf_counter() - t0,
    )
