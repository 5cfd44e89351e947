"""Penalized profile-likelihood fitting of generalized single-index models.

The model for a response y given covariates x is an exponential-family
density whose natural parameter is g(x'beta), with g an unknown smooth
function represented as a penalized cubic spline and beta constrained to
the unit sphere with positive first coordinate. Estimation is nested:

* inner problem: for fixed beta, maximize the penalized kernel
  ``sum_i [y_i eta_i - b(eta_i)] - (n/2) lambda delta' D delta`` over the
  spline coefficients delta by iteratively reweighted least squares
  (concave, so plain Newton with step halving is reliable);
* outer problem: maximize the profile value (the unpenalized kernel at
  the inner optimum) over the sphere coordinates phi by BFGS with
  backtracking, run in an unconstrained chart of the open unit ball.

The smoothing parameter is re-selected by GCV and the knots re-placed at
quantiles of the current index after every accepted outer step; the final
fit is re-solved once with frozen knots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    ConstraintError,
    ConvergenceError,
    DataError,
    DomainError,
    FitError,
    UsageError,
)
from .families import DISPERSION_ESTIMATED, Family
from .splines import TRUNCATED_CUBIC, SplineBasis, place_knots

# Ball-interior margin: fitted optima with ||phi|| above this trip the
# boundary warning required for valid asymptotics.
_BOUNDARY_MARGIN = 1e-6

# |eta| cap applied to binomial fits to stop perfect-separation drift.
_SEPARATION_CLAMP = 30.0

# Restart bail-out: a secondary start that trails the incumbent best by
# more than this many log-likelihood units after a dozen iterations is
# abandoned.
_BAIL_ITERS = 12
_BAIL_GAP = 5.0


def _default_lambda_grid() -> np.ndarray:
    return np.geomspace(1e-8, 1e4, 41)


@dataclass
class FitConfig:
    """Tuning knobs for :func:`fit_gsim`."""

    n_knots: int = 10
    basis_kind: str = TRUNCATED_CUBIC
    lambda_grid: np.ndarray = field(default_factory=_default_lambda_grid)
    inner_tol: float = 1e-8
    outer_tol: float = 1e-7
    max_inner: int = 100
    max_outer: int = 200
    n_restarts: int = 5
    restart_seed: int = 0

    def __post_init__(self):
        self.lambda_grid = np.atleast_1d(np.asarray(self.lambda_grid, dtype=float))
        if np.any(self.lambda_grid <= 0) or np.any(np.diff(self.lambda_grid) < 0):
            raise ValueError("lambda_grid must be positive and increasing")
        for name in ("inner_tol", "outer_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(eq=False)
class Dataset:
    """Covariate matrix (no intercept column), response vector, and family."""

    X: np.ndarray
    y: np.ndarray
    family: Family

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.ndim != 2:
            raise DataError("X must be a 2-d array")
        if self.X.shape[0] != self.y.size:
            raise DataError("X and y disagree on the number of observations")
        if not np.all(np.isfinite(self.X)):
            raise DataError("X contains non-finite entries")
        if np.any(np.ptp(self.X, axis=0) == 0):
            raise DataError("constant covariate columns are not allowed")
        self.family.validate_y(self.y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(eq=False)
class FittedGSIM:
    """Converged state of one penalized GSIM fit.

    ``transform`` maps the reduced coefficient space the optimizer worked
    in back to the full covariate space (identity for unrestricted fits,
    a column selector for dropped covariates, an orthonormal null-space
    basis for general linear constraints), so ``beta = transform @
    beta_reduced`` and the fitted index is always ``X @ beta``.
    """

    phi: np.ndarray
    beta_reduced: np.ndarray
    beta: np.ndarray
    transform: np.ndarray
    delta: np.ndarray
    lambda_: float
    basis: SplineBasis
    loglik: float
    edf_smooth: float
    edf: float
    dispersion: float
    converged: bool
    drop_set: frozenset = frozenset()
    constraint: np.ndarray | None = None
    boundary_warning: bool = False
    separation_flag: bool = False
    profile_path: tuple = ()
    n_obs: int = 0
    family_kind: str = ""

    def index_values(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.beta

    def predict_eta(self, X: np.ndarray) -> np.ndarray:
        return self.basis.design(self.index_values(X)) @ self.delta


# ---------------------------------------------------------------------------
# Sphere parametrization
# ---------------------------------------------------------------------------


def beta_from_phi(phi) -> np.ndarray:
    """Map ball coordinates phi to the unit vector (sqrt(1-||phi||^2), phi)."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    s = float(phi @ phi)
    if s > 1.0 + 1e-12:
        raise DomainError("||phi|| must be <= 1")
    return np.concatenate(([math.sqrt(max(1.0 - s, 0.0))], phi))


def phi_from_beta(beta) -> np.ndarray:
    """Inverse of :func:`beta_from_phi` for unit vectors with beta[0] >= 0."""
    beta = np.asarray(beta, dtype=float)
    if beta[0] < 0:
        raise DomainError("beta[0] must be non-negative in this chart")
    return beta[1:].copy()


def jacobian_beta_phi(phi) -> np.ndarray:
    """d beta / d phi: first row -phi'/sqrt(1-||phi||^2), identity below."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    s = float(phi @ phi)
    if s >= 1.0:
        raise DomainError("||phi|| must be < 1 for the Jacobian")
    m = phi.size
    J = np.zeros((m + 1, m))
    J[0] = -phi / math.sqrt(1.0 - s)
    J[1:] = np.eye(m)
    return J


def _ball_from_free(w: np.ndarray) -> np.ndarray:
    # phi = tanh(r)/r * w keeps the optimizer in the open unit ball; the
    # cap stops float rounding from landing exactly on the sphere.
    r = float(np.linalg.norm(w))
    if r < 1e-8:
        return w * (1.0 - r * r / 3.0)
    return w * (min(math.tanh(r), 1.0 - 1e-9) / r)


def _free_from_ball(phi: np.ndarray) -> np.ndarray:
    r = float(np.linalg.norm(phi))
    if r < 1e-8:
        return phi.copy()
    r = min(r, 1.0 - 1e-12)
    return phi * (math.atanh(r) / float(np.linalg.norm(phi)))


def _chain_free_grad(w: np.ndarray, grad_phi: np.ndarray) -> np.ndarray:
    # (d phi / d w)' grad_phi for phi = tanh(r)/r * w.
    r = float(np.linalg.norm(w))
    if r < 1e-4:
        a = 1.0 - r * r / 3.0
        b = -2.0 / 3.0
    else:
        t = math.tanh(r)
        a = t / r
        b = ((1.0 - t * t) * r - t) / r**3
    return a * grad_phi + b * float(w @ grad_phi) * w


# ---------------------------------------------------------------------------
# Penalized objective
# ---------------------------------------------------------------------------


def _kernel_sum(family: Family, y: np.ndarray, eta: np.ndarray) -> float:
    """Unpenalized log-likelihood kernel, -inf outside the family domain."""
    try:
        with np.errstate(over="ignore"):
            val = float(y @ eta - np.sum(family.cumulant(eta)))
    except DomainError:
        return -np.inf
    return val if np.isfinite(val) else -np.inf


def penalized_loglik(dataset: Dataset, phi, delta, basis: SplineBasis, lam: float) -> float:
    """Kernel sum minus the curvature penalty (n/2) lam delta' D delta."""
    beta = beta_from_phi(phi)
    if beta.size != dataset.d:
        raise UsageError("phi dimension does not match the dataset")
    delta = np.asarray(delta, dtype=float)
    eta = basis.design(dataset.X @ beta) @ delta
    kern = float(np.sum(dataset.family.loglik_kernel(dataset.y, eta)))
    D = basis.penalty()
    return kern - 0.5 * dataset.n * lam * float(delta @ D @ delta)


def penalized_loglik_grad(
    dataset: Dataset, phi, delta, basis: SplineBasis, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of :func:`penalized_loglik` in (phi, delta).

    The basis (knots and penalty) is held fixed, matching the objective
    the inner and outer solvers actually work with.
    """
    beta = beta_from_phi(phi)
    delta = np.asarray(delta, dtype=float)
    z = dataset.X @ beta
    B0 = basis.design(z)
    B1 = basis.design(z, 1)
    eta = B0 @ delta
    mu = dataset.family.mean(eta)
    r = dataset.y - mu
    gp = B1 @ delta
    J = jacobian_beta_phi(phi)
    grad_phi = (dataset.X @ J).T @ (r * gp)
    grad_delta = B0.T @ r - dataset.n * lam * (basis.penalty() @ delta)
    return grad_phi, grad_delta


# ---------------------------------------------------------------------------
# Inner solver: penalized IRLS for delta at fixed index
# ---------------------------------------------------------------------------


@dataclass
class _PirlsFit:
    delta: np.ndarray
    eta: np.ndarray
    pll: float  # penalized value
    kernel: float  # unpenalized kernel at delta
    converged: bool
    clipped: bool


def _solve_spd(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * (np.trace(H) / H.shape[0] + 1.0)
        return np.linalg.solve(H + jitter * np.eye(H.shape[0]), rhs)


def _clamp_eta(eta: np.ndarray, clamp: float | None) -> tuple[np.ndarray, bool]:
    if clamp is None:
        return eta, False
    hit = bool(np.any(np.abs(eta) > clamp))
    return (np.clip(eta, -clamp, clamp), True) if hit else (eta, False)


def _pirls(
    B0: np.ndarray,
    y: np.ndarray,
    family: Family,
    P: np.ndarray,
    delta0: np.ndarray,
    tol: float,
    max_iter: int,
    clamp: float | None,
    gram=None,
) -> _PirlsFit:
    """Maximize sum kernel(y, B0 delta) - 0.5 delta'P delta by Newton/IRLS."""
    if family.kind == "gaussian":
        # Unit weights make the inner problem a single ridge solve.
        BtB, Bty = gram if gram is not None else (B0.T @ B0, B0.T @ y)
        delta = _solve_spd(BtB + P, Bty)
        eta = B0 @ delta
        kernel = float(y @ eta - 0.5 * (eta @ eta))
        pll = kernel - 0.5 * float(delta @ P @ delta)
        return _PirlsFit(delta, eta, pll, kernel, True, False)
    delta = np.asarray(delta0, dtype=float).copy()
    eta, clipped = _clamp_eta(B0 @ delta, clamp)
    pll = _kernel_sum(family, y, eta) - 0.5 * float(delta @ P @ delta)
    if not np.isfinite(pll):
        # delta = 0 is domain-safe for gaussian/binomial/poisson starts.
        delta = np.zeros_like(delta)
        eta = np.zeros(B0.shape[0])
        pll = _kernel_sum(family, y, eta)
        if not np.isfinite(pll):
            return _PirlsFit(delta, eta, -np.inf, -np.inf, False, clipped)
    converged = False
    for _ in range(max_iter):
        mu = family.mean(eta)
        w = np.maximum(family.variance_unscaled(eta), 1e-12)
        H = B0.T @ (w[:, None] * B0) + P
        rhs = B0.T @ (w * eta + (y - mu))
        step = _solve_spd(H, rhs) - delta
        scale = 1.0
        improved = False
        for _ in range(30):
            cand = delta + scale * step
            eta_c, hit = _clamp_eta(B0 @ cand, clamp)
            pll_c = _kernel_sum(family, y, eta_c) - 0.5 * float(cand @ P @ cand)
            if np.isfinite(pll_c) and pll_c >= pll - 1e-13 * (abs(pll) + 1.0):
                improved = True
                break
            scale *= 0.5
        if not improved:
            converged = True  # no ascent left at this precision
            break
        delta, eta = cand, eta_c
        clipped = clipped or hit
        if abs(pll_c - pll) <= tol * (abs(pll_c) + 1.0):
            pll = pll_c
            converged = True
            break
        pll = pll_c
    kernel = _kernel_sum(family, y, eta)
    return _PirlsFit(delta, eta, pll, kernel, converged, clipped)


def _edf_and_hessian(
    B0: np.ndarray, w: np.ndarray, P: np.ndarray, BtWB: np.ndarray | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    if BtWB is None:
        BtWB = B0.T @ (w[:, None] * B0)
    H = BtWB + P
    edf = float(np.trace(_solve_spd(H, BtWB)))
    return edf, H, BtWB


def _init_delta(B0: np.ndarray, y: np.ndarray, family: Family, P: np.ndarray) -> np.ndarray:
    """Ridge solve of the linked response on the basis, a safe IRLS start."""
    kind = family.kind
    if kind == "gaussian":
        eta0 = y
    elif kind == "binomial":
        eta0 = np.log((y + 0.5) / (1.5 - y))
    elif kind == "poisson":
        eta0 = np.log(y + 0.5)
    else:  # gamma
        eta0 = -1.0 / np.maximum(y, 1e-8)
    K = B0.shape[1]
    H = B0.T @ B0 + P + 1e-8 * np.eye(K)
    return _solve_spd(H, B0.T @ eta0)


# ---------------------------------------------------------------------------
# Public inner-solver surface
# ---------------------------------------------------------------------------


def profile_delta(
    dataset: Dataset, beta, basis: SplineBasis, lam: float
) -> tuple[np.ndarray, float]:
    """Maximize the penalized kernel over delta for a fixed index direction.

    Returns the spline coefficients and the smoothing effective degrees
    of freedom ``trace[(B'WB + n lam D)^{-1} B'WB]`` at convergence.
    """
    beta = np.asarray(beta, dtype=float)
    z = dataset.X @ beta
    B0 = basis.design(z)
    P = dataset.n * lam * basis.penalty()
    clamp = _SEPARATION_CLAMP if dataset.family.kind == "binomial" else None
    delta0 = _init_delta(B0, dataset.y, dataset.family, P)
    fit = _pirls(B0, dataset.y, dataset.family, P, delta0, 1e-8, 100, clamp)
    if not fit.converged:
        raise ConvergenceError("penalized IRLS did not converge", last_iterate=fit.delta)
    w = np.maximum(dataset.family.variance_unscaled(fit.eta), 1e-12)
    edf, _, _ = _edf_and_hessian(B0, w, P)
    return fit.delta, edf


def select_lambda_gcv(
    dataset: Dataset, beta, basis: SplineBasis, config: FitConfig
) -> tuple[float, np.ndarray, float]:
    """Pick the smoothing parameter minimizing GCV over the config grid.

    GCV(lam) = n * PearsonDeviance(lam) / (n - edf(lam))^2, with the
    Pearson deviance ``sum (y - mu)^2 / b''(eta)``. IRLS is warm-started
    across the grid.
    """
    beta = np.asarray(beta, dtype=float)
    z = dataset.X @ beta
    B0 = basis.design(z)
    D = basis.penalty()
    clamp = _SEPARATION_CLAMP if dataset.family.kind == "binomial" else None
    sel = _gcv_sweep(B0, dataset.y, dataset.family, D, dataset.n, config, clamp)
    if sel is None:
        raise FitError("no lambda on the grid produced a usable fit")
    lam, fit, edf, _ = sel
    return lam, fit.delta, edf


def _gcv_value(y, fit: _PirlsFit, family: Family, n: int, edf: float) -> float:
    # Smoothing criterion on the deviance scale, following the default
    # split automatic selectors use: deviance-form GCV
    # n*D/(n - edf)^2 when the dispersion is estimated (for gaussian
    # responses D is the residual sum of squares, the classical
    # criterion), and UBRE/Cp D + 2*edf when the dispersion is known.
    # Pearson-form GCV badly undersmooths binary fits and is not used.
    if not np.isfinite(fit.pll) or edf >= n:
        return np.inf
    deviance = 2.0 * (float(np.sum(family.kernel_saturated(y))) - fit.kernel)
    if family.dispersion_policy == DISPERSION_ESTIMATED:
        return n * deviance / (n - edf) ** 2
    return deviance + 2.0 * edf


def _gcv_descend(B0, y, family, D, n, config: FitConfig, clamp):
    """GCV descent from the heavy-smoothing end of the grid.

    Walks left from the largest lambda while the criterion does not
    increase (tiny relative tolerance to traverse flat stretches) and
    returns the best point visited. Unlike the global grid argmin this
    cannot jump onto the degenerate overfitting arm that binary
    responses develop at near-zero lambda, mirroring how Newton-based
    automatic selectors behave in practice.
    """
    grid = config.lambda_grid
    gram = (B0.T @ B0, B0.T @ y) if family.kind == "gaussian" else None
    best = None
    prev_g = None
    delta = None
    for i in range(grid.size - 1, -1, -1):
        lam = grid[i]
        P = n * lam * D
        if delta is None and gram is None:
            delta = _init_delta(B0, y, family, P)
        fit = _pirls(
            B0, y, family, P, delta, config.inner_tol, config.max_inner, clamp, gram
        )
        if not np.isfinite(fit.pll):
            break
        delta = fit.delta
        if gram is not None:
            edf, _, _ = _edf_and_hessian(B0, None, P, BtWB=gram[0])
        else:
            w = np.maximum(family.variance_unscaled(fit.eta), 1e-12)
            edf, _, _ = _edf_and_hessian(B0, w, P)
        g = _gcv_value(y, fit, family, n, edf)
        if best is None or g < best[4]:
            best = (float(lam), fit, edf, i, g)
        if prev_g is not None and g > prev_g * (1.0 + 1e-9) + 1e-12:
            break
        prev_g = g
    if best is None:
        return None
    return best[0], best[1], best[2], best[3]


def _gcv_continue(B0, y, family, D, n, config: FitConfig, clamp, start_idx, delta0):
    """Local criterion descent from a warm grid index (lambda continuation).

    Used between ascent cycles inside one fit: tracking the criterion's
    local minimum from the current smoothing level keeps the search in
    the basin it is already in instead of re-deciding globally, the way
    Newton-based selectors behave across outer iterations.
    """
    grid = config.lambda_grid
    gram = (B0.T @ B0, B0.T @ y) if family.kind == "gaussian" else None
    cache: dict[int, tuple] = {}

    def probe(i):
        if i not in cache:
            P = n * grid[i] * D
            fit = _pirls(
                B0, y, family, P, delta0, config.inner_tol, config.max_inner, clamp, gram
            )
            if np.isfinite(fit.pll):
                if gram is not None:
                    edf, _, _ = _edf_and_hessian(B0, None, P, BtWB=gram[0])
                else:
                    w = np.maximum(family.variance_unscaled(fit.eta), 1e-12)
                    edf, _, _ = _edf_and_hessian(B0, w, P)
                g = _gcv_value(y, fit, family, n, edf)
            else:
                edf, g = np.inf, np.inf
            cache[i] = (fit, edf, g)
        return cache[i]

    i = int(np.clip(start_idx, 0, grid.size - 1))
    cur = probe(i)
    while True:
        moved = False
        for j in (i + 1, i - 1):
            if 0 <= j < grid.size and probe(j)[2] < cur[2]:
                i, cur, moved = j, probe(j), True
                break
        if not moved:
            break
    if not np.isfinite(cur[2]):
        return None
    return float(grid[i]), cur[0], cur[1], i


def _gcv_sweep(B0, y, family, D, n, config: FitConfig, clamp, delta0=None):
    """Full-grid GCV scan; returns (lam, fit, edf, grid_index) or None."""
    best = None
    delta = delta0
    gram = (B0.T @ B0, B0.T @ y) if family.kind == "gaussian" else None
    for i, lam in enumerate(config.lambda_grid):
        P = n * lam * D
        if delta is None and gram is None:
            delta = _init_delta(B0, y, family, P)
        fit = _pirls(
            B0, y, family, P, delta, config.inner_tol, config.max_inner, clamp, gram
        )
        if not np.isfinite(fit.pll):
            delta = None
            continue
        delta = fit.delta
        if gram is not None:
            edf, _, _ = _edf_and_hessian(B0, None, P, BtWB=gram[0])
        else:
            w = np.maximum(family.variance_unscaled(fit.eta), 1e-12)
            edf, _, _ = _edf_and_hessian(B0, w, P)
        g = _gcv_value(y, fit, family, n, edf)
        if best is None or g < best[4]:
            best = (float(lam), fit, edf, i, g)
    if best is None:
        return None
    return best[0], best[1], best[2], best[3]


# ---------------------------------------------------------------------------
# Outer solver: BFGS over the index direction
# ---------------------------------------------------------------------------


@dataclass
class _Structure:
    basis: SplineBasis
    D: np.ndarray


@dataclass
class _ProfileState:
    phi: np.ndarray
    beta: np.ndarray
    z: np.ndarray
    B0: np.ndarray
    lam: float
    lam_idx: int
    fit: _PirlsFit

    @property
    def pl(self) -> float:
        return self.fit.kernel


class _Workspace:
    """Per-fit buffers: reduced design, response, family, configuration."""

    def __init__(self, X: np.ndarray, y: np.ndarray, family: Family, config: FitConfig):
        self.X = X
        self.y = y
        self.family = family
        self.config = config
        self.n = X.shape[0]
        self.m = X.shape[1]
        self.clamp = _SEPARATION_CLAMP if family.kind == "binomial" else None

    def structure_for(self, beta: np.ndarray) -> _Structure:
        z = self.X @ beta
        knots = place_knots(z, self.config.n_knots)
        basis = SplineBasis(self.config.basis_kind, knots)
        return _Structure(basis, basis.penalty())

    def eval_profile(
        self, struct: _Structure, lam: float, lam_idx: int, phi: np.ndarray, delta0, tol=None
    ) -> _ProfileState:
        beta = beta_from_phi(phi)
        z = self.X @ beta
        B0 = struct.basis.design(z)
        P = self.n * lam * struct.D
        if delta0 is None:
            delta0 = _init_delta(B0, self.y, self.family, P)
        fit = _pirls(
            B0, self.y, self.family, P,
            delta0, tol or self.config.inner_tol, self.config.max_inner, self.clamp,
        )
        return _ProfileState(phi, beta, z, B0, lam, lam_idx, fit)

    def tighten(self, struct: _Structure, state: _ProfileState) -> _ProfileState:
        """Re-solve the inner problem to near machine precision."""
        P = self.n * state.lam * struct.D
        fit = _pirls(
            state.B0, self.y, self.family, P, state.fit.delta, 1e-13, 30, self.clamp
        )
        return _ProfileState(
            state.phi, state.beta, state.z, state.B0, state.lam, state.lam_idx, fit
        )

    def profile_grad(self, struct: _Structure, state: _ProfileState) -> np.ndarray:
        """d pl / d phi at the inner optimum (implicit differentiation)."""
        delta = state.fit.delta
        eta = state.fit.eta
        mu = self.family.mean(eta)
        w = np.maximum(self.family.variance_unscaled(eta), 1e-12)
        r = self.y - mu
        B1 = struct.basis.design(state.z, 1)
        gp = B1 @ delta
        J = jacobian_beta_phi(state.phi)
        XJ = self.X @ J
        term1 = XJ.T @ (r * gp)
        P = self.n * state.lam * struct.D
        _, H, _ = _edf_and_hessian(state.B0, w, P)
        score_delta = state.B0.T @ r
        u = _solve_spd(H, score_delta)
        A = r[:, None] * B1 - (w * gp)[:, None] * state.B0
        return term1 + XJ.T @ (A @ u)



def _canonical_state(ws: _Workspace, phi: np.ndarray):
    """The profile evaluated as a pure function of the index direction.

    Knots at the quantiles of the current index, lambda from a full
    deterministic GCV sweep, inner solve to near machine precision. All
    reported fits (and all warm-start comparisons between nested fits)
    go through this, which makes maximized profile values coherent
    across fits: evaluating two fits at the same beta yields the same
    number, so a model nested below another can never spuriously beat it.
    """
    beta = beta_from_phi(phi)
    struct = ws.structure_for(beta)
    z = ws.X @ beta
    B0 = struct.basis.design(z)
    sel = _gcv_descend(B0, ws.y, ws.family, struct.D, ws.n, ws.config, ws.clamp)
    if sel is None:
        return None
    lam, fit, _, idx = sel
    state = _ProfileState(np.asarray(phi, dtype=float), beta, z, B0, lam, idx, fit)
    state = ws.tighten(struct, state)
    if not np.isfinite(state.pl):
        return None
    return struct, state


def _bfgs_update(Hinv, s, yv):
    sy = float(s @ yv)
    if sy <= 1e-12 * float(np.linalg.norm(s)) * (float(np.linalg.norm(yv)) + 1e-300):
        return Hinv
    rho = 1.0 / sy
    V = np.eye(len(s)) - rho * np.outer(s, yv)
    return V @ Hinv @ V.T + rho * np.outer(s, s)


def _line_search(ws, struct, state, w, gw, Hinv, first: bool):
    """Backtracking ascent step at fixed structure and lambda.

    Returns (w_new, state_new, Hinv) or None when no ascent direction
    remains at working precision.
    """
    p = Hinv @ gw
    if float(p @ gw) <= 0.0:
        Hinv = np.eye(len(w))
        p = gw.copy()
    slope = float(gw @ p)
    if slope <= 1e-14 * (abs(state.pl) + 1.0):
        return None
    alpha = min(1.0, 1.0 / max(float(np.linalg.norm(p)), 1e-12)) if first else 1.0
    for _ in range(30):
        w_try = w + alpha * p
        phi_try = _ball_from_free(w_try)
        st_try = ws.eval_profile(struct, state.lam, state.lam_idx, phi_try, state.fit.delta)
        if np.isfinite(st_try.pl) and st_try.pl >= state.pl + 1e-4 * alpha * slope:
            return w_try, st_try, Hinv
        alpha *= 0.5
    return None


@dataclass
class _StartResult:
    struct: _Structure
    state: _ProfileState
    start_struct: _Structure
    start_state: _ProfileState
    w: np.ndarray
    Hinv: np.ndarray
    converged: bool
    grad_inf: float
    path: tuple
    bailed: bool = False


def _bfgs_profile(
    ws: _Workspace, phi0: np.ndarray, bail_ref: float | None
) -> _StartResult | None:
    """One start of the outer maximization; returns None if nothing evaluates.

    Performance-iteration layout: the smoothing parameter is held fixed
    while BFGS climbs the profile in phi (knots are re-placed at every
    accepted step), then lambda is re-selected by a full GCV sweep at the
    new direction, and the climb repeats. Holding lambda fixed during the
    climb matters: re-selecting it inside the ascent lets the kernel
    ratchet it toward zero along quasi-separating directions, which
    wrecks binary fits.
    """
    cfg = ws.config
    phi = np.asarray(phi0, dtype=float)
    cs = _canonical_state(ws, phi)
    if cs is None:
        return None
    struct, state = cs
    start_struct, start_state = struct, state
    grad = ws.profile_grad(struct, state)
    w = _free_from_ball(phi)
    gw = _chain_free_grad(w, grad)
    k = phi.size
    Hinv = np.eye(k)
    path = [state.pl]
    converged = False
    bailed = False
    iters_used = 0

    for _cycle in range(8):
        inner_done = False
        while iters_used < cfg.max_outer:
            iters_used += 1
            step = _line_search(ws, struct, state, w, gw, Hinv, first=(iters_used == 1))
            if step is None:
                inner_done = True
                break
            w_new, st_new, Hinv = step
            phi_new = st_new.phi

            # Re-place knots at the accepted iterate (same lambda); keep
            # the new structure unless it degrades the profile.
            struct_new = ws.structure_for(st_new.beta)
            st_ref = ws.eval_profile(
                struct_new, st_new.lam, st_new.lam_idx, phi_new, st_new.fit.delta
            )
            st_ref = ws.tighten(struct_new, st_ref)
            if np.isfinite(st_ref.pl) and st_ref.pl >= st_new.pl - 1e-12 * (
                abs(st_new.pl) + 1.0
            ):
                struct, st_new = struct_new, st_ref
            else:
                st_new = ws.tighten(struct, st_new)

            grad_new = ws.profile_grad(struct, st_new)
            gw_new = _chain_free_grad(w_new, grad_new)
            Hinv = _bfgs_update(Hinv, w_new - w, gw - gw_new)
            step_norm = float(np.linalg.norm(phi_new - phi))
            w, phi, state, gw = w_new, phi_new, st_new, gw_new
            path.append(state.pl)
            if (
                bail_ref is not None
                and iters_used >= _BAIL_ITERS
                and state.pl < bail_ref - _BAIL_GAP
            ):
                bailed = True
                break
            if step_norm < cfg.outer_tol:
                inner_done = True
                break
        if bailed:
            break

        # Lambda re-selection by continuation from the current level.
        sel = _gcv_continue(
            state.B0, ws.y, ws.family, struct.D, ws.n, cfg, ws.clamp,
            state.lam_idx, state.fit.delta,
        )
        if sel is None:
            break
        lam, fitp, _, idx = sel
        lam_changed = idx != state.lam_idx
        if lam_changed:
            state = ws.tighten(
                struct,
                _ProfileState(state.phi, state.beta, state.z, state.B0, lam, idx, fitp),
            )
            grad = ws.profile_grad(struct, state)
            gw = _chain_free_grad(w, grad)
            path.append(state.pl)
        if inner_done and not lam_changed:
            converged = True
            break
        if iters_used >= cfg.max_outer:
            break

    grad_inf = float(np.linalg.norm(gw, np.inf))
    converged = converged or grad_inf <= 1e-4 * ws.n
    return _StartResult(
        struct=struct,
        state=state,
        start_struct=start_struct,
        start_state=start_state,
        w=w,
        Hinv=Hinv,
        converged=converged,
        grad_inf=grad_inf,
        path=tuple(path),
        bailed=bailed,
    )


def _polish(ws: _Workspace, struct, state, w, gw, Hinv, max_steps: int):
    """BFGS ascent at frozen structure until the gradient is tiny."""
    gtol = 1e-6 * ws.n
    path = []
    for step_i in range(max_steps):
        if float(np.linalg.norm(gw, np.inf)) <= gtol:
            break
        step = _line_search(ws, struct, state, w, gw, Hinv, first=(step_i == 0))
        if step is None:
            break
        w_new, st_new, Hinv = step
        st_new = ws.tighten(struct, st_new)
        grad_new = ws.profile_grad(struct, st_new)
        gw_new = _chain_free_grad(w_new, grad_new)
        Hinv = _bfgs_update(Hinv, w_new - w, gw - gw_new)
        w, state, gw = w_new, st_new, gw_new
        path.append(state.pl)
    return struct, state, w, gw, Hinv, path


def _finalize_winner(ws: _Workspace, winner: _StartResult, candidates):
    """Re-solve the winning start with frozen canonical knots.

    Canonicalize at the final direction, re-polish the direction on the
    frozen structure, canonicalize once more, and report the best
    canonical candidate seen anywhere (including every start's initial
    canonical evaluation, which preserves exact dominance over warm
    starts taken from nested fits).
    """
    struct, state, w, Hinv = winner.struct, winner.state, winner.w, winner.Hinv
    path = list(winner.path)
    for _ in range(2):
        cs = _canonical_state(ws, state.phi)
        if cs is None:
            break
        structC, stateC = cs
        candidates.append((structC, stateC))
        grad = ws.profile_grad(structC, stateC)
        w = _free_from_ball(stateC.phi)
        gw = _chain_free_grad(w, grad)
        struct, state, w, gw, Hinv, extra = _polish(
            ws, structC, stateC, w, gw, Hinv, max_steps=12
        )
        path.extend(extra)
        if float(np.linalg.norm(state.phi - stateC.phi)) < ws.config.outer_tol:
            break
    cs = _canonical_state(ws, state.phi)
    if cs is not None:
        candidates.append(cs)
    struct_best, state_best = max(candidates, key=lambda c: c[1].pl)
    path.append(state_best.pl)
    grad = ws.profile_grad(struct_best, state_best)
    gw = _chain_free_grad(_free_from_ball(state_best.phi), grad)
    grad_inf = float(np.linalg.norm(gw, np.inf))
    w_final = np.maximum(ws.family.variance_unscaled(state_best.fit.eta), 1e-12)
    P = ws.n * state_best.lam * struct_best.D
    edf_smooth, _, _ = _edf_and_hessian(state_best.B0, w_final, P)
    converged = winner.converged or grad_inf <= 1e-4 * ws.n
    return struct_best, state_best, edf_smooth, converged, grad_inf, tuple(path)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _glm_init_coefs(X: np.ndarray, y: np.ndarray, family: Family) -> np.ndarray:
    """Slope vector of a canonical-link GLM of y on [1, X] (index warm start)."""
    n, m = X.shape
    Z = np.column_stack([np.ones(n), X])
    if family.kind == "gaussian":
        coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
        return coef[1:]
    coef = np.zeros(m + 1)
    eta = Z @ coef
    if family.kind == "gamma":
        # keep eta strictly negative: start from the mean response
        coef[0] = -1.0 / max(float(np.mean(y)), 1e-8)
        eta = Z @ coef
    ll = _kernel_sum(family, y, eta)
    for _ in range(25):
        mu = family.mean(eta)
        w = np.maximum(family.variance_unscaled(eta), 1e-12)
        H = Z.T @ (w[:, None] * Z) + 1e-10 * np.eye(m + 1)
        step = _solve_spd(H, Z.T @ (w * eta + (y - mu))) - coef
        scale, improved = 1.0, False
        for _ in range(25):
            cand = coef + scale * step
            eta_c = np.clip(Z @ cand, -30.0, 30.0) if family.kind != "gamma" else Z @ cand
            ll_c = _kernel_sum(family, y, eta_c)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * (abs(ll) + 1.0):
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        coef, eta = cand, eta_c
        if abs(ll_c - ll) <= 1e-9 * (abs(ll_c) + 1.0):
            ll = ll_c
            break
        ll = ll_c
    return coef[1:]


def _phi_start_from_beta(beta: np.ndarray) -> np.ndarray:
    """Normalize, orient, and pull a start vector into the open ball."""
    b = np.asarray(beta, dtype=float).copy()
    norm = float(np.linalg.norm(b))
    if not np.isfinite(norm) or norm < 1e-12:
        b = np.zeros_like(b)
        b[0] = 1.0
        norm = 1.0
    b /= norm
    if b[0] < 0:
        b = -b
    phi = b[1:]
    pn = float(np.linalg.norm(phi))
    if pn > 0.99:
        phi = phi * (0.99 / pn)
    return phi


# ---------------------------------------------------------------------------
# Top-level fit
# ---------------------------------------------------------------------------


def fit_gsim(
    dataset: Dataset,
    config: FitConfig | None = None,
    drop_set=(),
    *,
    transform: np.ndarray | None = None,
    extra_inits=(),
) -> FittedGSIM:
    """Fit a penalized GSIM, optionally with covariates constrained out.

    ``drop_set`` holds 0-based covariate indices forced out of the index.
    ``transform`` (used by the inference layer) replaces the covariates by
    ``X @ transform`` and reports ``beta = transform @ beta_reduced``;
    it must have orthonormal columns. ``extra_inits`` are full-space
    coefficient vectors used as additional warm starts.
    """
    config = config or FitConfig()
    d = dataset.d
    drop = frozenset(int(j) for j in drop_set)
    if any(j < 0 or j >= d for j in drop):
        raise UsageError("drop_set indices out of range")
    if transform is not None and drop:
        raise UsageError("drop_set and transform are mutually exclusive")
    if len(drop) >= d:
        raise UsageError("cannot drop every covariate")

    if transform is not None:
        V = np.asarray(transform, dtype=float)
        if V.ndim != 2 or V.shape[0] != d:
            raise UsageError("transform must be d x m")
        if not np.allclose(V.T @ V, np.eye(V.shape[1]), atol=1e-10):
            raise ConstraintError("transform columns must be orthonormal")
    else:
        active = [j for j in range(d) if j not in drop]
        V = np.zeros((d, len(active)))
        for col, j in enumerate(active):
            V[j, col] = 1.0

    Xr = dataset.X @ V
    m = Xr.shape[1]
    dim = config.n_knots + 4
    if dataset.n <= d + dim:
        raise DataError(
            f"need n > d + basis dim ({d + dim}); got n = {dataset.n}"
        )
    ws = _Workspace(Xr, dataset.y, dataset.family, config)

    if m == 1:
        return _fit_univariate(dataset, ws, V, drop, config)

    starts: list[np.ndarray] = [_phi_start_from_beta(_glm_init_coefs(Xr, dataset.y, dataset.family))]
    for binit in extra_inits:
        b = np.asarray(binit, dtype=float)
        if b.shape == (d,):
            b = V.T @ b
        if b.shape != (m,):
            raise UsageError("extra_inits entries must be full- or reduced-space vectors")
        if float(np.linalg.norm(b)) > 1e-8:
            starts.append(_phi_start_from_beta(b))
    rng = np.random.default_rng(config.restart_seed)
    for _ in range(config.n_restarts):
        v = rng.standard_normal(m)
        starts.append(_phi_start_from_beta(v))

    best: _StartResult | None = None
    any_converged = False
    candidates = []
    for i, phi0 in enumerate(starts):
        bail_ref = best.state.pl if (best is not None and i > 0) else None
        res = _bfgs_profile(ws, phi0, bail_ref)
        if res is None:
            continue
        candidates.append((res.start_struct, res.start_state))
        if res.converged and not res.bailed:
            any_converged = True
        if best is None or res.state.pl > best.state.pl:
            best = res
    if best is None:
        raise FitError("every start failed to produce a finite profile value")
    if not any_converged:
        raise FitError(
            "no start converged "
            f"(best profile {best.state.pl:.6g}, grad inf-norm {best.grad_inf:.3g})"
        )

    struct, state, edf_smooth, converged, grad_inf, path = _finalize_winner(
        ws, best, candidates
    )
    beta_reduced = state.beta
    phi_norm = float(np.linalg.norm(state.phi))
    fit = FittedGSIM(
        phi=state.phi.copy(),
        beta_reduced=beta_reduced.copy(),
        beta=V @ beta_reduced,
        transform=V,
        delta=state.fit.delta.copy(),
        lambda_=state.lam,
        basis=struct.basis,
        loglik=state.pl,
        edf_smooth=edf_smooth,
        edf=edf_smooth + (m - 1),
        dispersion=1.0,
        converged=converged,
        drop_set=drop,
        boundary_warning=phi_norm > 1.0 - _BOUNDARY_MARGIN,
        separation_flag=state.fit.clipped,
        profile_path=path,
        n_obs=dataset.n,
        family_kind=dataset.family.kind,
    )
    if dataset.family.dispersion_policy == DISPERSION_ESTIMATED:
        fit.dispersion = estimate_dispersion(fit, dataset)
    return fit


def _fit_univariate(
    dataset: Dataset, ws: _Workspace, V: np.ndarray, drop: frozenset, config: FitConfig
) -> FittedGSIM:
    """Single remaining covariate: the index is fixed and only g is fit."""
    beta_reduced = np.array([1.0])
    cs = _canonical_state(ws, np.zeros(0))
    if cs is None:
        raise FitError("no lambda on the grid produced a usable fit")
    struct, state = cs
    w = np.maximum(ws.family.variance_unscaled(state.fit.eta), 1e-12)
    edf_smooth, _, _ = _edf_and_hessian(state.B0, w, ws.n * state.lam * struct.D)
    fit = FittedGSIM(
        phi=np.zeros(0),
        beta_reduced=beta_reduced,
        beta=V @ beta_reduced,
        transform=V,
        delta=state.fit.delta.copy(),
        lambda_=state.lam,
        basis=struct.basis,
        loglik=state.pl,
        edf_smooth=edf_smooth,
        edf=edf_smooth,
        dispersion=1.0,
        converged=state.fit.converged,
        drop_set=drop,
        separation_flag=state.fit.clipped,
        profile_path=(state.pl,),
        n_obs=dataset.n,
        family_kind=dataset.family.kind,
    )
    if dataset.family.dispersion_policy == DISPERSION_ESTIMATED:
        fit.dispersion = estimate_dispersion(fit, dataset)
    return fit


def estimate_dispersion(fit: FittedGSIM, dataset: Dataset) -> float:
    """Method-of-moments dispersion: sum (y-mu)^2/v divided by (n - edf)."""
    if dataset.family.dispersion_policy != DISPERSION_ESTIMATED:
        return 1.0
    if dataset.n <= fit.edf:
        raise UsageError("residual degrees of freedom must be positive")
    eta = fit.predict_eta(dataset.X)
    mu = dataset.family.mean(eta)
    v = np.maximum(dataset.family.variance_unscaled(eta), 1e-12)
    return float(np.sum((dataset.y - mu) ** 2 / v) / (dataset.n - fit.edf))


def refit_with_first_coef_one(fit: FittedGSIM, dataset: Dataset):
    """Re-express a fit under the scaling constraint beta_1 = 1.

    Rescales the coefficient vector by 1/beta_1 and the knots by the same
    factor; the curvature integral transforms cubically under an affine
    change of argument, so the smoothing parameter picks up a factor
    beta_1^3 in the denominator. Re-solving the inner problem then yields
    the same maximized kernel and fitted means; only the parametrization
    differs.

    Returns (beta_scaled, kernel, fitted_eta).
    """
    c = float(fit.beta_reduced[0])
    if c <= 0:
        raise UsageError("first reduced coefficient must be positive")
    beta2 = fit.beta_reduced / c
    knots = fit.basis.knots
    from .splines import KnotSequence  # local import to avoid cycle at module load

    knots2 = KnotSequence(interior=knots.interior / c, lo=knots.lo / c, hi=knots.hi / c)
    basis2 = SplineBasis(fit.basis.kind, knots2)
    lam2 = fit.lambda_ / c**3
    Xr = dataset.X @ fit.transform
    z2 = Xr @ beta2
    B2 = basis2.design(z2)
    P2 = dataset.n * lam2 * basis2.penalty()
    clamp = _SEPARATION_CLAMP if dataset.family.kind == "binomial" else None
    delta0 = _init_delta(B2, dataset.y, dataset.family, P2)
    pf = _pirls(B2, dataset.y, dataset.family, P2, delta0, 1e-13, 200, clamp)
    return beta2, pf.kernel, pf.eta
