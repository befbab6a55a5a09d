"""Weighted Poisson estimation for expanded movement data.

The expanded rows define a weighted Poisson log-likelihood

    sum_r w_r * (z_r * eta_r - mu_r),    mu_r = exp(eta_r + log_offset_r)

maximized by iteratively reweighted least squares with optional quadratic
(curvature) penalties, or by coordinate descent under an L1 penalty.
Model selection uses blocked cross-validation over contiguous sojourn
blocks; per-imputation fits can be pooled by the usual multiple-imputation
combining rules.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .errors import ConvergenceError, InputError
from .splines import SplineBasis1D

_SEPARATION_BOUND = 30.0


# -- likelihood pieces ----------------------------------------------------


def weighted_loglik(data, beta) -> float:
    """Full weighted Poisson log-likelihood at ``beta``."""
    eta = data.X @ np.asarray(beta, dtype=float) + data.log_offset
    return float(data.weights @ (data.z * eta - np.exp(eta)))


def weighted_score(data, beta) -> np.ndarray:
    """Gradient of :func:`weighted_loglik` in ``beta``."""
    mu = np.exp(data.X @ np.asarray(beta, dtype=float) + data.log_offset)
    return data.X.T @ (data.weights * (data.z - mu))


def weighted_information(data, beta) -> np.ndarray:
    """Negative Hessian of :func:`weighted_loglik` at ``beta``."""
    mu = np.exp(data.X @ np.asarray(beta, dtype=float) + data.log_offset)
    return (data.X * (data.weights * mu)[:, None]).T @ data.X


def weighted_deviance(data, beta) -> float:
    """Weighted Poisson deviance of ``data`` against the fit ``beta``."""
    eta = data.X @ np.asarray(beta, dtype=float) + data.log_offset
    mu = np.exp(eta)
    return float(2.0 * (data.weights @ (np.exp(eta) - data.z - data.z * eta + data.z * 0)))  # placeholder


def _deviance(data, beta) -> float:
    eta = data.X @ np.asarray(beta, dtype=float) + data.log_offset
    mu = np.exp(eta)
    # z is 0/1 so z*log z vanishes and the unit deviance is -z*log mu - (z - mu)
    return float(2.0 * (data.weights @ (mu - data.z - data.z * eta)))


# -- penalties ------------------------------------------------------------


def penalty_matrix(basis: SplineBasis1D) -> np.ndarray:
    """Integrated squared-curvature penalty of a spline basis.

    Entry (i, j) is the integral of the product of second derivatives of
    basis functions i and j over the domain, assembled by Gauss-Legendre
    quadrature on each knot span with enough nodes to be exact for the
    piecewise-polynomial integrand. Degree must be at least 2; linear
    combinations representing straight lines fall in the null space.
    """
    if basis.degree < 2:
        raise InputError("curvature penalty needs spline degree >= 2")
    K = basis.num_basis
    kn = basis.knots
    d = basis.degree
    nodes, wts = np.polynomial.legendre.leggauss(d + 1)
    omega = np.zeros((K, K))
    for i in range(d, len(kn) - d - 1):
        a, b = kn[i], kn[i + 1]
        if b <= a:
            continue
        half = 0.5 * (b - a)
        pts = 0.5 * (a + b) + half * nodes
        B2 = basis.design_matrix(pts, deriv=2)
        omega += half * (B2.T * wts) @ B2
    return 0.5 * (omega + omega.T)


@dataclass
class PenaltySpec:
    """Penalty configuration for a fit.

    ``kind`` is one of "none", "quadratic" (curvature matrix ``omega``
    scaled by ``lam``) or "l1" (soft-thresholding of the ``penalized``
    columns at ``lam``). ``lam_grid`` carries a decreasing grid for path
    fits and cross-validation.
    """

    kind: str = "none"
    lam: float = 0.0
    lam_grid: np.ndarray | None = None
    omega: np.ndarray | None = None
    penalized: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "quadratic", "l1"):
            raise InputError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "quadratic" and self.omega is None:
            raise InputError("quadratic penalty needs a penalty matrix")
        if self.lam < 0:
            raise InputError("penalty weight must be nonnegative")
        if self.lam_grid is not None:
            g = np.asarray(self.lam_grid, dtype=float)
            if g.ndim != 1 or g.size < 1 or np.any(np.diff(g) >= 0) and g.size > 1:
                raise InputError("lam_grid must be a decreasing 1-d grid")
            self.lam_grid = g

    def with_lam(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.kind, float(lam), None, self.omega, self.penalized)


def quadratic_penalty_for(design) -> np.ndarray:
    """Block penalty matrix penalizing the curvature of every varying term."""
    p = design.n_columns
    omega = np.zeros((p, p))
    slices = design.column_slices()
    found = False
    for term, basis in design.varying_bases().items():
        sl = slices[f"varying:{term}"]
        omega[sl, sl] = penalty_matrix(basis)
        found = True
    if not found:
        raise InputError("model has no varying terms to penalize")
    return omega


def default_penalized(labels) -> np.ndarray:
    """Default L1 mask: every column except the intercept."""
    mask = np.ones(len(labels), dtype=bool)
    for i, lab in enumerate(labels):
        if lab == "intercept":
            mask[i] = False
    return mask


# -- results --------------------------------------------------------------


@dataclass
class FitResult:
    """Coefficients and fit diagnostics from one estimation run."""

    labels: tuple[str, ...]
    coefficients: np.ndarray
    standard_errors: np.ndarray | None
    loglik: float
    aic: float
    edof: float
    penalty_kind: str
    lam: float | None
    iterations: int
    grad_norm: float
    status: str
    kkt: float | None = None
    penalized: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def coefficient(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "coefficients": [float(v) for v in self.coefficients],
            "standard_errors": None
            if self.standard_errors is None
            else [float(v) for v in self.standard_errors],
            "loglik": self.loglik,
            "aic": self.aic,
            "edof": self.edof,
            "penalty": self.penalty_kind,
            "lam": self.lam,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "status": self.status,
            "kkt": self.kkt,
            "penalized": None
            if self.penalized is None
            else [bool(b) for b in self.penalized],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FitResult":
        return cls(
            labels=tuple(doc["labels"]),
            coefficients=np.asarray(doc["coefficients"], dtype=float),
            standard_errors=None
            if doc.get("standard_errors") is None
            else np.asarray(doc["standard_errors"], dtype=float),
            loglik=float(doc["loglik"]),
            aic=float(doc["aic"]),
            edof=float(doc["edof"]),
            penalty_kind=doc.get("penalty", "none"),
            lam=doc.get("lam"),
            iterations=int(doc.get("iterations", 0)),
            grad_norm=float(doc.get("grad_norm", np.nan)),
            status=doc.get("status", "converged"),
            kkt=doc.get("kkt"),
            penalized=None
            if doc.get("penalized") is None
            else np.asarray(doc["penalized"], dtype=bool),
        )

    def to_json(self, file):
        Path(file).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, file) -> "FitResult":
        return cls.from_dict(json.loads(Path(file).read_text()))

    def to_coef_csv(self, file):
        lines = ["label,estimate,se"]
        for i, lab in enumerate(self.labels):
            se = "" if self.standard_errors is None else repr(float(self.standard_errors[i]))
            lines.append(f"{lab},{repr(float(self.coefficients[i]))},{se}")
        Path(file).write_text("\n".join(lines) + "\n")


# -- IRLS -----------------------------------------------------------------


def _solve_spd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve with a symmetric positive-definite matrix.

    One retry with a 1e-10 diagonal jitter; a second factorization failure
    raises.
    """
    try:
        c = scipy.linalg.cho_factor(A, check_finite=False)
        return scipy.linalg.cho_solve(c, B, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    try:
        c = scipy.linalg.cho_factor(
            A + 1e-10 * np.eye(A.shape[0]), check_finite=False
        )
        return scipy.linalg.cho_solve(c, B, check_finite=False)
    except np.linalg.LinAlgError:
        raise ConvergenceError(
            "normal equations are not positive definite even after jitter"
        )


def fit_poisson_weighted(
    data,
    penalty: PenaltySpec | None = None,
    start=None,
    max_iter: int = 100,
    obj_tol: float = 1e-10,
    grad_tol: float = 1e-6,
) -> FitResult:
    """Maximize the weighted Poisson log-likelihood, optionally with a
    quadratic penalty.

    Newton steps with step halving; converged when the relative change of
    the penalized objective drops below ``obj_tol`` and the penalized
    score norm below ``grad_tol``. Standard errors come from the inverse
    penalized information at the optimum. Coefficients wandering past
    +-30 flag likely separation.
    """
    pen = penalty or PenaltySpec()
    if pen.kind == "l1":
        raise InputError("use fit_lasso for L1 penalties")
    X, z, w, off = data.X, data.z, data.weights, data.log_offset
    n, p = X.shape
    lam = pen.lam if pen.kind == "quadratic" else 0.0
    omega = pen.omega if pen.kind == "quadratic" else None

    beta = np.zeros(p) if start is None else np.asarray(start, dtype=float).copy()
    if beta.shape != (p,):
        raise InputError(f"start vector has length {beta.size}, expected {p}")

    def pen_objective(b, eta):
        val = float(w @ (z * eta - np.exp(eta + off)))
        if omega is not None:
            val -= 0.5 * lam * float(b @ omega @ b)
        return val

    eta = X @ beta
    obj = pen_objective(beta, eta)
    status = "max_iter"
    it = 0
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        mu = np.exp(eta + off)
        score = X.T @ (w * (z - mu))
        if omega is not None:
            score = score - lam * (omega @ beta)
        gnorm = float(np.linalg.norm(score))
        H = (X * (w * mu)[:, None]).T @ X
        if omega is not None:
            H = H + lam * omega
        delta = _solve_spd(H, score)

        step = 1.0
        improved = False
        for _ in range(50):
            cand = beta + step * delta
            eta_c = X @ cand
            with np.errstate(over="ignore"):
                obj_c = pen_objective(cand, eta_c)
            if np.isfinite(obj_c) and obj_c >= obj - 1e-13 * (abs(obj) + 1.0):
                improved = obj_c > obj
                beta, eta = cand, eta_c
                rel = abs(obj_c - obj) / (abs(obj_c) + 1.0)
                obj = obj_c
                break
            step *= 0.5
        else:
            rel = 0.0
        if rel < obj_tol and gnorm < grad_tol:
            status = "converged"
            break
        if not improved and rel < obj_tol:
            # objective cannot improve further; accept if the score agrees
            if gnorm < grad_tol:
                status = "converged"
            break

    mu = np.exp(eta + off)
    H_unpen = (X * (w * mu)[:, None]).T @ X
    H_pen = H_unpen if omega is None else H_unpen + lam * omega
    cov = _solve_spd(H_pen, np.eye(p))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    score = X.T @ (w * (z - mu))
    if omega is not None:
        score = score - lam * (omega @ beta)
    gnorm = float(np.linalg.norm(score))
    if status != "converged" and gnorm < grad_tol:
        status = "converged"
    if np.max(np.abs(beta)) > _SEPARATION_BOUND:
        status = "separation"

    ll = float(w @ (z * (eta + off) - mu))
    if omega is None:
        edof = float(p)
    else:
        edof = float(np.trace(_solve_spd(H_pen, H_unpen)))
    return FitResult(
        labels=tuple(data.labels),
        coefficients=beta,
        standard_errors=se,
        loglik=ll,
        aic=-2.0 * ll + 2.0 * edof,
        edof=edof,
        penalty_kind=pen.kind,
        lam=lam if pen.kind == "quadratic" else None,
        iterations=it,
        grad_norm=gnorm,
        status=status,
    )


# -- L1 path --------------------------------------------------------------


def _standardize(data, penalized, standardize):
    """Column moments for the internal working scale."""
    p = data.X.shape[1]
    center = np.zeros(p)
    scale = np.ones(p)
    if not standardize:
        return center, scale
    wn = data.weights / data.weights.sum()
    is_intercept = np.array([lab == "intercept" for lab in data.labels])
    has_intercept = bool(is_intercept.any())
    for j in range(p):
        if is_intercept[j]:
            continue
        m = float(wn @ data.X[:, j]) if has_intercept else 0.0
        v = float(wn @ (data.X[:, j] - m) ** 2)
        center[j] = m
        if v > 0:
            scale[j] = np.sqrt(v)
    return center, scale


def lasso_lambda_max(data, penalized=None, standardize: bool = True) -> float:
    """Smallest penalty that zeroes every penalized coefficient.

    The maximum absolute weighted score of the penalized (standardized)
    columns at the fit using only unpenalized columns.
    """
    penalized = (
        default_penalized(data.labels) if penalized is None else np.asarray(penalized, bool)
    )
    center, scale = _standardize(data, penalized, standardize)
    free = ~penalized
    if free.any():
        sub = _column_subset(data, np.flatnonzero(free))
        base = fit_poisson_weighted(sub)
        eta = sub.X @ base.coefficients
    else:
        eta = np.zeros(data.n_rows)
    mu = np.exp(eta + data.log_offset)
    r = data.weights * (data.z - mu)
    Xs = (data.X - center) / scale
    return float(np.max(np.abs(Xs[:, penalized].T @ r)))


def _column_subset(data, cols):
    from .pipeline import ExpandedData

    return ExpandedData(
        data.z,
        data.log_offset,
        data.weights,
        data.path_id,
        data.time,
        data.from_cell,
        data.to_cell,
        data.X[:, cols],
        tuple(data.labels[i] for i in cols),
    )


def fit_lasso(
    data,
    lam_grid=None,
    penalized=None,
    standardize: bool = True,
    max_outer: int = 200,
    outer_tol: float = 1e-8,
    inner_tol: float = 1e-12,
    max_inner: int = 2000,
) -> list[FitResult]:
    """L1-penalized path fit by coordinate descent.

    Columns are standardized internally to weighted mean zero and variance
    one (the intercept is untouched) and the penalty applies on that
    scale; reported coefficients are transformed back. The grid must be
    decreasing; fits are warm-started along it. Each solution's
    stationarity conditions are checked and the worst violation recorded.
    ``lam_grid=None`` builds a 50-point geometric grid from the critical
    penalty down three decades.
    """
    penalized = (
        default_penalized(data.labels) if penalized is None else np.asarray(penalized, bool)
    )
    if penalized.shape != (data.X.shape[1],):
        raise InputError("penalized mask length does not match design columns")
    if lam_grid is None:
        lmax = lasso_lambda_max(data, penalized, standardize)
        lam_grid = lmax * np.geomspace(1.0, 1e-3, 50)
    lam_grid = np.asarray(lam_grid, dtype=float)
    if lam_grid.ndim != 1 or (lam_grid.size > 1 and np.any(np.diff(lam_grid) >= 0)):
        raise InputError("lam_grid must be decreasing")

    X, z, w, off = data.X, data.z, data.weights, data.log_offset
    n, p = X.shape
    center, scale = _standardize(data, penalized, standardize)
    Xs = (X - center) / scale

    beta = np.zeros(p)
    out = []
    for lam in lam_grid:
        beta, iters, kkt, status = _cd_solve(
            Xs, z, w, off, penalized, float(lam), beta,
            max_outer, outer_tol, inner_tol, max_inner,
        )
        coef = beta / scale
        # centering moved the constant into the intercept; undo it
        is_intercept = np.array([lab == "intercept" for lab in data.labels])
        if is_intercept.any():
            shift = float(np.sum(beta * center / scale))
            coef = coef.copy()
            coef[is_intercept] -= shift - beta[is_intercept] * center[is_intercept]
        eta = X @ coef + off
        ll = float(w @ (z * eta - np.exp(eta)))
        nz = int(np.count_nonzero(coef))
        out.append(
            FitResult(
                labels=tuple(data.labels),
                coefficients=coef,
                standard_errors=None,
                loglik=ll,
                aic=-2.0 * ll + 2.0 * nz,
                edof=float(nz),
                penalty_kind="l1",
                lam=float(lam),
                iterations=iters,
                grad_norm=kkt,
                status=status,
                kkt=kkt,
                penalized=penalized.copy(),
            )
        )
    return out


def _cd_solve(Xs, z, w, off, penalized, lam, beta0, max_outer, outer_tol, inner_tol, max_inner):
    """Coordinate descent on successive quadratic approximations."""
    beta = beta0.copy()
    p = Xs.shape[1]
    status = "max_iter"
    it = 0
    for it in range(1, max_outer + 1):
        eta = Xs @ beta
        with np.errstate(over="ignore"):
            mu = np.exp(eta + off)
        if not np.all(np.isfinite(mu)):
            raise ConvergenceError("overflow in L1 fit; data may be separable")
        u = w * mu
        r0 = w * (z - mu)
        s0 = Xs.T @ r0
        denom = (Xs * Xs).T @ u
        denom = np.where(denom > 0, denom, 1.0)

        b_out = beta.copy()
        db = np.zeros(p)  # inner displacement from the expansion point
        q = np.zeros(len(z))  # u * Xs @ db, maintained incrementally
        active = np.ones(p, dtype=bool)
        for sweep in range(max_inner):
            max_move = 0.0
            for j in np.flatnonzero(active):
                g = s0[j] - Xs[:, j] @ q
                nu = denom[j] * (beta[j]) + g
                if penalized[j]:
                    new = np.sign(nu) * max(abs(nu) - lam, 0.0) / denom[j]
                else:
                    new = nu / denom[j]
                d = new - beta[j]
                if d != 0.0:
                    q += u * (Xs[:, j] * d)
                    beta[j] = new
                    max_move = max(max_move, abs(d))
            if max_move < inner_tol:
                if active.all():
                    break
                active[:] = True  # confirm on a full sweep
            else:
                active = (beta != 0.0) | ~penalized
        if float(np.max(np.abs(beta - b_out))) < outer_tol:
            status = "converged"
            break

    eta = Xs @ beta
    mu = np.exp(eta + off)
    score = Xs.T @ (w * (z - mu))
    viol = np.where(
        penalized,
        np.where(beta == 0.0, np.maximum(np.abs(score) - lam, 0.0), np.abs(score - lam * np.sign(beta))),
        np.abs(score),
    )
    return beta, it, float(np.max(viol)), status


def refit_active(data, fit: FitResult, **kwargs) -> FitResult:
    """Unpenalized refit on the selected support of an L1 fit.

    Keeps every unpenalized column and every penalized column with a
    nonzero coefficient; standard errors for the selected coefficients
    come from this refit.
    """
    if fit.penalized is None:
        raise InputError("refit_active expects an L1 fit with a penalized mask")
    keep = np.flatnonzero(~fit.penalized | (fit.coefficients != 0.0))
    if keep.size == 0:
        raise InputError("no active columns to refit")
    return fit_poisson_weighted(_column_subset(data, keep), **kwargs)


# -- cross-validation -----------------------------------------------------


@dataclass
class CvResult:
    lam_grid: np.ndarray
    mean_scores: np.ndarray
    fold_scores: np.ndarray
    lam_star: float
    best_index: int
    n_folds: int


def _blocked_folds(data, n_folds):
    """Contiguous sojourn blocks within each path id."""
    sid = data.sojourn_ids()
    folds = [[] for _ in range(n_folds)]
    for pid in np.unique(data.path_id):
        rows = np.flatnonzero(data.path_id == pid)
        groups = np.unique(sid[rows])
        for f, chunk in enumerate(np.array_split(groups, n_folds)):
            if chunk.size:
                folds[f].append(rows[np.isin(sid[rows], chunk)])
    masks = []
    for f in range(n_folds):
        m = np.zeros(data.n_rows, dtype=bool)
        for rows in folds[f]:
            m[rows] = True
        masks.append(m)

    merged = []
    pending = None
    for m in masks:
        if pending is not None:
            m = m | pending
            pending = None
        if not m.any() or data.z[m].sum() == 0:
            warnings.warn("cross-validation fold with no transitions merged into its neighbor")
            pending = m
            continue
        merged.append(m)
    if pending is not None:
        if not merged:
            raise InputError("no usable cross-validation folds")
        warnings.warn("cross-validation fold with no transitions merged into its neighbor")
        merged[-1] = merged[-1] | pending
    return merged


def cross_validate(data, penalty: PenaltySpec, n_folds: int = 5) -> CvResult:
    """Choose the penalty weight by blocked cross-validation.

    Folds are contiguous sojourn blocks within each path id, so held-out
    rows are temporally coherent. The score is the held-out weighted
    Poisson deviance averaged over folds; ties prefer the larger penalty.
    """
    if penalty.lam_grid is None:
        raise InputError("cross_validate needs a penalty with lam_grid")
    if n_folds < 2:
        raise InputError("need at least two folds")
    grid = np.asarray(penalty.lam_grid, dtype=float)
    masks = _blocked_folds(data, n_folds)
    scores = np.empty((len(masks), grid.size))
    for f, mask in enumerate(masks):
        train = data.subset(~mask)
        test = data.subset(mask)
        if penalty.kind == "quadratic":
            start = None
            for i, lam in enumerate(grid):
                fit = fit_poisson_weighted(train, penalty.with_lam(lam), start=start)
                start = fit.coefficients
                scores[f, i] = _deviance(test, fit.coefficients)
        elif penalty.kind == "l1":
            path = fit_lasso(train, grid, penalized=penalty.penalized)
            for i, fit in enumerate(path):
                scores[f, i] = _deviance(test, fit.coefficients)
        else:
            raise InputError("cross_validate needs a quadratic or l1 penalty")
    mean_scores = scores.mean(axis=0)
    best = 0
    for i in range(1, grid.size):
        if mean_scores[i] < mean_scores[best]:
            best = i
    return CvResult(grid, mean_scores, scores, float(grid[best]), best, len(masks))


# -- tests on coefficients ------------------------------------------------


def wald_tests(fit: FitResult):
    """Two-sided Wald z-tests for each coefficient.

    Returns (z, p) arrays; entries with missing or zero standard errors
    are reported as NaN.
    """
    if fit.standard_errors is None:
        raise InputError("fit carries no standard errors")
    se = fit.standard_errors
    with np.errstate(divide="ignore", invalid="ignore"):
        zval = np.where(se > 0, fit.coefficients / np.where(se > 0, se, 1.0), np.nan)
    pval = np.where(np.isfinite(zval), 2.0 * norm.sf(np.abs(zval)), np.nan)
    return zval, pval


@dataclass
class RubinResult:
    labels: tuple[str, ...]
    estimates: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total_variance: np.ndarray
    n_imputations: int

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(self.total_variance)


def rubin_combine(fits: list[FitResult]) -> RubinResult:
    """Pool per-imputation fits by the multiple-imputation combining rules.

    Point estimate: mean of the estimates. Variance: mean squared standard
    error plus (1 + 1/P) times the between-imputation sample variance.
    """
    if len(fits) < 2:
        raise InputError("pooling needs at least two imputation fits")
    labels = fits[0].labels
    for f in fits[1:]:
        if f.labels != labels:
            raise InputError("imputation fits have mismatched coefficients")
        if f.standard_errors is None:
            raise InputError("imputation fits need standard errors")
    P = len(fits)
    est = np.vstack([f.coefficients for f in fits])
    ses = np.vstack([f.standard_errors for f in fits])
    mean = est.mean(axis=0)
    within = (ses**2).mean(axis=0)
    between = est.var(axis=0, ddof=1)
    total = within + (1.0 + 1.0 / P) * between
    return RubinResult(labels, mean, within, between, total, P)
