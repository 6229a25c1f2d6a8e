"""L1-penalized least squares via coordinate descent, with k-fold CV.

Solves min_beta (2n)^-1 ||y - X beta||^2 + lambda ||beta||_1 over a
geometric lambda path with warm starts.  Columns are scaled to
||x_j||^2 = n before fitting (coefficients are reported on the original
scale), so each coordinate update is the unit-curvature soft threshold

    beta_j <- S(beta_j + <x_j, r> / n, lambda),    r = y - X beta.

Sweeps cycle over the current support until stable, then over all
coordinates; a solution is accepted only once the exact KKT residuals at
the final iterate clear kkt_tol, so path points are stationary to that
tolerance rather than merely fixed under the sweep heuristic.  Both
tolerances are scaled by the response RMS (floored at one), keeping the
stopping rule relative on strong-signal data while reducing to the
absolute reading at unit scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .exceptions import ConvergenceError, InvalidInputError
from .model import Dataset, _locked


@dataclass(frozen=True)
class LassoConfig:
    """Path, sweep, and cross-validation knobs for the coordinate solver."""

    n_lambda: int = 100
    lambda_min_ratio: float = 1e-3
    k_folds: int = 10
    cd_tol: float = 1e-7        # per-sweep coefficient-change stop, x response RMS
    cd_max_sweeps: int = 10_000
    standardize: bool = True
    kkt_tol: float = 1e-7       # stationarity certificate, x response RMS

    def __post_init__(self):
        if self.n_lambda < 1:
            raise InvalidInputError(f"n_lambda must be positive, got {self.n_lambda}")
        if not 0.0 < self.lambda_min_ratio < 1.0:
            raise InvalidInputError(
                f"lambda_min_ratio must lie in (0, 1), got {self.lambda_min_ratio}"
            )
        if self.k_folds < 2:
            raise InvalidInputError(f"k_folds must be at least 2, got {self.k_folds}")
        if self.cd_tol <= 0.0 or self.kkt_tol <= 0.0:
            raise InvalidInputError("cd_tol and kkt_tol must be positive")
        if self.cd_max_sweeps < 1:
            raise InvalidInputError(
                f"cd_max_sweeps must be positive, got {self.cd_max_sweeps}"
            )


@dataclass(frozen=True)
class LassoFit:
    """Solutions along a descending lambda path, plus CV fields when selected."""

    lambda_path: np.ndarray
    beta_path: np.ndarray
    cv_mean: np.ndarray | None = None
    cv_se: np.ndarray | None = None
    selected_lambda: float | None = None
    beta_hat: np.ndarray | None = None

    def __post_init__(self):
        path = _locked(self.lambda_path)
        if path.ndim != 1 or path.size == 0:
            raise InvalidInputError("lambda_path must be a non-empty vector")
        if np.any(path <= 0.0) or np.any(np.diff(path) > 0.0):
            raise InvalidInputError("lambda_path must be positive and non-increasing")
        betas = _locked(self.beta_path)
        if betas.ndim != 2 or betas.shape[1] != path.size:
            raise InvalidInputError(
                f"beta_path must be p x {path.size}, got shape {betas.shape}"
            )
        object.__setattr__(self, "lambda_path", path)
        object.__setattr__(self, "beta_path", betas)
        if self.cv_mean is not None:
            object.__setattr__(self, "cv_mean", _locked(self.cv_mean))
        if self.cv_se is not None:
            object.__setattr__(self, "cv_se", _locked(self.cv_se))
        if self.beta_hat is not None:
            object.__setattr__(self, "beta_hat", _locked(self.beta_hat))


def soft_threshold(z: float, t: float) -> float:
    """sign(z) * max(|z| - t, 0)."""
    if t < 0.0:
        raise InvalidInputError(f"threshold must be nonnegative, got {t}")
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True, nogil=True)
def _cd_sweeps(xs, r, beta, lam, idx, tol, max_sweeps):
    """Cyclic coordinate sweeps over idx, in place on beta and r = y - xs beta.

    Runs until the largest coefficient change in a sweep drops below tol or
    max_sweeps is hit; returns (sweeps run, last max change).  Each update
    minimizes the objective exactly in its coordinate, so the objective is
    non-increasing across sweeps.
    """
    n = xs.shape[0]
    inv_n = 1.0 / n
    sweeps = 0
    delta = np.inf
    while sweeps < max_sweeps:
        sweeps += 1
        delta = 0.0
        for t in range(idx.shape[0]):
            j = idx[t]
            acc = 0.0
            for i in range(n):
                acc += xs[i, j] * r[i]
            z = beta[j] + acc * inv_n
            if z > lam:
                new = z - lam
            elif z < -lam:
                new = z + lam
            else:
                new = 0.0
            diff = beta[j] - new
            if diff != 0.0:
                for i in range(n):
                    r[i] += xs[i, j] * diff
                beta[j] = new
                if abs(diff) > delta:
                    delta = abs(diff)
        if delta < tol:
            break
    return sweeps, delta


def _kkt_violation(xs, r, beta, lam):
    g = xs.T @ r / xs.shape[0]
    viol = np.where(
        beta != 0.0,
        np.abs(g - lam * np.sign(beta)),
        np.maximum(np.abs(g) - lam, 0.0),
    )
    return float(viol.max())


def _solve_at(xs, r, beta, lam, all_idx, cfg, y_scale) -> int:
    """Drive sweeps at one lambda until the exact KKT residual clears tolerance.

    y_scale = max(1, rms(y)) makes cd_tol and kkt_tol relative to the
    response scale; gradients and coefficients both inherit that scale, so
    absolute thresholds would demand ever more sweeps as ||y|| grows.
    """
    tol = cfg.cd_tol * y_scale
    kkt_tol = cfg.kkt_tol * y_scale
    total = 0
    while True:
        support = np.flatnonzero(beta).astype(np.int64)
        if support.size:
            ran, _ = _cd_sweeps(xs, r, beta, lam, support, tol,
                                cfg.cd_max_sweeps - total)
            total += ran
        if total < cfg.cd_max_sweeps:
            ran, delta = _cd_sweeps(xs, r, beta, lam, all_idx, tol, 1)
            total += ran
            if delta < tol and _kkt_violation(xs, r, beta, lam) <= kkt_tol:
                return total
        if total >= cfg.cd_max_sweeps:
            raise ConvergenceError(
                f"coordinate descent did not converge at lambda = {lam:.6g} "
                f"after {total} sweeps",
                lam=float(lam), sweeps=total,
            )


def _standardized(data: Dataset, cfg: LassoConfig):
    if cfg.standardize:
        scale = np.sqrt(data.col_sq_norms / data.n)
    else:
        scale = np.ones(data.p)
    return np.asfortranarray(data.X / scale), scale


def cd_fit_path(data: Dataset, cfg: LassoConfig | None = None,
                lambda_path: np.ndarray | None = None) -> LassoFit:
    """Warm-started path fit; lambda_path defaults to a geometric grid.

    The grid runs from lambda_max = max_j |<x_j, y>| / n (standardized scale)
    down to lambda_max * lambda_min_ratio.  While the iterate is still zero,
    each lambda is first checked against the gradient sup norm, which both
    certifies beta = 0 exactly and keeps the top of the path cheap.
    """
    cfg = cfg or LassoConfig()
    xs, scale = _standardized(data, cfg)
    n, p = xs.shape
    y_scale = max(1.0, float(np.sqrt(np.mean(data.y ** 2))))
    if lambda_path is None:
        lam_max = float(np.max(np.abs(xs.T @ data.y / n)))
        # y orthogonal to every column: any positive lambda gives beta = 0
        lam_max = max(lam_max, np.finfo(float).tiny)
        path = np.geomspace(lam_max, lam_max * cfg.lambda_min_ratio, cfg.n_lambda)
    else:
        path = np.asarray(lambda_path, dtype=float)
    betas = np.empty((p, path.shape[0]))
    beta = np.zeros(p)
    r = data.y.copy()
    all_idx = np.arange(p, dtype=np.int64)
    for l, lam in enumerate(path):
        if not np.any(beta) and float(np.max(np.abs(xs.T @ r / n))) <= lam:
            betas[:, l] = 0.0
            continue
        _solve_at(xs, r, beta, lam, all_idx, cfg, y_scale)
        betas[:, l] = beta / scale
    return LassoFit(lambda_path=path, beta_path=betas)


def cv_select(data: Dataset, cfg: LassoConfig | None = None, seed: int = 0) -> LassoFit:
    """k-fold CV over the full-data path; beta_hat at the minimizing lambda.

    Rows are split into k near-equal blocks of a seeded permutation.  Every
    training fit is evaluated on the shared full-data lambda grid, the mean
    squared held-out error selects lambda (first argmin on the descending
    path, so ties go to the larger lambda), and beta_hat is the full-data
    path solution there.
    """
    cfg = cfg or LassoConfig()
    if cfg.k_folds > data.n:
        raise InvalidInputError(
            f"k_folds = {cfg.k_folds} exceeds the number of rows n = {data.n}"
        )
    full = cd_fit_path(data, cfg)
    path = full.lambda_path
    rng = np.random.default_rng(np.random.Philox(np.random.SeedSequence(seed)))
    perm = rng.permutation(data.n)
    blocks = np.array_split(perm, cfg.k_folds)
    errors = np.empty((cfg.k_folds, path.shape[0]))
    for f, test_idx in enumerate(blocks):
        train = np.ones(data.n, dtype=bool)
        train[test_idx] = False
        fold_fit = cd_fit_path(
            Dataset(y=data.y[train], X=data.X[train]), cfg, lambda_path=path
        )
        pred = data.X[test_idx] @ fold_fit.beta_path
        errors[f] = np.mean((data.y[test_idx, None] - pred) ** 2, axis=0)
    cv_mean = errors.mean(axis=0)
    cv_se = errors.std(axis=0, ddof=1) / np.sqrt(cfg.k_folds)
    sel = int(np.argmin(cv_mean))
    return LassoFit(
        lambda_path=path,
        beta_path=full.beta_path,
        cv_mean=cv_mean,
        cv_se=cv_se,
        selected_lambda=float(path[sel]),
        beta_hat=full.beta_path[:, sel],
    )
