"""Data model and marginal-likelihood kernels for the sparse linear model.

The model is y = X beta + eps with eps ~ N(0, sigma2 I_n) and independent
coordinate priors beta_j ~ N(0, gamma_j), where gamma_j = 0 encodes a point
mass at zero.  Integrating beta out leaves y ~ N(0, C) with

    C = sigma2 I_n + sum_{j active} gamma_j x_j x_j'

and everything in this package optimizes the marginal log likelihood

    l(sigma2, gamma) = -1/2 log det C - 1/2 y' C^-1 y.

C is never materialized while the active set is smaller than n: solves and
log determinants go through an |active| x |active| Cholesky factor via the
Woodbury identity and the matrix determinant lemma.  A dense n x n route is
kept as an oracle for tests and as the fallback when the active set is large.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import get_lapack_funcs, solve_triangular

from .exceptions import ConditioningError, InvalidInputError

# gamma below this is treated as exactly zero when forming the active set
ACTIVE_EPS = 1e-12


def _locked(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


def _validated_array(a, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != ndim:
        raise InvalidInputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Response y (n,) and design X (n, p); arrays are copied and locked read-only.

    Columns of X must not be identically zero (such a coordinate has no
    likelihood information and would make the orthogonal closed form and
    column-scale guards degenerate).
    """

    y: np.ndarray
    X: np.ndarray
    n: int = field(init=False)
    p: int = field(init=False)

    def __post_init__(self):
        y = _validated_array(self.y, "y", 1)
        X = _validated_array(self.X, "X", 2)
        if X.shape[0] != y.shape[0]:
            raise InvalidInputError(
                f"X has {X.shape[0]} rows but y has {y.shape[0]} entries"
            )
        n, p = X.shape
        if n < 1 or p < 1:
            raise InvalidInputError(f"X must be non-empty, got shape {X.shape}")
        sq = np.einsum("ij,ij->j", X, X)
        if np.any(sq == 0.0):
            j = int(np.argmin(sq))
            raise InvalidInputError(f"column {j} of X is identically zero")
        object.__setattr__(self, "y", _locked(y))
        object.__setattr__(self, "X", _locked(X))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "p", p)

    @cached_property
    def col_sq_norms(self) -> np.ndarray:
        """Per-column squared norms ||x_j||^2, shape (p,)."""
        return _locked(np.einsum("ij,ij->j", self.X, self.X))


@dataclass(frozen=True)
class HyperParams:
    """Prior variances gamma (p,), entrywise >= 0, and noise variance sigma2 > 0."""

    gamma: np.ndarray
    sigma2: float

    def __post_init__(self):
        gamma = _validated_array(self.gamma, "gamma", 1)
        if np.any(gamma < 0.0):
            j = int(np.argmin(gamma))
            raise InvalidInputError(f"gamma[{j}] = {gamma[j]} is negative")
        sigma2 = float(self.sigma2)
        if not np.isfinite(sigma2) or sigma2 <= 0.0:
            raise InvalidInputError(f"sigma2 must be positive and finite, got {sigma2}")
        object.__setattr__(self, "gamma", _locked(gamma))
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def p(self) -> int:
        return self.gamma.shape[0]

    def support(self, eps: float = ACTIVE_EPS) -> np.ndarray:
        """Sorted indices of the active set {j : gamma_j >= eps}."""
        return np.flatnonzero(self.gamma >= eps)


@dataclass(frozen=True)
class PosteriorMoments:
    """Posterior mean and covariance of beta restricted to the active support.

    mu = V X_A' y and V = (X_A' X_A + sigma2 Gamma_A^-1)^-1; the posterior
    covariance of beta_A is sigma2 * V.  Off-support coordinates are point
    masses at zero and are not represented.
    """

    support: np.ndarray  # sorted active indices, shape (k,)
    mu: np.ndarray       # shape (k,)
    v: np.ndarray        # shape (k, k), symmetric positive definite


@dataclass(frozen=True)
class GroundTruth:
    """A simulated truth: coefficient vector, noise variance, and its support."""

    beta_star: np.ndarray
    sigma_star2: float
    support: np.ndarray = field(init=False)
    s: int = field(init=False)

    def __post_init__(self):
        beta = _validated_array(self.beta_star, "beta_star", 1)
        sigma_star2 = float(self.sigma_star2)
        if not np.isfinite(sigma_star2) or sigma_star2 <= 0.0:
            raise InvalidInputError(f"sigma_star2 must be positive, got {sigma_star2}")
        support = np.flatnonzero(beta != 0.0)
        object.__setattr__(self, "beta_star", _locked(beta))
        object.__setattr__(self, "sigma_star2", sigma_star2)
        object.__setattr__(self, "support", _locked(support).astype(int))
        object.__setattr__(self, "s", int(support.size))


def cholesky_lower(a: np.ndarray, context: str = "matrix",
                   iteration: int | None = None) -> np.ndarray:
    """Lower Cholesky factor via LAPACK potrf, reporting the failing pivot."""
    if a.size == 0:
        return np.zeros_like(a)
    (potrf,) = get_lapack_funcs(("potrf",), (a,))
    c, info = potrf(a, lower=1, clean=1)
    if info > 0:
        raise ConditioningError(
            f"Cholesky factorization of {context} broke down at pivot {info - 1}",
            pivot=info - 1,
            iteration=iteration,
        )
    if info < 0:
        raise InvalidInputError(f"illegal value in argument {-info} of potrf ({context})")
    return c


class CovarianceFactor:
    """Factorized C = sigma2 I_n + X_A diag(g) X_A' for solves and log det.

    Uses M = I_k + (1/sigma2) D^{1/2} X_A' X_A D^{1/2} (k = |A|), so that
    log det C = n log sigma2 + log det M and
    u' C^-1 w = u'w / sigma2 - (B'u)' M^-1 (B'w) / sigma2^2 with B = X_A D^{1/2}.
    """

    def __init__(self, x_active: np.ndarray, gamma_active: np.ndarray,
                 sigma2: float, n: int, context: str = "covariance"):
        self.sigma2 = sigma2
        self.n = n
        self.k = x_active.shape[1] if x_active.ndim == 2 else 0
        if self.k:
            b = x_active * np.sqrt(gamma_active)
            m = b.T @ b / sigma2
            m[np.diag_indices(self.k)] += 1.0
            self._chol = cholesky_lower(m, context=context)
            self._b = b

    def logdet(self) -> float:
        out = self.n * np.log(self.sigma2)
        if self.k:
            out += 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        return out

    def _half_solve(self, u: np.ndarray) -> np.ndarray:
        return solve_triangular(self._chol, self._b.T @ u, lower=True)

    def quad(self, u: np.ndarray, w: np.ndarray | None = None) -> float:
        """u' C^-1 w (w defaults to u)."""
        if w is None:
            w = u
        out = float(u @ w) / self.sigma2
        if self.k:
            hu = self._half_solve(u)
            hw = hu if w is u else self._half_solve(w)
            out -= float(hu @ hw) / self.sigma2 ** 2
        return out

    def quads_against(self, cols: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized (x_j' C^-1 y, x_j' C^-1 x_j) for every column x_j of cols."""
        a = cols.T @ y / self.sigma2
        b = np.einsum("ij,ij->j", cols, cols) / self.sigma2
        if self.k:
            h = solve_triangular(self._chol, self._b.T @ cols, lower=True)
            hy = self._half_solve(y)
            a -= h.T @ hy / self.sigma2 ** 2
            b -= np.einsum("ij,ij->j", h, h) / self.sigma2 ** 2
        return a, b


def _check_shapes(data: Dataset, hp: HyperParams) -> None:
    if hp.p != data.p:
        raise InvalidInputError(f"gamma has {hp.p} entries but X has {data.p} columns")


def log_marginal_likelihood(data: Dataset, hp: HyperParams) -> float:
    """Marginal log likelihood l(sigma2, gamma) = -1/2 (log det C + y' C^-1 y).

    While the active set is smaller than n this goes through the k x k
    posterior precision: log det C via the determinant lemma and
    y' C^-1 y = ||y - X_A mu||^2 / sigma2 + mu' Gamma_A^-1 mu, whose terms
    are nonnegative (the direct y'y-based form cancels catastrophically
    when the fit explains most of a strong signal).  Larger active sets
    fall back to the dense n x n path.
    """
    _check_shapes(data, hp)
    active = hp.support()
    k = active.size
    if k >= data.n:
        return log_marginal_likelihood_dense(data, hp)
    if k == 0:
        return -0.5 * (data.n * np.log(hp.sigma2) + float(data.y @ data.y) / hp.sigma2)
    xa = data.X[:, active]
    ga = hp.gamma[active]
    prec = xa.T @ xa
    prec[np.diag_indices(k)] += hp.sigma2 / ga
    chol = cholesky_lower(prec, context="posterior precision")
    mu = solve_triangular(
        chol.T,
        solve_triangular(chol, xa.T @ data.y, lower=True),
        lower=False,
    )
    logdet_c = ((data.n - k) * np.log(hp.sigma2) + float(np.sum(np.log(ga)))
                + 2.0 * float(np.sum(np.log(np.diag(chol)))))
    resid = data.y - xa @ mu
    return -0.5 * (logdet_c + float(resid @ resid) / hp.sigma2
                   + float(np.sum(mu * mu / ga)))


def log_marginal_likelihood_dense(data: Dataset, hp: HyperParams) -> float:
    """Dense-path variant: materializes C and factors it directly.

    Used as an internal oracle in tests and whenever |active| >= n.
    """
    _check_shapes(data, hp)
    active = hp.support()
    c = hp.sigma2 * np.eye(data.n)
    if active.size:
        xa = data.X[:, active]
        c += (xa * hp.gamma[active]) @ xa.T
    chol = cholesky_lower(c, context="dense marginal covariance")
    half = solve_triangular(chol, data.y, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (logdet + float(half @ half))


def posterior_moments(data: Dataset, hp: HyperParams) -> PosteriorMoments:
    """Posterior mean and scaled covariance of beta on the active support.

    V = (X_A' X_A + sigma2 Gamma_A^-1)^-1 via a Cholesky solve, mu = V X_A' y.
    An empty support yields empty arrays.
    """
    _check_shapes(data, hp)
    active = hp.support()
    k = active.size
    if k == 0:
        return PosteriorMoments(
            support=active, mu=np.zeros(0), v=np.zeros((0, 0))
        )
    xa = data.X[:, active]
    prec = xa.T @ xa
    prec[np.diag_indices(k)] += hp.sigma2 / hp.gamma[active]
    chol = cholesky_lower(prec, context="posterior precision")
    half_inv = solve_triangular(chol, np.eye(k), lower=True)
    v = half_inv.T @ half_inv
    mu = v @ (xa.T @ data.y)
    return PosteriorMoments(support=active, mu=mu, v=v)


def beta_from_gamma(data: Dataset, hp: HyperParams) -> np.ndarray:
    """Posterior-mean coefficient vector: exact zeros off the active support."""
    moments = posterior_moments(data, hp)
    beta = np.zeros(data.p)
    beta[moments.support] = moments.mu
    return beta


def likelihood_gradient_coordinate(data: Dataset, hp: HyperParams, j: int) -> float:
    """Partial derivative of the marginal log likelihood in gamma_j.

    With C_j the marginal covariance built from the active set excluding j,
    u = x_j' C_j^-1 x_j and v = x_j' C_j^-1 y:

        dl/dgamma_j = (v^2 - gamma_j u^2 - u) / (2 (1 + gamma_j u)^2)

    For inactive j this is the one-sided derivative at gamma_j = 0.
    """
    _check_shapes(data, hp)
    if not 0 <= j < data.p:
        raise InvalidInputError(f"coordinate {j} out of range for p = {data.p}")
    active = hp.support()
    others = active[active != j]
    gamma_j = float(hp.gamma[j]) if hp.gamma[j] >= ACTIVE_EPS else 0.0
    factor = CovarianceFactor(
        data.X[:, others], hp.gamma[others], hp.sigma2, data.n,
        context="leave-one-out covariance",
    )
    x_j = data.X[:, j]
    u = factor.quad(x_j)
    v = factor.quad(x_j, data.y)
    return 0.5 * (v * v - gamma_j * u * u - u) / (1.0 + gamma_j * u) ** 2
