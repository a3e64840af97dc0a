"""Gaussian maximum-likelihood discrepancy, its gradient, and pattern refits.

The model covariance is ``Sigma = Sigma0 + L L^T + diag(psi**2)`` where
``Sigma0`` is a fixed positive semidefinite offset (zero unless part of
the structure has already been estimated), ``L`` is a loading matrix with
a prescribed zero pattern and ``psi`` holds unique standard deviations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .hierarchy import LoadingPattern

DEFAULT_TAU = 10.0


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A covariance matrix that must be positive definite is not."""


class RefitError(RuntimeError):
    """The pattern refit did not converge within its iteration budget."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


def _cholesky(mat: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(mat, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc


def logdet_pd(mat: np.ndarray) -> float:
    """Log-determinant of a positive definite matrix."""
    chol = _cholesky(np.asarray(mat, dtype=float))
    return 2.0 * float(np.log(np.diag(chol)).sum())


@dataclass(frozen=True)
class SampleCovariance:
    """A positive definite sample covariance matrix and its sample size."""

    S: np.ndarray
    N: int
    logdet: float = field(init=False, repr=False)

    def __post_init__(self):
        S = np.array(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("covariance must be a square matrix")
        if not np.all(np.isfinite(S)):
            raise ValueError("covariance has non-finite entries")
        scale = max(float(np.abs(S).max()), 1e-300)
        if np.abs(S - S.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        S = 0.5 * (S + S.T)
        if int(self.N) < 1:
            raise ValueError("sample size must be positive")
        ld = logdet_pd(S)
        S.setflags(write=False)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "logdet", ld)

    @property
    def J(self) -> int:
        return self.S.shape[0]

    def subset(self, rows) -> "SampleCovariance":
        rows = np.asarray(rows, dtype=int)
        return SampleCovariance(self.S[np.ix_(rows, rows)], self.N)

    @classmethod
    def from_data(cls, data: np.ndarray, center: bool = True, ddof: int = 0) -> "SampleCovariance":
        """Covariance of an ``N x J`` data matrix (divisor ``N - ddof``)."""
        X = np.asarray(data, dtype=float)
        if X.ndim != 2:
            raise ValueError("data must be a two-dimensional array")
        n = X.shape[0]
        if center:
            X = X - X.mean(axis=0)
        return cls(X.T @ X / (n - ddof), n)


@dataclass(frozen=True)
class ModelParams:
    """Loadings, unique standard deviations and a fixed covariance offset."""

    loadings: np.ndarray
    psi: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        L = np.array(self.loadings, dtype=float)
        if L.ndim == 1:
            L = L[:, None]
        psi = np.array(self.psi, dtype=float).ravel()
        if L.shape[0] != psi.shape[0]:
            raise ValueError("loadings and psi disagree on the number of variables")
        off = None
        if self.offset is not None:
            off = np.array(self.offset, dtype=float)
            if off.shape != (psi.shape[0], psi.shape[0]):
                raise ValueError("offset has the wrong shape")
        for a in (L, psi, off):
            if a is not None:
                a.setflags(write=False)
        object.__setattr__(self, "loadings", L)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "offset", off)

    @property
    def J(self) -> int:
        return self.psi.shape[0]

    def implied_covariance(self) -> np.ndarray:
        return implied_covariance(self.loadings, self.psi, self.offset)


def implied_covariance(loadings, psi, offset=None) -> np.ndarray:
    L = np.asarray(loadings, dtype=float)
    sig = L @ L.T
    sig[np.diag_indices_from(sig)] += np.asarray(psi, dtype=float) ** 2
    if offset is not None:
        sig += offset
    return sig


def discrepancy(sigma_model: np.ndarray, S: np.ndarray, N: float, logdet_s: float | None = None) -> float:
    """``N (log det Sigma + tr(S Sigma^-1) - log det S - J)``.

    Raises :class:`NotPositiveDefiniteError` if ``sigma_model`` is not
    positive definite.
    """
    sigma_model = np.asarray(sigma_model, dtype=float)
    S = np.asarray(S, dtype=float)
    J = S.shape[0]
    chol = _cholesky(sigma_model)
    ld = 2.0 * float(np.log(np.diag(chol)).sum())
    if logdet_s is None:
        logdet_s = logdet_pd(S)
    tr = float(np.trace(linalg.cho_solve((chol, True), S)))
    return float(N) * (ld + tr - logdet_s - J)


def _value_and_full_gradient(L, psi, offset, S, N, logdet_s):
    sig = implied_covariance(L, psi, offset)
    chol = _cholesky(sig)
    inv = linalg.cho_solve((chol, True), np.eye(S.shape[0]))
    ld = 2.0 * float(np.log(np.diag(chol)).sum())
    inv_s = inv @ S
    val = float(N) * (ld + float(np.trace(inv_s)) - logdet_s - S.shape[0])
    G = inv - inv_s @ inv
    G = 0.5 * (G + G.T)
    gL = 2.0 * N * (G @ L)
    gpsi = 2.0 * N * np.diag(G) * psi
    return val, gL, gpsi


def discrepancy_gradient(params: ModelParams, pattern: LoadingPattern, S, N: float):
    """Analytic gradient of the discrepancy.

    Returns ``(g_free, g_psi)`` where ``g_free`` lists the loading
    derivatives at the free entries of ``pattern`` in row-major order
    (``np.nonzero(pattern.mask)`` order) and ``g_psi`` has length ``J``.
    """
    S = np.asarray(getattr(S, "S", S), dtype=float)
    mask = pattern.mask
    L = np.where(mask, params.loadings, 0.0)
    _, gL, gpsi = _value_and_full_gradient(L, params.psi, params.offset, S, N, logdet_pd(S))
    return gL[mask], gpsi


def free_parameter_count(pattern: LoadingPattern) -> int:
    """Free loadings plus one unique variance per variable."""
    return pattern.num_free + pattern.shape[0]


def bic(fit_discrepancy: float, num_free_params: int, N: float) -> float:
    """Discrepancy-based BIC: ``discrepancy + k log N`` (lower is better).

    The discrepancy is the deviance against the saturated model, so this
    differs from ``-2 loglik + k log N`` only by a constant that depends on
    the data alone (see :func:`neg2_loglik`).
    """
    if N < 2:
        raise ValueError("BIC needs N >= 2")
    return float(fit_discrepancy) + int(num_free_params) * math.log(N)


def neg2_loglik(fit_discrepancy: float, cov: SampleCovariance) -> float:
    """Minus twice the Gaussian log-likelihood implied by a discrepancy value."""
    J = cov.J
    return float(fit_discrepancy) + cov.N * (cov.logdet + J + J * math.log(2.0 * math.pi))


def normalize_signs(L: np.ndarray) -> np.ndarray:
    """Flip columns so that each column's first nonzero entry is nonnegative."""
    L = np.array(L, dtype=float)
    for k in range(L.shape[1]):
        nz = np.flatnonzero(L[:, k])
        if nz.size and L[nz[0], k] < 0:
            L[:, k] = -L[:, k]
    return L


@dataclass(frozen=True)
class RefitResult:
    loadings: np.ndarray
    psi: np.ndarray
    discrepancy: float
    converged: bool
    iterations: int
    message: str
    heywood: tuple = ()

    @property
    def unique_variances(self) -> np.ndarray:
        return self.psi ** 2


def refit_mle(
    pattern: LoadingPattern,
    S,
    N: float | None = None,
    tau: float = DEFAULT_TAU,
    offset: np.ndarray | None = None,
    start: ModelParams | None = None,
    rng: np.random.Generator | None = None,
    ftol: float = 1e-9,
    gtol: float = 1e-6,
    max_iter: int = 2000,
    sign_normalize: bool = True,
    raise_on_maxiter: bool = True,
    max_restarts: int = 10,
) -> RefitResult:
    """Minimise the discrepancy over loadings with a fixed zero pattern.

    Free loadings are boxed to ``[-tau, tau]``; ``psi`` is unconstrained
    and reported as ``|psi|``.  Without
    a ``start`` the loadings begin at ``0.5`` on the pattern and
    ``psi = sqrt(diag(S)/2)``; an ``rng`` adds a small jitter.  The result
    is never worse than the supplied start.
    """
    if isinstance(S, SampleCovariance):
        if N is None:
            N = S.N
        logdet_s = S.logdet
        S = S.S
    else:
        S = np.asarray(S, dtype=float)
        logdet_s = logdet_pd(S)
    if N is None:
        raise ValueError("sample size N is required")
    mask = np.asarray(pattern.mask, dtype=bool)
    J, K = mask.shape
    if S.shape != (J, J):
        raise ValueError("pattern and covariance disagree on J")
    nfree = int(mask.sum())

    if start is not None:
        L0 = np.where(mask, start.loadings, 0.0)
        psi0 = np.abs(start.psi)
    else:
        L0 = np.where(mask, 0.5, 0.0)
        if rng is not None:
            L0 = L0 + np.where(mask, rng.uniform(-0.1, 0.1, size=mask.shape), 0.0)
        resid = np.diag(S).copy()
        if offset is not None:
            resid = resid - np.diag(offset)
        psi0 = np.sqrt(np.maximum(resid / 2.0, 0.05))
    x0 = np.concatenate([np.clip(L0[mask], -tau, tau), psi0])

    def unpack(x):
        L = np.zeros((J, K))
        L[mask] = x[:nfree]
        return L, x[nfree:]

    def fun(x):
        L, psi = unpack(x)
        try:
            val, gL, gpsi = _value_and_full_gradient(L, psi, offset, S, N, logdet_s)
        except NotPositiveDefiniteError:
            return np.inf, np.zeros_like(x)
        return val, np.concatenate([gL[mask], gpsi])

    f0, _ = fun(x0)
    # psi is left unbounded (only its square enters the model); a lower bound
    # at zero would make psi = 0 a spurious stationary point.
    bounds = [(-tau, tau)] * nfree + [(None, None)] * J
    x, fval, nit, hit_max, message = x0, float(f0), 0, False, ""
    for _ in range(max_restarts + 1):
        # A trial point outside the positive definite region ends a run
        # early; restarting from the last accepted iterate resumes the descent.
        res = optimize.minimize(
            fun, x, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": max_iter - nit, "ftol": ftol, "gtol": gtol, "maxcor": 10},
        )
        nit += int(res.nit)
        message = str(res.message)
        improved = np.isfinite(res.fun) and res.fun < fval
        if improved:
            progress = 1.0 if not np.isfinite(fval) else \
                (fval - float(res.fun)) / max(abs(fval), abs(float(res.fun)), 1.0)
            x, fval = res.x, float(res.fun)
        hit_max = res.status == 1 or nit >= max_iter
        if not improved or hit_max or progress <= ftol:
            break
        if np.abs(res.jac).max() <= gtol:
            break
    L, psi = unpack(x)
    if sign_normalize:
        L = normalize_signs(L)
    out = RefitResult(
        loadings=L,
        psi=np.abs(psi),
        discrepancy=fval,
        converged=not hit_max,
        iterations=nit,
        message=message,
        heywood=tuple(int(i) for i in np.flatnonzero(psi ** 2 <= 1e-6 * np.diag(S))),
    )
    if hit_max and raise_on_maxiter:
        raise RefitError(f"refit did not converge in {max_iter} iterations", out)
    return out
