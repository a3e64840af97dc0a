"""Compiled inner loops for the augmented-Lagrangian subproblem.

Parameter vectors are laid out as the row-major ``m x p`` loading matrix
followed by the ``m`` unique standard deviations.  Block columns are
``1 .. c*d`` (column 0 is the general column of the subproblem).
"""

import numpy as np
from numba import njit

_STATUS_GTOL = 0
_STATUS_FTOL = 1
_STATUS_MAXITER = 2
_STATUS_LINESEARCH = 3


@njit(cache=True, nogil=True)
def _cholesky_inverse(sig):
    """Return ``(log det, inverse)`` of an SPD matrix, or ``(nan, sig)`` if not PD."""
    m = sig.shape[0]
    low = np.zeros((m, m))
    for j in range(m):
        s = sig[j, j]
        for k in range(j):
            s -= low[j, k] * low[j, k]
        if not s > 0.0:
            return np.nan, sig
        ljj = np.sqrt(s)
        low[j, j] = ljj
        for i in range(j + 1, m):
            t = sig[i, j]
            for k in range(j):
                t -= low[i, k] * low[j, k]
            low[i, j] = t / ljj
    logdet = 0.0
    for i in range(m):
        logdet += 2.0 * np.log(low[i, i])
    # invert the triangular factor by forward substitution
    linv = np.zeros((m, m))
    for j in range(m):
        linv[j, j] = 1.0 / low[j, j]
        for i in range(j + 1, m):
            t = 0.0
            for k in range(j, i):
                t -= low[i, k] * linv[k, j]
            linv[i, j] = t / low[i, i]
    return logdet, linv.T @ linv


@njit(cache=True, nogil=True)
def discrepancy_value_grad(x, s_mat, sig0, n_obs, logdet_s, p, grad):
    """Discrepancy ``N(log|Sigma| + tr(S Sigma^-1) - log|S| - m)`` and its gradient."""
    m = s_mat.shape[0]
    lam = x[: m * p].reshape(m, p)
    psi = x[m * p:]
    sig = sig0 + lam @ lam.T
    for i in range(m):
        sig[i, i] += psi[i] * psi[i]
    logdet, sinv = _cholesky_inverse(sig)
    if np.isnan(logdet):
        return np.inf
    sinv_s = sinv @ s_mat
    tr = 0.0
    for i in range(m):
        tr += sinv_s[i, i]
    g = sinv - sinv_s @ sinv
    glam = g @ lam
    two_n = 2.0 * n_obs
    for i in range(m):
        for j in range(p):
            grad[i * p + j] = two_n * glam[i, j]
        grad[m * p + i] = two_n * g[i, i] * psi[i]
    return n_obs * (logdet + tr - logdet_s - m)


@njit(cache=True, nogil=True)
def augmented_value_grad(x, s_mat, sig0, n_obs, logdet_s, c, d, beta, penalty, grad):
    """Discrepancy plus multiplier and quadratic terms over cross-block products.

    ``beta`` has shape ``(m, c*d, c*d)`` and is zero on within-block entries;
    each unordered pair of cross-block columns contributes once.
    """
    m = s_mat.shape[0]
    p = 1 + c * d
    f = discrepancy_value_grad(x, s_mat, sig0, n_obs, logdet_s, p, grad)
    if not np.isfinite(f) or c < 2:
        return f
    width = c * d
    q = np.empty(c)
    extra = 0.0
    for i in range(m):
        base = i * p + 1
        total = 0.0
        for s in range(c):
            acc = 0.0
            for j in range(s * d, (s + 1) * d):
                a = x[base + j]
                acc += a * a
            q[s] = acc
            total += acc
        sq = 0.0
        for s in range(c):
            sq += q[s] * q[s]
        extra += 0.25 * penalty * (total * total - sq)
        bi = beta[i]
        for j in range(width):
            a = x[base + j]
            bj = 0.0
            for k in range(width):
                bj += bi[j, k] * x[base + k]
            extra += 0.5 * bj * a
            grad[base + j] += penalty * a * (total - q[j // d]) + bj
    return f + extra


@njit(cache=True, nogil=True)
def constraint_norm(x, m, c, d):
    """Euclidean norm of all cross-block products ``lambda_ij * lambda_ij'``."""
    p = 1 + c * d
    acc = 0.0
    q = np.empty(c)
    for i in range(m):
        total = 0.0
        for s in range(c):
            t = 0.0
            for j in range(s * d, (s + 1) * d):
                a = x[i * p + 1 + j]
                t += a * a
            q[s] = t
            total += t
        sq = 0.0
        for s in range(c):
            sq += q[s] * q[s]
        acc += 0.5 * (total * total - sq)
    return np.sqrt(max(acc, 0.0))


@njit(cache=True, nogil=True)
def _evaluate(x, s_mat, sig0, n_obs, logdet_s, c, d, beta, penalty, p, grad):
    if c >= 2:
        return augmented_value_grad(x, s_mat, sig0, n_obs, logdet_s, c, d, beta, penalty, grad)
    return discrepancy_value_grad(x, s_mat, sig0, n_obs, logdet_s, p, grad)


@njit(cache=True, nogil=True)
def minimize_lbfgs(x0, lower, upper, s_mat, sig0, n_obs, logdet_s, c, d, p, beta,
                   penalty, gtol, ftol, maxiter, memory):
    """Projected L-BFGS with backtracking Armijo search on the (augmented) discrepancy.

    Coordinates with ``lower == upper`` stay fixed, which is how structural
    zeros are imposed.  With ``c < 2`` the plain discrepancy over an
    ``m x p`` loading matrix is minimized.
    Returns ``(x, f, n_iter, n_eval, status)``.
    """
    n = x0.size
    x = np.minimum(np.maximum(x0, lower), upper)
    g = np.empty(n)
    f = _evaluate(x, s_mat, sig0, n_obs, logdet_s, c, d, beta, penalty, p, g)
    n_eval = 1
    if not np.isfinite(f):
        return x, f, 0, n_eval, _STATUS_LINESEARCH
    s_hist = np.zeros((memory, n))
    y_hist = np.zeros((memory, n))
    rho = np.zeros(memory)
    alpha = np.zeros(memory)
    n_hist = 0
    head = 0
    x_new = np.empty(n)
    g_new = np.empty(n)
    direction = np.empty(n)
    status = _STATUS_MAXITER
    it = 0
    while it < maxiter:
        # projected gradient test
        pg = 0.0
        for i in range(n):
            gi = g[i]
            if lower[i] == upper[i]:
                continue
            if x[i] <= lower[i] and gi > 0.0:
                continue
            if x[i] >= upper[i] and gi < 0.0:
                continue
            if abs(gi) > pg:
                pg = abs(gi)
        if pg <= gtol:
            status = _STATUS_GTOL
            break
        # two-loop recursion
        for i in range(n):
            direction[i] = -g[i]
        for back in range(n_hist):
            k = (head - 1 - back) % memory
            a = 0.0
            for i in range(n):
                a += s_hist[k, i] * direction[i]
            a *= rho[k]
            alpha[k] = a
            for i in range(n):
                direction[i] -= a * y_hist[k, i]
        if n_hist > 0:
            k = (head - 1) % memory
            yy = 0.0
            for i in range(n):
                yy += y_hist[k, i] * y_hist[k, i]
            scale = 1.0 / (rho[k] * yy)
            for i in range(n):
                direction[i] *= scale
        for fwd in range(n_hist):
            k = (head - n_hist + fwd) % memory
            b = 0.0
            for i in range(n):
                b += y_hist[k, i] * direction[i]
            b *= rho[k]
            for i in range(n):
                direction[i] += (alpha[k] - b) * s_hist[k, i]
        slope = 0.0
        for i in range(n):
            if lower[i] == upper[i]:
                direction[i] = 0.0
            elif x[i] <= lower[i] and direction[i] < 0.0:
                direction[i] = 0.0
            elif x[i] >= upper[i] and direction[i] > 0.0:
                direction[i] = 0.0
            slope += direction[i] * g[i]
        if not slope < 0.0:
            # not a descent direction: fall back to projected steepest descent
            n_hist = 0
            slope = 0.0
            for i in range(n):
                di = -g[i]
                if lower[i] == upper[i]:
                    di = 0.0
                elif x[i] <= lower[i] and di < 0.0:
                    di = 0.0
                elif x[i] >= upper[i] and di > 0.0:
                    di = 0.0
                direction[i] = di
                slope += di * g[i]
        step = 1.0
        if n_hist == 0:
            dmax = 0.0
            for i in range(n):
                if abs(direction[i]) > dmax:
                    dmax = abs(direction[i])
            if dmax > 0.0:
                step = min(1.0, 0.1 / dmax)
        accepted = False
        f_new = np.inf
        for _ in range(60):
            decrease = 0.0
            for i in range(n):
                xi = x[i] + step * direction[i]
                if xi < lower[i]:
                    xi = lower[i]
                elif xi > upper[i]:
                    xi = upper[i]
                x_new[i] = xi
                decrease += g[i] * (xi - x[i])
            f_new = _evaluate(x_new, s_mat, sig0, n_obs, logdet_s, c, d, beta, penalty, p, g_new)
            n_eval += 1
            if np.isfinite(f_new) and f_new <= f + 1e-4 * decrease:
                accepted = True
                break
            if np.isfinite(f_new):
                # safeguarded quadratic interpolation
                denom = 2.0 * (f_new - f - step * slope)
                trial = -slope * step * step / denom if denom > 0.0 else 0.5 * step
                step = min(max(trial, 0.1 * step), 0.5 * step)
            else:
                step *= 0.25
        if not accepted:
            if n_hist > 0:
                n_hist = 0
                it += 1
                continue
            status = _STATUS_LINESEARCH
            break
        sy = 0.0
        yy = 0.0
        for i in range(n):
            si = x_new[i] - x[i]
            yi = g_new[i] - g[i]
            s_hist[head, i] = si
            y_hist[head, i] = yi
            sy += si * yi
            yy += yi * yi
        if sy > 1e-10 * yy and sy > 0.0:
            rho[head] = 1.0 / sy
            head = (head + 1) % memory
            if n_hist < memory:
                n_hist += 1
        f_old = f
        for i in range(n):
            x[i] = x_new[i]
            g[i] = g_new[i]
        f = f_new
        it += 1
        if f_old - f <= ftol * max(abs(f_old), abs(f), 1.0):
            status = _STATUS_FTOL
            break
    return x, f, it, n_eval, status
