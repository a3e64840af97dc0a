"""Augmented Lagrangian search for a block-sparse child loading structure.

For one parent factor with ``m`` variables the subproblem has a loading
matrix with ``1 + c*d`` columns: column 0 is the parent and columns
``1 + s*d .. (s+1)*d`` form block ``s``.  Every row may load on at most
one block, which is written as the bilinear constraints
``lambda_ij * lambda_ij' = 0`` for columns ``j, j'`` in different blocks.
The method alternates a box-constrained quasi-Newton solve of the
augmented objective with multiplier and penalty updates, and the block
membership of each row is read off the converged loadings.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .hierarchy import BlockPartition, AmbiguousRowError, partition_from_loading
from .objective import DEFAULT_TAU, SampleCovariance, logdet_pd

log = logging.getLogger(__name__)


class ALMFailure(RuntimeError):
    """No start produced a converged solution."""

    def __init__(self, message, attempts=()):
        super().__init__(message)
        self.attempts = list(attempts)


@dataclass(frozen=True)
class ALMConfig:
    """Settings of the augmented Lagrangian search.

    ``initial_penalty`` and the inner gradient tolerances are expressed per
    observation: the solver multiplies them by ``N`` because the
    discrepancy itself scales with ``N``.
    """

    c_theta: float = 0.25
    c_sigma: float = 10.0
    delta1: float = 0.01
    delta2: float = 0.01
    max_iterations: int = 100
    max_restarts: int = 5
    num_starts: int = 100
    min_c4_solutions: int = 50
    initial_penalty: float = 1.0
    tau: float = DEFAULT_TAU
    inner_gtol_early: float = 1e-4
    inner_gtol_late: float = 1e-6
    late_switch: float = 1e-2
    inner_ftol: float = 1e-12
    inner_max_iter: int = 150
    memory: int = 10
    min_block_size: int = 3
    abandon_h: float = 0.1
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.c_theta < 1.0:
            raise ValueError("c_theta must lie in (0, 1)")
        if not self.c_sigma > 1.0:
            raise ValueError("c_sigma must exceed 1")
        for name in ("delta1", "delta2", "initial_penalty", "tau",
                     "inner_gtol_early", "inner_gtol_late", "late_switch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("max_iterations", "num_starts", "min_c4_solutions", "inner_max_iter", "memory"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be nonnegative")


@dataclass(frozen=True)
class ALMSolution:
    """Outcome of one augmented Lagrangian run.

    ``partition`` holds the nonempty blocks only, so it can have fewer than
    ``c`` blocks when the run collapsed; such a solution never satisfies
    the size check.
    """

    loadings: np.ndarray
    psi: np.ndarray
    partition: BlockPartition | None
    objective: float
    converged: bool
    satisfies_c4: bool
    iterations: int
    c: int
    d: int
    penalty: float
    max_h: float
    constraint_norms: tuple = ()
    ambiguous_rows: tuple = ()
    restarts: int = 0
    abandoned: bool = False
    message: str = ""

    @property
    def block_sizes(self) -> tuple:
        return () if self.partition is None else self.partition.sizes


@dataclass(frozen=True)
class MultiStartResult:
    best: ALMSolution
    attempts: tuple
    rounds: int
    num_valid: int
    degraded: bool


def h_second_largest(values) -> float:
    """Second largest entry of a vector, counting ties (``h(x, x) = x``)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise ValueError("h needs at least two values")
    return float(np.partition(v, -2)[-2])


def block_maxima(lam: np.ndarray, c: int, d: int) -> np.ndarray:
    """``m x c`` array of the largest absolute loading of each row in each block."""
    lam = np.asarray(lam, dtype=float)
    return np.abs(lam[:, 1:]).reshape(lam.shape[0], c, d).max(axis=2)


def _cross_mask(c: int, d: int) -> np.ndarray:
    cross = np.ones((c * d, c * d))
    for s in range(c):
        cross[s * d:(s + 1) * d, s * d:(s + 1) * d] = 0.0
    return cross


def augmented_objective(lam, psi, beta, c_pen, sigma0, S, N, c: int, d: int) -> float:
    """Discrepancy plus multiplier and quadratic penalty terms.

    ``beta`` is an ``m x cd x cd`` symmetric tensor over the block columns
    (entries inside a block are ignored).  Each unordered cross-block pair
    ``(j, j')`` in row ``i`` adds ``beta_ijj' a b + c_pen/2 (a b)^2`` where
    ``a, b`` are the two loadings.  Returns ``inf`` when the implied
    covariance is not positive definite.
    """
    lam = np.asarray(lam, dtype=float)
    S = np.asarray(getattr(S, "S", S), dtype=float)
    m = S.shape[0]
    if lam.shape != (m, 1 + c * d):
        raise ValueError("loading matrix has the wrong shape")
    sig0 = np.zeros((m, m)) if sigma0 is None else np.asarray(sigma0, dtype=float)
    beta = np.zeros((m, c * d, c * d)) if beta is None else np.asarray(beta, dtype=float)
    beta = beta * _cross_mask(c, d)
    x = np.concatenate([lam.ravel(), np.asarray(psi, dtype=float)])
    grad = np.empty_like(x)
    return float(_kernels.augmented_value_grad(
        x, S, sig0, float(N), logdet_pd(S), c, d, beta, float(c_pen), grad))


def random_start(m: int, c: int, d: int, S: np.ndarray, rng: np.random.Generator,
                 sigma0: np.ndarray | None = None):
    """Uniform(-1, 1) loadings and ``psi = sqrt(max(diag(S)/2, 0.05))``."""
    lam = rng.uniform(-1.0, 1.0, size=(m, 1 + c * d))
    psi = np.sqrt(np.maximum(np.diag(S) / 2.0, 0.05))
    return lam, psi


def _classify(lam, c, d, delta2, min_block):
    """Partition, C4 flag and ambiguous rows from a loading matrix."""
    m = lam.shape[0]
    ambiguous = ()
    try:
        part = partition_from_loading(lam, c, d, delta2)
        return part, part.satisfies_min_size(min_block), ambiguous
    except AmbiguousRowError:
        pass
    except ValueError:
        pass
    labels = block_maxima(lam, c, d).argmax(axis=1)
    bm = block_maxima(lam, c, d)
    ambiguous = tuple(
        int(i) for i in range(m) if (bm[i] >= delta2).sum() != 1
    )
    if ambiguous:
        log.debug("rows %s assigned to their largest block", list(ambiguous))
    groups = [tuple(np.flatnonzero(labels == s).tolist()) for s in range(c)]
    groups = [g for g in groups if g]
    part = BlockPartition(tuple(groups), m)
    ok = part.num_blocks == c and part.satisfies_min_size(min_block)
    return part, ok, ambiguous


def next_penalty(norm: float, prev_norm: float, penalty: float, config: ALMConfig) -> float:
    """Multiply the penalty by ``c_sigma`` unless the constraint norm shrank by ``c_theta``."""
    return penalty * config.c_sigma if norm > config.c_theta * prev_norm else penalty


def _sizes_ok(bm: np.ndarray, c: int, min_block: int) -> bool:
    sizes = np.bincount(bm.argmax(axis=1), minlength=c)
    return bool(sizes.min() >= min_block)


def alm_run(c: int, d: int, sigma0, S, N, start, config: ALMConfig = ALMConfig(),
            penalty: float | None = None) -> ALMSolution:
    """Run the augmented Lagrangian iteration from one start.

    ``start`` is ``(loadings, psi)``.  ``penalty`` overrides the initial
    penalty (used when warm-restarting).  Multipliers always start at zero.
    """
    if isinstance(S, SampleCovariance):
        N = S.N if N is None else N
        S = S.S
    S = np.asarray(S, dtype=float)
    m = S.shape[0]
    if c < 2:
        raise ValueError("alm_run needs c >= 2")
    if d < 1:
        raise ValueError("d must be at least 1")
    if m < c:
        raise ValueError("fewer rows than blocks")
    p = 1 + c * d
    sig0 = np.zeros((m, m)) if sigma0 is None else np.asarray(sigma0, dtype=float)
    logdet_s = logdet_pd(S)
    lam0, psi0 = start
    lam0 = np.asarray(lam0, dtype=float)
    if lam0.shape != (m, p):
        raise ValueError(f"start loadings must be {m} x {p}")
    tau = config.tau
    x = np.concatenate([np.clip(lam0, -tau, tau).ravel(), np.asarray(psi0, dtype=float)])
    lower = np.concatenate([np.full(m * p, -tau), np.full(m, -np.inf)])
    upper = np.concatenate([np.full(m * p, tau), np.full(m, np.inf)])
    cross = _cross_mask(c, d)
    beta = np.zeros((m, c * d, c * d))
    cpen = float(config.initial_penalty * N if penalty is None else penalty)
    n_obs = float(N)
    prev_norm = _kernels.constraint_norm(x, m, c, d)
    norms = []
    scale = math.sqrt(m * (2 + d))
    converged = False
    abandoned = False
    status_msg = ""
    it = 0
    max_h = np.inf
    for it in range(1, config.max_iterations + 1):
        gtol = config.inner_gtol_late if prev_norm < config.late_switch else config.inner_gtol_early
        xn, f, _, _, status = _kernels.minimize_lbfgs(
            x, lower, upper, S, sig0, n_obs, logdet_s, c, d, p, beta, cpen,
            gtol * n_obs, config.inner_ftol, config.inner_max_iter, config.memory)
        if not np.isfinite(f):
            status_msg = "inner solver left the positive definite region"
            break
        A = xn[:m * p].reshape(m, p)[:, 1:]
        beta += cpen * (A[:, :, None] * A[:, None, :]) * cross
        cur = _kernels.constraint_norm(xn, m, c, d)
        norms.append(float(cur))
        cpen = next_penalty(cur, prev_norm, cpen, config)
        prev_norm = cur
        change = float(np.linalg.norm(xn - x)) / scale
        bm = np.abs(A).reshape(m, c, d).max(axis=2)
        max_h = float(np.sort(bm, axis=1)[:, -2].max())
        x = xn
        if change < config.delta1 and max_h < config.delta2:
            converged = True
            break
        if max_h < config.abandon_h and not _sizes_ok(bm, c, config.min_block_size):
            abandoned = True
            break
    lam = x[:m * p].reshape(m, p).copy()
    psi = np.abs(x[m * p:])
    part, ok, amb = _classify(lam, c, d, config.delta2, config.min_block_size)
    try:
        obj = float(_kernels.discrepancy_value_grad(
            x, S, sig0, n_obs, logdet_s, p, np.empty_like(x)))
    except Exception:  # pragma: no cover - defensive
        obj = np.inf
    return ALMSolution(
        loadings=lam, psi=psi, partition=part, objective=obj,
        converged=converged, satisfies_c4=bool(converged and ok),
        iterations=it, c=c, d=d, penalty=cpen, max_h=max_h,
        constraint_norms=tuple(norms), ambiguous_rows=amb, abandoned=abandoned,
        message=status_msg or ("converged" if converged else
                               "abandoned: partition cannot pass the size check" if abandoned
                               else "iteration limit reached"),
    )


def _solve_one(c, d, sig0, S, N, config, seed_seq, start=None):
    if start is None:
        start = random_start(S.shape[0], c, d, S, np.random.default_rng(seed_seq), sig0)
    sol = alm_run(c, d, sig0, S, N, start, config)
    restarts = 0
    while not sol.converged and not sol.abandoned and restarts < config.max_restarts and np.isfinite(sol.objective):
        restarts += 1
        sol = alm_run(c, d, sig0, S, N, (sol.loadings, sol.psi), config, penalty=sol.penalty)
    if restarts:
        sol = _replace(sol, restarts=restarts)
    return sol


def _replace(sol: ALMSolution, **kw) -> ALMSolution:
    from dataclasses import replace
    return replace(sol, **kw)


def multi_start_solve(c: int, d: int, sigma0, S, N, config: ALMConfig = ALMConfig(),
                      rng: np.random.Generator | None = None,
                      initial_starts=()) -> MultiStartResult:
    """Best size-valid solution over batches of random starts.

    Each batch runs ``num_starts`` independent starts (unconverged runs are
    warm-restarted up to ``max_restarts`` times).  Batches repeat until
    ``min_c4_solutions`` valid solutions are collected or ``max_restarts``
    extra batches have run.  The valid solution with the smallest
    discrepancy is returned; if none is valid, the best converged solution
    is returned with ``degraded=True``.  Per-start random streams are
    spawned from one draw of ``rng`` per batch, so results do not depend on
    the number of threads.  ``initial_starts`` is an optional list of
    ``(loadings, psi)`` pairs that replace the first random starts of the
    first batch.
    """
    if isinstance(S, SampleCovariance):
        N = S.N if N is None else N
        S = S.S
    S = np.asarray(S, dtype=float)
    m = S.shape[0]
    if config.min_block_size * c > m:
        raise ValueError(f"cannot fit {c} blocks of at least {config.min_block_size} rows in {m} rows")
    rng = np.random.default_rng() if rng is None else rng
    sig0 = np.zeros((m, m)) if sigma0 is None else np.asarray(sigma0, dtype=float)
    valid, converged_all, attempts = [], [], []
    rounds = 0
    for rnd in range(config.max_restarts + 1):
        rounds = rnd + 1
        seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(config.num_starts)
        given = list(initial_starts) if rnd == 0 else []
        jobs = [(ss, given[i] if i < len(given) else None) for i, ss in enumerate(seeds)]
        solve = lambda job: _solve_one(c, d, sig0, S, N, config, job[0], job[1])
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                sols = list(pool.map(solve, jobs))
        else:
            sols = [solve(job) for job in jobs]
        for i, sol in enumerate(sols):
            attempts.append({
                "round": rnd, "start": i, "converged": sol.converged,
                "c4": sol.satisfies_c4, "objective": sol.objective,
                "iterations": sol.iterations, "restarts": sol.restarts,
                "max_h": sol.max_h, "abandoned": sol.abandoned,
                "sizes": list(sol.block_sizes),
            })
            if sol.converged:
                converged_all.append(sol)
                if sol.satisfies_c4:
                    valid.append(sol)
        if len(valid) >= config.min_c4_solutions:
            break
    if valid:
        best = min(valid, key=lambda s: s.objective)
        degraded = len(valid) < config.min_c4_solutions
    elif converged_all:
        best = min(converged_all, key=lambda s: s.objective)
        degraded = True
    else:
        raise ALMFailure(f"no converged solution for c={c}, d={d}", attempts)
    return MultiStartResult(best=best, attempts=tuple(attempts), rounds=rounds,
                            num_valid=len(valid), degraded=degraded)
