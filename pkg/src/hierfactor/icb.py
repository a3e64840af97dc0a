"""Information-criterion search for the child factors of one factor.

Given the variables of a factor and the covariance restricted to them, the
search compares "no children" against every admissible number of children
``c``.  For each ``c`` the augmented Lagrangian search proposes a partition
of the variables into ``c`` blocks, a greedy search picks how many columns
each block needs, and the penalised discrepancy of the resulting fixed
pattern is the criterion value for ``c``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .alm import ALMConfig, ALMFailure, multi_start_solve
from .hierarchy import BlockPartition, LoadingPattern
from .objective import DEFAULT_TAU, ModelParams, RefitError, SampleCovariance, refit_mle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ICBConfig:
    """Hyperparameters of the child search.

    ``cmax_rule`` is ``"sim"`` (at most 4 children) or ``"real"`` (at most
    6).  ``d_max`` is the base number of columns per block; it shrinks by
    one per layer.  ``refit_starts`` counts extra jittered starts tried in
    each fixed-pattern fit besides the warm start taken from the proposal.
    """

    d_max: int = 6
    cmax_rule: str = "sim"
    tau: float = DEFAULT_TAU
    refit_starts: int = 1
    alm: ALMConfig = field(default_factory=ALMConfig)

    def __post_init__(self):
        if self.cmax_rule not in ("sim", "real"):
            raise ValueError("cmax_rule must be 'sim' or 'real'")
        if self.d_max < 1:
            raise ValueError("d_max must be at least 1")

    @property
    def cmax_cap(self) -> int:
        return 4 if self.cmax_rule == "sim" else 6


@dataclass(frozen=True)
class ICBOutcome:
    """Result of the child search for one factor.

    ``child_sets`` are subsets of ``variables`` (1-based), ordered by their
    smallest element.  ``column`` is the factor's own loading estimate,
    length ``J`` and zero outside ``variables``.
    """

    variables: tuple
    layer: int
    child_count: int
    child_sets: tuple
    column: np.ndarray
    ic_table: dict
    d_tilde: tuple
    d: int
    c_max: int
    failed: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "layer": self.layer,
            "child_count": self.child_count,
            "child_sets": [sorted(s) for s in self.child_sets],
            "ic_table": {str(k): v for k, v in self.ic_table.items()},
            "d_tilde": list(self.d_tilde),
            "d": self.d,
            "c_max": self.c_max,
            "failed": {str(k): v for k, v in self.failed.items()},
            "details": self.details,
        }


def hyperparam_schedule(t: int, size: int, config: ICBConfig = ICBConfig()) -> tuple:
    """``(c_max, d)`` for a factor with ``size`` variables whose children form layer ``t``.

    ``d = min(size, d_max + 2 - t)``; ``c_max = min(cap, size // 3)`` when
    ``size >= 7`` and 0 otherwise.  When ``d < 1`` no children are
    searched.
    """
    if t < 2:
        raise ValueError("layer index of the children must be at least 2")
    d = min(size, config.d_max + 2 - t)
    if size < 7 or d < 1:
        return 0, max(d, 0)
    return min(config.cmax_cap, size // 3), d


def penalty_p(block_sizes, d) -> float:
    """Free-parameter count of the child blocks: ``sum |v_s| d_s - d_s (d_s - 1)/2``.

    Infinite when some ``d_s`` exceeds its block size.
    """
    sizes = [int(v) for v in block_sizes]
    ds = [int(x) for x in d]
    if len(sizes) != len(ds):
        raise ValueError("block_sizes and d differ in length")
    if any(x > v for v, x in zip(sizes, ds)):
        return math.inf
    return float(sum(v * x - x * (x - 1) // 2 for v, x in zip(sizes, ds)))


def _as_cov(S, N):
    if isinstance(S, SampleCovariance):
        return S.S, (S.N if N is None else N)
    return np.asarray(S, dtype=float), N


def ic_zero_children(sigma0, S, N=None, tau: float = DEFAULT_TAU):
    """Criterion value for "no children": the minimised one-factor discrepancy.

    Returns ``(ic, loadings (m x 1), psi)``.
    """
    S, N = _as_cov(S, N)
    m = S.shape[0]
    pattern = LoadingPattern(np.ones((m, 1), dtype=bool))
    res = refit_mle(pattern, S, N, tau=tau, offset=_offset(sigma0, m), raise_on_maxiter=False)
    return res.discrepancy, res.loadings, res.psi


def _offset(sigma0, m):
    if sigma0 is None:
        return None
    sigma0 = np.asarray(sigma0, dtype=float)
    return None if not np.any(sigma0) else sigma0


def fixed_pattern(partition: BlockPartition, d) -> LoadingPattern:
    """Zero pattern with a free parent column and ``d_s`` columns on block ``s``."""
    m = partition.num_rows
    mask = np.zeros((m, 1 + int(sum(d))), dtype=bool)
    mask[:, 0] = True
    col = 1
    for block, ds in zip(partition.blocks, d):
        mask[list(block), col:col + ds] = True
        col += ds
    return LoadingPattern(mask)


def _warm_start(partition, d, proposal, psi):
    """Start for a fixed-pattern fit from proposal loadings ``m x (1 + c*dp)``.

    Each block's columns are replaced by the leading ``d_s`` directions of
    that block's proposed loadings (best rank-``d_s`` reproduction of its
    covariance contribution).
    """
    m = partition.num_rows
    c = partition.num_blocks
    dp = (proposal.shape[1] - 1) // c
    L = np.zeros((m, 1 + int(sum(d))))
    L[:, 0] = proposal[:, 0]
    col = 1
    for s, (block, ds) in enumerate(zip(partition.blocks, d)):
        rows = list(block)
        B = proposal[np.ix_(rows, range(1 + s * dp, 1 + (s + 1) * dp))]
        U, sv, _ = np.linalg.svd(B, full_matrices=False)
        k = min(ds, len(sv))
        L[np.ix_(rows, range(col, col + k))] = U[:, :k] * sv[:k]
        if ds > k:
            L[np.ix_(rows, range(col + k, col + ds))] = 0.1
        col += ds
    return L, psi


def tilde_ic(partition: BlockPartition, d, sigma0, S, N=None, tau: float = DEFAULT_TAU,
             start=None, extra_starts: int = 0, rng: np.random.Generator | None = None):
    """Penalised discrepancy of the fixed partition pattern with ``d_s`` columns per block.

    Returns ``(ic, loadings, psi)``.  ``start`` is an optional
    ``(loadings, psi)`` matching the pattern.  Raises ``ValueError`` for an
    infinite penalty.
    """
    S, N = _as_cov(S, N)
    pen = penalty_p(partition.sizes, d)
    if not math.isfinite(pen):
        raise ValueError(f"d={tuple(d)} exceeds block sizes {partition.sizes}")
    pattern = fixed_pattern(partition, d)
    m = S.shape[0]
    off = _offset(sigma0, m)
    fits = []
    if start is not None:
        fits.append(refit_mle(pattern, S, N, tau=tau, offset=off,
                              start=ModelParams(start[0], start[1]), raise_on_maxiter=False))
    n_random = extra_starts if start is not None else max(1, extra_starts)
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(n_random):
        fits.append(refit_mle(pattern, S, N, tau=tau, offset=off, rng=rng, raise_on_maxiter=False))
    best = min(fits, key=lambda r: r.discrepancy)
    return best.discrepancy + pen * math.log(N), best.loadings, best.psi


def greedy_d_search(partition: BlockPartition, d_cap: int, sigma0, S, N=None,
                    tau: float = DEFAULT_TAU, proposal=None, extra_starts: int = 0,
                    rng: np.random.Generator | None = None):
    """Choose columns per block one block at a time.

    Block ``s`` tries ``1 .. min(|v_s|, d_cap)`` with earlier blocks fixed at
    their chosen values and later blocks at ``min(|v_s|, d_cap)``; ties go
    to the smaller value.  ``proposal`` is ``(loadings, psi)`` from the
    partition search and seeds each fit.

    Returns ``(d_tilde, steps, (ic, loadings, psi))`` where ``steps[s]``
    maps each tried value to its criterion value.
    """
    S, N = _as_cov(S, N)
    sizes = partition.sizes
    d = [min(v, d_cap) for v in sizes]
    steps = []
    cache = {}
    rng = np.random.default_rng(0) if rng is None else rng

    def evaluate(dd):
        key = tuple(dd)
        if key not in cache:
            start = None
            if proposal is not None:
                start = _warm_start(partition, key, proposal[0], proposal[1])
            cache[key] = tilde_ic(partition, key, sigma0, S, N, tau, start=start,
                                  extra_starts=extra_starts, rng=rng)
        return cache[key]

    for s in range(len(sizes)):
        table = {}
        for ds in range(1, min(sizes[s], d_cap) + 1):
            trial = list(d)
            trial[s] = ds
            table[ds] = evaluate(trial)[0]
        best = min(table, key=lambda k: (table[k], k))
        d[s] = best
        steps.append(table)
    return tuple(d), steps, evaluate(d)


def learn_children(variables, sigma0, S, N=None, t: int = 2, config: ICBConfig = ICBConfig(),
                   rng: np.random.Generator | np.random.SeedSequence | None = None,
                   num_variables: int | None = None) -> ICBOutcome:
    """Select the number of children of one factor and their variable sets.

    ``variables`` are the factor's 1-based variable indices, ``S`` is the
    full covariance (``J x J``), ``sigma0`` the offset restricted to the
    factor's variables (``None`` or zeros when there is none) and ``t`` the
    layer the children would occupy.
    """
    S, N = _as_cov(S, N)
    if N is None:
        raise ValueError("sample size N is required")
    J = S.shape[0] if num_variables is None else num_variables
    vs = tuple(sorted(int(v) for v in variables))
    m = len(vs)
    if m < 3:
        raise ValueError("a factor needs at least three variables")
    idx = np.array(vs) - 1
    Sk = S[np.ix_(idx, idx)]
    sig0 = np.zeros((m, m)) if sigma0 is None else np.asarray(sigma0, dtype=float)
    if sig0.shape != (m, m):
        raise ValueError("offset does not match the factor's variables")
    seed_seq = _seed_seq(rng)

    c_max, d = hyperparam_schedule(t, m, config)
    ic0, lam0, psi0 = ic_zero_children(sig0, Sk, N, config.tau)
    ic_table = {0: float(ic0)}
    fits = {0: (lam0[:, 0], None, ())}
    failed = {}
    details = {}
    for c in range(2, c_max + 1):
        if config.alm.min_block_size * c > m:
            failed[c] = "too few variables for this many blocks"
            continue
        cand_rng = np.random.default_rng(_child_seq(seed_seq, c))
        try:
            ms = multi_start_solve(c, d, sig0, Sk, N, config.alm, cand_rng)
        except ALMFailure as exc:
            failed[c] = str(exc)
            continue
        sol = ms.best
        details[str(c)] = {
            "rounds": ms.rounds, "num_valid": ms.num_valid, "degraded": ms.degraded,
            "alm_objective": sol.objective, "alm_iterations": sol.iterations,
            "alm_max_h": sol.max_h, "alm_converged": sol.converged,
            "ambiguous_rows": list(sol.ambiguous_rows),
            "num_attempts": len(ms.attempts),
            "num_converged": sum(a["converged"] for a in ms.attempts),
            "converged_max_h": max((a["max_h"] for a in ms.attempts if a["converged"]), default=None),
        }
        if not sol.satisfies_c4:
            failed[c] = "no partition passed the size check"
            continue
        part = sol.partition
        d_tilde, steps, (ic, lam, _) = greedy_d_search(
            part, d, sig0, Sk, N, config.tau, proposal=(sol.loadings, sol.psi),
            extra_starts=config.refit_starts, rng=np.random.default_rng(_child_seq(seed_seq, 100 + c)))
        details[str(c)]["partition"] = [list(b) for b in part.blocks]
        details[str(c)]["d_steps"] = [{str(k): v for k, v in st.items()} for st in steps]
        ic_table[c] = float(ic)
        fits[c] = (lam[:, 0], part, d_tilde)
    if c_max >= 2 and len(ic_table) == 1:
        log.info("no admissible child partition for factor on %d variables", m)
    chosen = min(ic_table, key=lambda k: (ic_table[k], k))
    col_local, part, d_tilde = fits[chosen]
    column = np.zeros(J)
    column[idx] = col_local
    child_sets = () if chosen == 0 else tuple(part.lift(vs))
    return ICBOutcome(
        variables=vs, layer=t, child_count=chosen, child_sets=child_sets, column=column,
        ic_table=ic_table, d_tilde=tuple(d_tilde), d=d, c_max=c_max,
        failed=failed, details=details,
    )


def _seed_seq(rng) -> np.random.SeedSequence:
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if rng is None:
        return np.random.SeedSequence()
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(2**63)))
    return np.random.SeedSequence(int(rng))


def _child_seq(ss: np.random.SeedSequence, key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (int(key),))
