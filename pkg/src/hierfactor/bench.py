"""Simulation harness: ground truths, sampling, recovery metrics and
identifiability checks for generated loading matrices.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .driver import FitConfig, FitResult, fit_hierarchical
from .hierarchy import FactorTree, compute_layers, pattern_from_tree, tree_from_sets, validate_tree
from .objective import SampleCovariance


# ----------------------------------------------------------------------
# trees
# ----------------------------------------------------------------------
def figure1_tree() -> FactorTree:
    """Three-layer tree on 16 variables: ``{1..8}, {9..12}, {13..16}`` below the
    general factor and ``{1..4}, {5..8}`` below the first of them."""
    r = lambda a, b: range(a, b + 1)
    return tree_from_sets([r(1, 16), r(1, 8), r(9, 12), r(13, 16), r(1, 4), r(5, 8)], 16)


def simulation_tree(J: int = 36) -> FactorTree:
    """Four-layer, ten-factor tree used in the simulation study (``J`` divisible by 18)."""
    if J % 18:
        raise ValueError("J must be a multiple of 18")
    r = lambda a, b: range(a, b + 1)
    a, b, c, d, e, f = J // 3, J // 6, 5 * J // 9, 7 * J // 9, 4 * J // 9, J
    return tree_from_sets([
        r(1, f), r(1, a), r(a + 1, f), r(1, b), r(b + 1, a),
        r(a + 1, c), r(c + 1, d), r(d + 1, f), r(a + 1, e), r(e + 1, c),
    ], J)


def bifactor_tree(group_sizes) -> FactorTree:
    """General factor plus disjoint consecutive groups."""
    J = int(sum(group_sizes))
    sets, start = [range(1, J + 1)], 1
    for g in group_sizes:
        sets.append(range(start, start + g))
        start += g
    return tree_from_sets(sets, J)


# ----------------------------------------------------------------------
# truth and sampling
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TruthSpec:
    """How to draw a ground-truth loading matrix on a tree.

    Loadings on the general factor are ``Uniform(low, high)``; other free
    loadings get an independent random sign.  Unique variances all equal
    ``unique_variance``.
    """

    tree: FactorTree
    low: float = 0.5
    high: float = 2.0
    unique_variance: float = 1.0
    seed: int | None = None


@dataclass(frozen=True)
class Truth:
    tree: FactorTree
    loadings: np.ndarray
    unique_variances: np.ndarray
    sigma: np.ndarray

    @property
    def psi_matrix(self) -> np.ndarray:
        return np.diag(self.unique_variances)


def generate_truth(spec: TruthSpec, rng: np.random.Generator | None = None) -> Truth:
    """Draw ``Lambda*`` on the tree's pattern and form ``Sigma* = L L^T + Psi*``."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    mask = pattern_from_tree(spec.tree).mask
    J, K = mask.shape
    u = rng.uniform(spec.low, spec.high, size=(J, K))
    x = rng.integers(0, 2, size=(J, K))
    sign = 1 - 2 * x
    sign[:, 0] = 1
    L = np.where(mask, sign * u, 0.0)
    psi = np.full(J, float(spec.unique_variance))
    sigma = L @ L.T + np.diag(psi)
    return Truth(spec.tree, L, psi, sigma)


def sample_covariance(sigma: np.ndarray, N: int, rng: np.random.Generator | None = None,
                      exact: bool = False, ddof: int = 0, center: bool = False) -> SampleCovariance:
    """Covariance of ``N`` mean-zero Gaussian draws with covariance ``sigma``.

    ``exact=True`` returns ``sigma`` itself with sample size ``N`` (the
    infinite-sample surrogate).  The divisor is ``N - ddof``; data are not
    re-centred unless ``center`` is set.
    """
    sigma = np.asarray(sigma, dtype=float)
    J = sigma.shape[0]
    if exact:
        return SampleCovariance(sigma, N)
    if N <= J:
        raise ValueError("N must exceed the number of variables")
    rng = np.random.default_rng() if rng is None else rng
    chol = np.linalg.cholesky(sigma)
    X = rng.standard_normal((N, J)) @ chol.T
    if center:
        X = X - X.mean(axis=0)
    S = X.T @ X / (N - ddof)
    return SampleCovariance(0.5 * (S + S.T), N)


# ----------------------------------------------------------------------
# scoring
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class RecoveryScore:
    emc: int
    lmc: tuple
    mse_lambda: float | None
    mse_psi: float | None
    K_hat: int
    T_hat: int
    layer_counts: tuple

    def to_dict(self) -> dict:
        return {
            "emc": self.emc, "lmc": list(self.lmc), "mse_lambda": self.mse_lambda,
            "mse_psi": self.mse_psi, "K_hat": self.K_hat, "T_hat": self.T_hat,
            "layer_counts": list(self.layer_counts),
        }


def mse_lambda(L_hat: np.ndarray, L_true: np.ndarray) -> float:
    """``min_Q ||L_hat - L_true Q||_F^2 / (J K)`` over diagonal sign matrices ``Q``."""
    A = np.asarray(L_hat, dtype=float)
    B = np.asarray(L_true, dtype=float)
    if A.shape != B.shape:
        raise ValueError("loading matrices differ in shape")
    plus = ((A - B) ** 2).sum(axis=0)
    minus = ((A + B) ** 2).sum(axis=0)
    return float(np.minimum(plus, minus).sum() / A.size)


def mse_psi(unique_hat: np.ndarray, unique_true: np.ndarray) -> float:
    """``||Psi_hat - Psi*||_F^2 / J`` for diagonal unique-variance matrices."""
    a = np.asarray(unique_hat, dtype=float)
    b = np.asarray(unique_true, dtype=float)
    return float(((a - b) ** 2).sum() / a.size)


def _layer_sets(tree: FactorTree) -> list:
    return [sorted(tuple(sorted(tree.node(k).variables)) for k in layer)
            for layer in compute_layers(tree)]


def score_structure(fit_tree: FactorTree, true_tree: FactorTree) -> tuple:
    """``(emc, lmc, layer_counts)`` comparing two trees on the same variables."""
    fit_sets = fit_tree.variable_sets()
    true_sets = true_tree.variable_sets()
    emc = int(len(fit_sets) == len(true_sets)
              and all(fit_sets[k] == true_sets[k] for k in true_sets))
    fit_layers = _layer_sets(fit_tree)
    true_layers = _layer_sets(true_tree)
    lmc, counts = [], []
    for t in range(len(true_layers)):
        got = fit_layers[t] if t < len(fit_layers) else []
        lmc.append(int(got == true_layers[t]))
        counts.append(len(got))
    return emc, tuple(lmc), tuple(counts)


def score_recovery(fit: FitResult, truth: Truth) -> RecoveryScore:
    if fit.tree.num_variables != truth.tree.num_variables:
        raise ValueError("fit and truth have different numbers of variables")
    emc, lmc, counts = score_structure(fit.tree, truth.tree)
    ml = mp = None
    if emc:
        ml = mse_lambda(fit.loadings, truth.loadings)
        mp = mse_psi(fit.unique_variances, truth.unique_variances)
    return RecoveryScore(emc, lmc, ml, mp, fit.K, fit.T, counts)


# ----------------------------------------------------------------------
# benchmark
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Setting:
    J: int
    N: int
    reps: int


@dataclass
class BenchmarkResult:
    summary: list
    replications: list
    seed: int
    config: dict
    timings: list = field(default_factory=list)
    fits: list = field(default_factory=list)

    def summary_csv(self) -> str:
        if not self.summary:
            return ""
        keys = list(self.summary[0].keys())
        for row in self.summary[1:]:
            for k in row:
                if k not in keys:
                    keys.append(k)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in self.summary:
            w.writerow({k: _fmt(row.get(k)) for k in keys})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "summary": self.summary,
            "replications": self.replications,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def replication_seed(seed: int, J: int, N: int, rep: int) -> np.random.SeedSequence:
    """Random stream of one replication: depends only on the master seed and ``(J, N, rep)``."""
    return np.random.SeedSequence(seed, spawn_key=(1, J, N, rep))


def truth_seed(seed: int, J: int, rep: int | None = None) -> np.random.SeedSequence:
    key = (0, J) if rep is None else (0, J, rep)
    return np.random.SeedSequence(seed, spawn_key=key)


def run_replication(truth: Truth, N: int, seq: np.random.SeedSequence,
                    config: FitConfig = FitConfig(), exact: bool = False) -> dict:
    data_ss, fit_ss = seq.spawn(2)
    cov = sample_covariance(truth.sigma, N, np.random.default_rng(data_ss), exact=exact)
    fit_seed = int(fit_ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
    t0 = time.perf_counter()
    try:
        fit = fit_hierarchical(cov, config, seed=fit_seed)
    except Exception as exc:  # recorded, not fatal
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}", "seconds": time.perf_counter() - t0}
    score = score_recovery(fit, truth)
    return {"ok": True, "fit": fit, "score": score, "seconds": time.perf_counter() - t0}


def run_benchmark(settings, config: FitConfig = FitConfig(), seed: int = 0,
                  tree_factory=simulation_tree, fixed_truth: bool = True,
                  exact: bool = False, workers: int = 1, progress=None,
                  keep_fits: bool = False) -> BenchmarkResult:
    """Run replications for each ``(J, N, reps)`` setting and aggregate the scores.

    With ``fixed_truth`` one loading matrix is drawn per ``J`` and reused
    for all replications; otherwise each replication draws its own.
    ``keep_fits`` retains every :class:`FitResult` (``None`` for failed
    replications) in ``fits``.
    """
    settings = [s if isinstance(s, Setting) else Setting(*s) for s in settings]
    summary, reps_out, timings, fits = [], [], [], []
    for st in settings:
        tree = tree_factory(st.J)
        fixed = generate_truth(TruthSpec(tree), np.random.default_rng(truth_seed(seed, st.J)))

        def one(r):
            truth = fixed if fixed_truth else generate_truth(
                TruthSpec(tree), np.random.default_rng(truth_seed(seed, st.J, r)))
            out = run_replication(truth, st.N, replication_seed(seed, st.J, st.N, r), config, exact)
            if progress is not None:
                progress(st, r, out)
            return out

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, range(st.reps)))
        else:
            results = [one(r) for r in range(st.reps)]
        summary.append(_aggregate(st, tree, results))
        for r, out in enumerate(results):
            rec = {"J": st.J, "N": st.N, "rep": r, "ok": out["ok"]}
            if out["ok"]:
                rec.update(out["score"].to_dict())
                rec["bic"] = out["fit"].bic
            else:
                rec["error"] = out["error"]
            reps_out.append(rec)
            timings.append({"J": st.J, "N": st.N, "rep": r, "seconds": out["seconds"]})
            if keep_fits:
                fits.append(out.get("fit"))
    return BenchmarkResult(summary, reps_out, seed, config.to_dict(), timings, fits)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _aggregate(st: Setting, tree: FactorTree, results) -> dict:
    ok = [r for r in results if r["ok"]]
    scores = [r["score"] for r in ok]
    T = len(compute_layers(tree))
    row = {
        "J": st.J, "N": st.N, "reps": st.reps, "failures": st.reps - len(ok),
        "K_mean": _mean([s.K_hat for s in scores]),
        "T_mean": _mean([s.T_hat for s in scores]),
        "emc_rate": _mean([s.emc for s in scores]),
    }
    for t in range(T):
        row[f"L{t + 1}_count_mean"] = _mean([s.layer_counts[t] for s in scores])
        row[f"lmc{t + 1}_rate"] = _mean([s.lmc[t] for s in scores])
    row["mse_lambda_mean"] = _mean([s.mse_lambda for s in scores])
    row["mse_psi_mean"] = _mean([s.mse_psi for s in scores])
    return row


# ----------------------------------------------------------------------
# identifiability checks
# ----------------------------------------------------------------------
PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


@dataclass(frozen=True)
class ClauseResult:
    clause: str
    factors: tuple
    status: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"clause": self.clause, "factors": list(self.factors),
                "status": self.status, "detail": self.detail}


@dataclass(frozen=True)
class ConditionReport:
    clauses: tuple

    @property
    def status(self) -> str:
        states = {c.status for c in self.clauses}
        if FAIL in states:
            return FAIL
        if INCONCLUSIVE in states:
            return INCONCLUSIVE
        return PASS

    def failures(self, clause: str | None = None) -> list:
        return [c for c in self.clauses if c.status == FAIL and (clause is None or c.clause == clause)]

    def by_clause(self) -> dict:
        out = {}
        for c in self.clauses:
            prev = out.get(c.clause, PASS)
            order = {PASS: 0, INCONCLUSIVE: 1, FAIL: 2}
            out[c.clause] = c.status if order[c.status] > order[prev] else prev
        return out

    def to_dict(self) -> dict:
        return {"status": self.status, "by_clause": self.by_clause(),
                "clauses": [c.to_dict() for c in self.clauses]}

    def text(self) -> str:
        lines = [f"overall: {self.status}"]
        for name, st in self.by_clause().items():
            lines.append(f"{name:10s} {st}")
        for c in self.clauses:
            if c.status != PASS:
                lines.append(f"  {c.clause} factors={list(c.factors)} {c.status}: {c.detail}")
        return "\n".join(lines)


class _Ranker:
    """Rank tests with a relative singular-value threshold and an evaluation budget."""

    def __init__(self, L, tol, budget):
        self.L = L
        self.tol = tol
        self.budget = budget
        self.used = 0

    def rank(self, rows, cols) -> int:
        self.used += 1
        M = self.L[np.ix_(list(rows), list(cols))]
        if M.size == 0:
            return 0
        s = np.linalg.svd(M, compute_uv=False)
        if s[0] == 0.0:
            return 0
        return int((s > self.tol * s[0]).sum())

    def full(self, rows, cols) -> bool:
        rows, cols = list(rows), list(cols)
        return self.rank(rows, cols) == min(len(rows), len(cols))

    @property
    def exhausted(self) -> bool:
        return self.used >= self.budget


def _greedy_basis(rk: _Ranker, order, cols, size):
    chosen = []
    for r in order:
        if len(chosen) == size:
            break
        if rk.rank(chosen + [r], cols) == len(chosen) + 1:
            chosen.append(r)
    return chosen if len(chosen) == size else None


def _disjoint_full_rank(rk: _Ranker, pool, cols_a, cols_b, rng) -> tuple:
    """Search disjoint ``E1, E2`` in ``pool`` with square full-rank
    ``L[E1, cols_a]`` and ``L[E2, cols_b]``."""
    pool = list(pool)
    a, b = len(cols_a), len(cols_b)
    if a + b > len(pool):
        return FAIL, f"needs {a + b} rows, only {len(pool)} available"
    if rk.rank(pool, cols_a) < a or rk.rank(pool, cols_b) < b:
        return FAIL, "submatrix over all candidate rows is rank deficient"
    n_pairs = math.comb(len(pool), a) * math.comb(len(pool) - a, b)
    if n_pairs <= rk.budget:
        for e1 in itertools.combinations(pool, a):
            if not rk.full(e1, cols_a):
                continue
            rest = [r for r in pool if r not in e1]
            for e2 in itertools.combinations(rest, b):
                if rk.full(e2, cols_b):
                    return PASS, f"E1={[r + 1 for r in e1]} E2={[r + 1 for r in e2]}"
        return FAIL, "no disjoint full-rank pair exists"
    order = list(pool)
    while not rk.exhausted:
        e1 = _greedy_basis(rk, order, cols_a, a)
        if e1 is not None:
            rest = [r for r in order if r not in e1]
            e2 = _greedy_basis(rk, rest, cols_b, b)
            if e2 is not None:
                return PASS, f"E1={sorted(r + 1 for r in e1)} E2={sorted(r + 1 for r in e2)}"
        order = list(rng.permutation(pool))
    return INCONCLUSIVE, "search budget exhausted"


def check_conditions(loadings: np.ndarray, tree: FactorTree, tol: float = 1e-8,
                     budget: int = 100_000) -> ConditionReport:
    """Check size and rank conditions that make a hierarchical loading
    matrix identifiable and learnable.

    Clauses (factor labels are 1-based):

    * ``C4`` / ``size``: every factor has at least 3 variables, at least 7
      when it has children; ``size`` flags the sizes at which two distinct
      parameter sets give the same covariance.
    * ``rank``: the loading matrix has full column rank.
    * ``pair``: for a child ``j`` of ``i``, any two rows of
      ``L[v_j, {i, j}]`` are linearly independent.
    * ``deletion``: ``L[v_j - {k}, {i, j} + D_j]`` keeps full column rank
      for every deleted row ``k``.
    * ``grandchild``: if ``j`` has two or more children, every choice of two
      rows in each of two of its children gives a full-rank 4 x 4 block on
      ``{i, j, s1, s2}``.
    * ``parent_split``: for a parent ``i`` and any of its rows ``j``, two
      disjoint row sets outside ``j`` each give a full-rank square block on
      ``{i} + D_i``.
    * ``child_split``: for each child ``k`` of ``i``, disjoint row sets of
      sizes ``2 + |D_k|`` and ``1 + |D_k|`` inside ``v_k`` give full-rank
      blocks on ``{i, k} + D_k`` and ``{k} + D_k``.

    ``D_k`` is the set of all descendants of ``k``.  Each search is capped
    at ``budget`` rank evaluations; when the cap is hit the clause is
    reported as inconclusive rather than passed.
    """
    L = np.asarray(loadings, dtype=float)
    J, K = L.shape
    if tree.num_variables != J or tree.num_factors != K:
        raise ValueError("loading matrix does not match the tree")
    mask = pattern_from_tree(tree).mask
    if np.any((L != 0) & ~mask):
        raise ValueError("loading matrix has nonzeros outside the tree's pattern")
    rng = np.random.default_rng(0)
    out = []

    for v in validate_tree(tree).violations:
        if v.constraint == "C4":
            out.append(ClauseResult("C4", (v.label,), FAIL, v.detail))
    for lab in sorted(tree.labels):
        n = tree.node(lab)
        if n.size <= 2:
            out.append(ClauseResult("size", (lab,), FAIL, f"{n.size} variables"))
        elif len(n.children) >= 2 and n.size <= 6:
            out.append(ClauseResult("size", (lab,), FAIL,
                                    f"{len(n.children)} children but {n.size} variables"))
    if not any(c.clause == "size" for c in out):
        out.append(ClauseResult("size", (), PASS))
    if not any(c.clause == "C4" for c in out):
        out.append(ClauseResult("C4", (), PASS))

    rk = _Ranker(L, tol, budget)
    r = rk.rank(range(J), range(K))
    out.append(ClauseResult("rank", (), PASS if r == K else FAIL, f"rank {r} of {K}"))

    desc = {lab: _descendants(tree, lab) for lab in tree.labels}
    rows_of = {lab: [v - 1 for v in sorted(tree.node(lab).variables)] for lab in tree.labels}
    col = lambda labs: [x - 1 for x in labs]

    for i in sorted(tree.labels):
        ni = tree.node(i)
        if not ni.children:
            continue
        for j in ni.children:
            nj = tree.node(j)
            vj = rows_of[j]
            # pair
            rk = _Ranker(L, tol, budget)
            status, detail = PASS, ""
            for a, b in itertools.combinations(vj, 2):
                if rk.exhausted:
                    status, detail = INCONCLUSIVE, "search budget exhausted"
                    break
                if rk.rank([a, b], col([i, j])) < 2:
                    status, detail = FAIL, f"rows {a + 1} and {b + 1} are dependent"
                    break
            out.append(ClauseResult("pair", (i, j), status, detail))
            # deletion
            rk = _Ranker(L, tol, budget)
            cols = col([i, j] + desc[j])
            status, detail = PASS, ""
            for k in vj:
                rows = [x for x in vj if x != k]
                if len(rows) < len(cols) or rk.rank(rows, cols) < len(cols):
                    status, detail = FAIL, f"rank lost after deleting row {k + 1}"
                    break
            out.append(ClauseResult("deletion", (i, j), status, detail))
            # grandchild
            if len(nj.children) >= 2:
                rk = _Ranker(L, tol, budget)
                status, detail = PASS, ""
                for s1, s2 in itertools.combinations(nj.children, 2):
                    cols = col([i, j, s1, s2])
                    for k12 in itertools.combinations(rows_of[s1], 2):
                        for k34 in itertools.combinations(rows_of[s2], 2):
                            if rk.exhausted:
                                status, detail = INCONCLUSIVE, "search budget exhausted"
                                break
                            if rk.rank(list(k12 + k34), cols) < 4:
                                status = FAIL
                                detail = f"rows {[x + 1 for x in k12 + k34]} on factors {[i, j, s1, s2]}"
                                break
                        if status != PASS:
                            break
                    if status != PASS:
                        break
                out.append(ClauseResult("grandchild", (i, j), status, detail))
        # parent_split
        cols = col([i] + desc[i])
        worst = (PASS, "")
        for jv in rows_of[i]:
            rk = _Ranker(L, tol, budget)
            pool = [x for x in rows_of[i] if x != jv]
            st, det = _disjoint_full_rank(rk, pool, cols, cols, rng)
            if st != PASS:
                worst = (st, f"excluding row {jv + 1}: {det}")
                if st == FAIL:
                    break
        out.append(ClauseResult("parent_split", (i,), *worst))
        # child_split
        for k in ni.children:
            rk = _Ranker(L, tol, budget)
            st, det = _disjoint_full_rank(rk, rows_of[k], col([i, k] + desc[k]),
                                          col([k] + desc[k]), rng)
            out.append(ClauseResult("child_split", (i, k), st, det))
    return ConditionReport(tuple(out))


def _descendants(tree: FactorTree, label: int) -> list:
    out, stack = [], list(tree.node(label).children)
    while stack:
        k = stack.pop()
        out.append(k)
        stack.extend(tree.node(k).children)
    return sorted(out)
