"""Layer-by-layer learning of a hierarchical factor structure.

The general factor is loaded on by every variable.  Each pass takes the
factors of the newest layer, searches for their children with the
information-criterion search, and collects those children as the next
layer.  The search for a factor in layer ``t - 1`` subtracts the fitted
columns of layers ``1 .. t - 2`` (its ancestors above the parent level)
as a fixed covariance offset.  Learning stops when a layer produces no
children, and the loadings of the learned pattern are refitted jointly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .hierarchy import FactorTree, compute_layers, pattern_from_tree, tree_from_sets, validate_tree
from .icb import ICBConfig, ICBOutcome, hyperparam_schedule, learn_children
from .objective import (
    ModelParams, NotPositiveDefiniteError, SampleCovariance, bic, discrepancy,
    free_parameter_count, implied_covariance, neg2_loglik, refit_mle,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitResult:
    """Learned tree, jointly refitted parameters and per-factor diagnostics."""

    tree: FactorTree
    loadings: np.ndarray
    psi: np.ndarray
    discrepancy: float
    bic: float
    neg2_loglik: float
    num_params: int
    stitched_discrepancy: float
    outcomes: tuple
    config: dict
    seed: int | None
    heywood: tuple = ()
    refit_converged: bool = True
    elapsed: float = 0.0

    @property
    def T(self) -> int:
        return len(compute_layers(self.tree))

    @property
    def K(self) -> int:
        return self.tree.num_factors

    @property
    def layers(self) -> list:
        return compute_layers(self.tree)

    @property
    def unique_variances(self) -> np.ndarray:
        return self.psi ** 2

    def variable_sets(self) -> list:
        """1-based variable sets of factors ``1..K``."""
        vs = self.tree.variable_sets()
        return [vs[k] for k in sorted(vs)]

    def to_dict(self, include_diagnostics: bool = True) -> dict:
        out = {
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "T": self.T,
            "K": self.K,
            "layers": self.layers,
            "tree": self.tree.to_dict(),
            "loadings": self.loadings.tolist(),
            "unique_variances": self.unique_variances.tolist(),
            "discrepancy": self.discrepancy,
            "neg2_loglik": self.neg2_loglik,
            "bic": self.bic,
            "num_params": self.num_params,
            "stitched_discrepancy": self.stitched_discrepancy,
            "heywood_variables": [i + 1 for i in self.heywood],
            "refit_converged": self.refit_converged,
        }
        if include_diagnostics:
            out["factors"] = [o.to_dict() for o in self.outcomes]
        return out


@dataclass(frozen=True)
class FitConfig:
    icb: ICBConfig = field(default_factory=ICBConfig)
    refit_max_iter: int = 2000

    def to_dict(self) -> dict:
        return asdict(self)


def accumulate_offset(columns, variables) -> np.ndarray:
    """Sum of outer products of ``columns`` restricted to ``variables`` (1-based)."""
    idx = np.array(sorted(int(v) for v in variables), dtype=int) - 1
    out = np.zeros((idx.size, idx.size))
    for col in columns:
        v = np.asarray(col, dtype=float)[idx]
        out += np.outer(v, v)
    return out


def _factor_seed(root: np.random.SeedSequence, layer: int, position: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root.entropy, spawn_key=(layer, position))


def fit_hierarchical(cov: SampleCovariance, config: FitConfig = FitConfig(),
                     seed: int | None = 0) -> FitResult:
    """Learn the factor tree from ``cov`` and refit its loadings.

    Every factor's search draws from its own random stream derived from
    ``seed`` and the factor's (layer, position), so results do not depend
    on processing order.
    """
    if not isinstance(cov, SampleCovariance):
        raise TypeError("cov must be a SampleCovariance")
    J = cov.J
    if J < 3:
        raise ValueError("at least three variables are required")
    t0 = time.perf_counter()
    root = np.random.SeedSequence(seed)
    icb = config.icb

    current = [tuple(range(1, J + 1))]
    upper_columns = []  # columns of layers 1 .. t-2 while searching layer t
    outcomes = []
    t = 2
    while current:
        next_layer = []
        layer_columns = []
        for pos, vs in enumerate(current):
            sig0 = accumulate_offset(upper_columns, vs)
            out = learn_children(vs, sig0, cov.S, cov.N, t, icb,
                                 _factor_seed(root, t, pos), num_variables=J)
            log.info("layer %d factor on %d variables: %d children (IC %s)",
                     t - 1, len(vs), out.child_count, out.ic_table)
            outcomes.append(out)
            layer_columns.append(out.column)
            next_layer.extend(tuple(sorted(s)) for s in out.child_sets)
        upper_columns = upper_columns + layer_columns
        current = next_layer
        t += 1

    sets = [o.variables for o in outcomes]
    tree = tree_from_sets(sets, J)
    report = validate_tree(tree)
    if not report.ok:
        raise RuntimeError(f"learned tree violates constraints: {list(map(str, report.violations))}")
    by_set = {frozenset(o.variables): o for o in outcomes}
    ordered = [by_set[frozenset(tree.node(k).variables)] for k in sorted(tree.labels)]
    stitched = np.column_stack([o.column for o in ordered])
    pattern = pattern_from_tree(tree)
    stitched = np.where(pattern.mask, stitched, 0.0)

    resid = np.diag(cov.S) - (stitched ** 2).sum(axis=1)
    psi0 = np.sqrt(np.maximum(resid, 0.05))
    try:
        stitched_disc = discrepancy(implied_covariance(stitched, psi0), cov.S, cov.N, cov.logdet)
    except NotPositiveDefiniteError:
        stitched_disc = float("inf")
    res = refit_mle(pattern, cov, tau=icb.tau, start=ModelParams(stitched, psi0),
                    max_iter=config.refit_max_iter, raise_on_maxiter=False)
    k = free_parameter_count(pattern)
    return FitResult(
        tree=tree,
        loadings=res.loadings,
        psi=res.psi,
        discrepancy=res.discrepancy,
        bic=bic(res.discrepancy, k, cov.N),
        neg2_loglik=neg2_loglik(res.discrepancy, cov),
        num_params=k,
        stitched_discrepancy=float(stitched_disc),
        outcomes=tuple(ordered),
        config=config.to_dict(),
        seed=seed,
        heywood=res.heywood,
        refit_converged=res.converged,
        elapsed=time.perf_counter() - t0,
    )
