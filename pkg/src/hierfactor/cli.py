"""Command-line interface.

Subcommands
-----------
``fit``
    Learn a hierarchical structure from a covariance matrix or a raw data
    matrix and write ``fit.json``, ``tree.json`` and ``loadings.csv``.
``simulate``
    Run the simulation benchmark and write ``summary.csv``,
    ``summary.json`` and ``timings.json``.
``check``
    Check the identifiability conditions of a loading matrix on a tree and
    write ``report.json`` and ``report.txt``.

File formats
------------
Numeric inputs are delimiter-separated text (comma, tab, semicolon or
whitespace), one matrix row per line; a non-numeric first line is treated
as a header and skipped, as are lines starting with ``#``.

Trees are JSON objects ``{"num_variables": J, "root": NODE}`` where
``NODE = {"label": int, "variables": [1-based ints], "children": [NODE,...]}``.
A file whose top level has a ``"tree"`` key (as written by ``fit``) is
also accepted.

Every output embeds the tool version, the seed and the configuration: JSON
files carry ``version``, ``seed`` and ``config`` keys; CSV files start with
``#`` comment lines holding the same information.

Exit codes: 0 success, 2 input error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .alm import ALMConfig, ALMFailure
from .bench import (
    Setting, TruthSpec, check_conditions, figure1_tree, generate_truth, run_benchmark,
    simulation_tree, truth_seed,
)
from .driver import FitConfig, fit_hierarchical
from .hierarchy import FactorTree, TreeStructureError
from .objective import NotPositiveDefiniteError, RefitError, SampleCovariance

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("hierfactor")


class InputError(Exception):
    pass


# ----------------------------------------------------------------------
# file helpers
# ----------------------------------------------------------------------
_DELIMS = [",", "\t", ";"]


def read_matrix(path: str) -> np.ndarray:
    """Read a delimiter-separated numeric matrix, skipping a header row if present."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise InputError(f"{path} is empty")
    delim = next((d for d in _DELIMS if d in lines[0]), None)

    def split(ln):
        parts = ln.split(delim) if delim else ln.split()
        return [p.strip().strip('"') for p in parts]

    def numeric(tokens):
        try:
            [float(t) for t in tokens]
            return True
        except ValueError:
            return False

    rows = [split(ln) for ln in lines]
    if not numeric(rows[0]):
        rows = rows[1:]
    try:
        arr = np.array([[float(t) for t in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from exc
    if arr.ndim != 2 or arr.size == 0:
        raise InputError(f"{path}: rows have unequal lengths")
    return arr


def _header_lines(seed, config) -> str:
    return (f"# hierfactor {__version__}\n# seed: {seed}\n"
            f"# config: {json.dumps(config, sort_keys=True, default=str)}\n")


def _dump_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    return str(o)


def read_tree(path: str) -> FactorTree:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read tree file {path}: {exc}") from exc
    if "tree" in payload and "root" not in payload:
        payload = payload["tree"]
    try:
        return FactorTree.from_dict(payload)
    except (KeyError, TypeError, ValueError, TreeStructureError) as exc:
        raise InputError(f"invalid tree file {path}: {exc}") from exc


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------
def _fit_config(args) -> FitConfig:
    alm = ALMConfig(
        num_starts=args.starts,
        min_c4_solutions=min(args.min_valid, args.starts) if args.min_valid else max(1, args.starts // 2),
        max_restarts=args.restarts,
        tau=args.tau,
        threads=max(1, args.threads),
    )
    return FitConfig(icb=replace(FitConfig().icb, d_max=args.dmax, cmax_rule=args.cmax_rule,
                                 tau=args.tau, alm=alm))


def _add_solver_flags(p):
    p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    p.add_argument("--dmax", type=int, default=None,
                   help="base columns per child block (default 6; 10 with --cmax-rule real)")
    p.add_argument("--cmax-rule", choices=["sim", "real"], default="sim",
                   help="child-count cap: sim=min(4,|v|/3), real=min(6,|v|/3)")
    p.add_argument("--starts", type=int, default=100, help="random starts per batch (default 100)")
    p.add_argument("--min-valid", type=int, default=None,
                   help="valid solutions that end the batch loop (default starts/2)")
    p.add_argument("--restarts", type=int, default=5, help="extra batches allowed (default 5)")
    p.add_argument("--tau", type=float, default=10.0, help="loading box bound (default 10)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for the random starts (default: all cores)")


def _finish_solver_args(args):
    if args.dmax is None:
        args.dmax = 10 if args.cmax_rule == "real" else 6


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_fit(args) -> int:
    _finish_solver_args(args)
    arr = read_matrix(args.input)
    if args.kind == "covariance":
        if args.n is None:
            raise InputError("--n is required with covariance input")
        if arr.shape[0] != arr.shape[1]:
            raise InputError(f"covariance must be square, got {arr.shape}")
        S, N = arr, args.n
    else:
        if arr.shape[0] <= arr.shape[1]:
            raise InputError("raw data needs more rows (observations) than columns")
        X = arr - arr.mean(axis=0)
        S, N = X.T @ X / X.shape[0], (args.n or X.shape[0])
    if args.ridge:
        S = S + args.ridge * np.eye(S.shape[0])
    try:
        cov = SampleCovariance(S, N)
    except NotPositiveDefiniteError as exc:
        raise InputError("covariance is not positive definite (try --ridge)") from exc
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if cov.J < 3:
        raise InputError("at least three variables are required")
    config = _fit_config(args)
    try:
        fit = fit_hierarchical(cov, config, seed=args.seed)
    except (ALMFailure, RefitError, RuntimeError, NotPositiveDefiniteError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            _dump_json(os.path.join(args.out, "failure.json"), {
                "version": __version__, "seed": args.seed, "config": config.to_dict(),
                "error": f"{type(exc).__name__}: {exc}",
                "attempts": getattr(exc, "attempts", None),
            })
        return EXIT_SOLVER
    os.makedirs(args.out, exist_ok=True)
    payload = fit.to_dict()
    payload["input"] = {"path": os.path.abspath(args.input), "kind": args.kind,
                        "N": N, "ridge": args.ridge}
    _dump_json(os.path.join(args.out, "fit.json"), payload)
    _dump_json(os.path.join(args.out, "tree.json"), {
        "version": __version__, "seed": args.seed, "config": config.to_dict(),
        "tree": fit.tree.to_dict(),
    })
    with open(os.path.join(args.out, "loadings.csv"), "w", encoding="utf-8") as fh:
        fh.write(_header_lines(args.seed, config.to_dict()))
        fh.write(",".join(["variable"] + [f"f{k + 1}" for k in range(fit.K)] + ["unique_variance"]) + "\n")
        for j in range(cov.J):
            vals = [repr(float(x)) for x in fit.loadings[j]] + [repr(float(fit.unique_variances[j]))]
            fh.write(",".join([str(j + 1)] + vals) + "\n")
    layers = "; ".join("{" + ",".join(map(str, L)) + "}" for L in fit.layers)
    print(f"T={fit.T} K={fit.K} layers: {layers}")
    for k, vs in enumerate(fit.variable_sets(), start=1):
        print(f"  factor {k}: {_ranges(vs)}")
    print(f"discrepancy={fit.discrepancy:.6g} BIC={fit.bic:.6g}")
    if fit.heywood:
        print(f"warning: zero unique variance at variables {[i + 1 for i in fit.heywood]}",
              file=sys.stderr)
    return EXIT_OK


def _ranges(vs) -> str:
    vs = sorted(vs)
    parts, start = [], vs[0]
    for a, b in zip(vs, vs[1:] + [None]):
        if b != a + 1:
            parts.append(f"{start}-{a}" if a != start else f"{a}")
            start = b
    return ",".join(parts)


def _parse_settings(text: str):
    out = []
    for chunk in text.split(","):
        m = re.fullmatch(r"\s*(\d+):(\d+):(\d+)\s*", chunk)
        if not m:
            raise InputError(f"bad setting {chunk!r}; expected J:N:reps")
        out.append(Setting(int(m.group(1)), int(m.group(2)), int(m.group(3))))
    return out


def _tree_factory(name):
    if name == "figure1":
        def make(J):
            if J != 16:
                raise InputError("the figure1 tree has J=16")
            return figure1_tree()
        return make
    return simulation_tree


def cmd_simulate(args) -> int:
    _finish_solver_args(args)
    settings = _parse_settings(args.settings)
    factory = _tree_factory(args.tree)
    for st in settings:
        try:
            factory(st.J)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        if not args.exact and st.N <= st.J:
            raise InputError(f"N={st.N} must exceed J={st.J}")
    config = _fit_config(_single_threaded(args))

    def progress(st, r, out):
        state = "ok" if out["ok"] else f"failed ({out['error']})"
        msg = f"J={st.J} N={st.N} rep {r + 1}/{st.reps}: {state}"
        if out["ok"]:
            msg += f" EMC={out['score'].emc}"
        log.info(msg)

    res = run_benchmark(settings, config, seed=args.seed, tree_factory=factory,
                        fixed_truth=not args.per_rep_truth, exact=args.exact,
                        workers=max(1, args.threads), progress=progress)
    os.makedirs(args.out, exist_ok=True)
    extra = {"tree": args.tree, "exact": args.exact, "per_rep_truth": args.per_rep_truth}
    cfg = dict(res.config, run=extra)
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(_header_lines(args.seed, cfg))
        fh.write(res.summary_csv())
    payload = res.to_dict()
    payload["config"] = cfg
    _dump_json(os.path.join(args.out, "summary.json"), payload)
    _dump_json(os.path.join(args.out, "timings.json"), {
        "version": __version__, "seed": args.seed, "config": cfg, "timings": res.timings})
    sys.stdout.write(res.summary_csv())
    failures = sum(row["failures"] for row in res.summary)
    if failures:
        print(f"warning: {failures} replication(s) failed", file=sys.stderr)
    return EXIT_OK


def _single_threaded(args):
    # replications already run in parallel, so each fit uses one thread
    ns = argparse.Namespace(**vars(args))
    ns.threads = 1
    return ns


def cmd_check(args) -> int:
    if args.generate:
        try:
            tree = figure1_tree() if args.generate == "figure1" else simulation_tree(args.J)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        truth = generate_truth(TruthSpec(tree), np.random.default_rng(truth_seed(args.seed, tree.num_variables)))
        L = truth.loadings
    else:
        if not (args.loadings and args.tree):
            raise InputError("give --loadings and --tree, or --generate")
        L = read_matrix(args.loadings)
        tree = read_tree(args.tree)
    try:
        report = check_conditions(L, tree, tol=args.tol, budget=args.budget)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    text = report.text()
    config = {"tol": args.tol, "budget": args.budget, "generate": args.generate,
              "J": tree.num_variables}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        payload = report.to_dict()
        payload.update(version=__version__, seed=args.seed, config=config,
                       tree=tree.to_dict(), loadings=np.asarray(L).tolist())
        _dump_json(os.path.join(args.out, "report.json"), payload)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"hierfactor {__version__} seed={args.seed} config={json.dumps(config, sort_keys=True)}\n")
            fh.write(text + "\n")
    print(text)
    if report.status == "inconclusive":
        print("warning: some clauses are inconclusive (search budget exhausted)", file=sys.stderr)
    return EXIT_OK


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierfactor",
                                description="Exploratory hierarchical factor analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="learn a structure from a covariance or data file")
    f.add_argument("--input", required=True, help="delimiter-separated numeric file")
    f.add_argument("--kind", choices=["covariance", "data"], default="covariance")
    f.add_argument("--n", type=int, default=None, help="sample size (required for covariance input)")
    f.add_argument("--ridge", type=float, default=0.0, help="add this multiple of I to S")
    f.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(f)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run the simulation benchmark")
    s.add_argument("--settings", default="36:2000:5",
                   help="comma-separated J:N:reps triples (default 36:2000:5)")
    s.add_argument("--tree", choices=["sim", "figure1"], default="sim")
    s.add_argument("--exact", action="store_true", help="use the population covariance")
    s.add_argument("--per-rep-truth", action="store_true",
                   help="draw a new loading matrix for every replication")
    s.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(s)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("check", help="check identifiability conditions of a loading matrix")
    c.add_argument("--loadings", help="J x K loading matrix file")
    c.add_argument("--tree", help="tree JSON file")
    c.add_argument("--generate", choices=["sim", "figure1"],
                   help="check a generated truth instead of files")
    c.add_argument("--J", type=int, default=36, help="variables for --generate sim")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-8, help="relative singular-value threshold")
    c.add_argument("--budget", type=int, default=100_000, help="rank evaluations per clause")
    c.add_argument("--out", help="output directory")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
