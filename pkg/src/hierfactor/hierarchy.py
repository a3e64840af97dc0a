"""Factor-tree data model for hierarchical factor structures.

A hierarchical structure is a rooted tree of latent factors.  Factor ``k``
is loaded on by a set of observed variables ``v_k``; the root (factor 1,
the general factor) is loaded on by every variable and each non-leaf
factor's variable set is split among its children.

Conventions
-----------
* Factor labels and variable indices exposed by :class:`FactorNode` and
  :class:`FactorTree` are 1-based, so that ``v_1 = {1, ..., J}``.
* :class:`BlockPartition` works on 0-based *row positions* of a
  sub-matrix (positions inside ``v_k`` once it has been sorted); use
  :meth:`BlockPartition.lift` to map back to 1-based variable indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class TreeStructureError(ValueError):
    """The tree is malformed (duplicate labels, bad indices, dangling links)."""


class AmbiguousRowError(ValueError):
    """A loading row cannot be assigned to a single block."""

    def __init__(self, row: int, message: str):
        super().__init__(message)
        self.row = row


@dataclass(frozen=True)
class FactorNode:
    """One factor: its label, variable set, parent and ordered children."""

    label: int
    variables: frozenset
    parent: int | None = None
    children: tuple = ()

    @property
    def size(self) -> int:
        return len(self.variables)

    @property
    def min_variable(self) -> int:
        return min(self.variables)


@dataclass(frozen=True)
class Violation:
    constraint: str
    label: int
    detail: str

    def __str__(self):
        return f"{self.constraint} (factor {self.label}): {self.detail}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def constraints(self) -> set:
        return {v.constraint for v in self.violations}

    def __bool__(self):
        return self.ok


@dataclass(frozen=True)
class FactorTree:
    """Immutable factor tree on ``num_variables`` observed variables."""

    factors: tuple
    num_variables: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        factors = tuple(self.factors)
        object.__setattr__(self, "factors", factors)
        J = int(self.num_variables)
        if J < 1:
            raise TreeStructureError("num_variables must be positive")
        index = {}
        for node in factors:
            if not isinstance(node, FactorNode):
                raise TreeStructureError("factors must be FactorNode instances")
            if node.label in index:
                raise TreeStructureError(f"duplicate factor label {node.label}")
            if node.label < 1:
                raise TreeStructureError(f"factor label {node.label} is not positive")
            if not node.variables:
                raise TreeStructureError(f"factor {node.label} has no variables")
            bad = [v for v in node.variables if not (1 <= v <= J)]
            if bad:
                raise TreeStructureError(
                    f"factor {node.label} has out-of-range variables {sorted(bad)}"
                )
            index[node.label] = node
        roots = [n for n in factors if n.parent is None]
        if len(roots) != 1:
            raise TreeStructureError(f"expected exactly one root, found {len(roots)}")
        for node in factors:
            if node.parent is not None:
                if node.parent not in index:
                    raise TreeStructureError(
                        f"factor {node.label} has unknown parent {node.parent}"
                    )
                if node.label not in index[node.parent].children:
                    raise TreeStructureError(
                        f"factor {node.label} is not listed as a child of {node.parent}"
                    )
            for ch in node.children:
                if ch not in index:
                    raise TreeStructureError(
                        f"factor {node.label} lists unknown child {ch}"
                    )
                if index[ch].parent != node.label:
                    raise TreeStructureError(
                        f"child {ch} of factor {node.label} points to another parent"
                    )
        # every node must be reachable from the root (no cycles)
        seen = set()
        stack = [roots[0].label]
        while stack:
            lab = stack.pop()
            if lab in seen:
                raise TreeStructureError("cycle detected in factor tree")
            seen.add(lab)
            stack.extend(index[lab].children)
        if len(seen) != len(factors):
            raise TreeStructureError("factor tree is not connected")
        object.__setattr__(self, "num_variables", J)
        object.__setattr__(self, "_index", index)

    # ------------------------------------------------------------------
    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def labels(self) -> list:
        return [n.label for n in self.factors]

    @property
    def root(self) -> FactorNode:
        return next(n for n in self.factors if n.parent is None)

    def node(self, label: int) -> FactorNode:
        return self._index[label]

    def variable_sets(self) -> dict:
        """Map from label to the sorted tuple of its variables."""
        return {n.label: tuple(sorted(n.variables)) for n in self.factors}

    @property
    def layers(self) -> list:
        return compute_layers(self)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def to_dict(self) -> dict:
        return {
            "num_variables": self.num_variables,
            "root": _node_record(self, self.root.label),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FactorTree":
        J = int(payload["num_variables"])
        nodes = []

        def walk(rec, parent):
            label = int(rec["label"])
            kids = rec.get("children", [])
            nodes.append(
                FactorNode(
                    label=label,
                    variables=frozenset(int(v) for v in rec["variables"]),
                    parent=parent,
                    children=tuple(int(k["label"]) for k in kids),
                )
            )
            for k in kids:
                walk(k, label)

        walk(payload["root"], None)
        return cls(tuple(sorted(nodes, key=lambda n: n.label)), J)


def _node_record(tree: FactorTree, label: int) -> dict:
    node = tree.node(label)
    return {
        "label": node.label,
        "variables": sorted(node.variables),
        "children": [_node_record(tree, c) for c in node.children],
    }


# ----------------------------------------------------------------------
# construction helpers
# ----------------------------------------------------------------------
def tree_from_sets(sets: Sequence[Iterable[int]], num_variables: int | None = None) -> FactorTree:
    """Build a canonical tree from a collection of nested variable sets.

    The parent of each set is the smallest strictly larger set containing
    it.  Sets are 1-based.  The result is canonically labelled.  Raises
    :class:`TreeStructureError` if the sets are not laminar or if no set
    contains all the others.
    """
    fsets = [frozenset(int(v) for v in s) for s in sets]
    if not fsets:
        raise TreeStructureError("no variable sets given")
    if len(set(fsets)) != len(fsets):
        raise TreeStructureError("duplicate variable sets")
    order = sorted(range(len(fsets)), key=lambda i: (-len(fsets[i]), min(fsets[i])))
    root = fsets[order[0]]
    J = num_variables if num_variables is not None else max(root)
    parent: dict = {order[0]: None}
    for pos, i in enumerate(order[1:], start=1):
        cands = [j for j in order[:pos] if fsets[i] < fsets[j]]
        for j in order[:pos]:
            if not (fsets[i] < fsets[j]) and fsets[i] & fsets[j]:
                raise TreeStructureError("variable sets are not nested or disjoint")
        if not cands:
            raise TreeStructureError("a variable set is not contained in the root set")
        parent[i] = min(cands, key=lambda j: len(fsets[j]))
    children = {i: [] for i in range(len(fsets))}
    for i, p in parent.items():
        if p is not None:
            children[p].append(i)
    nodes = [
        FactorNode(
            label=i + 1,
            variables=fsets[i],
            parent=None if parent[i] is None else parent[i] + 1,
            children=tuple(c + 1 for c in children[i]),
        )
        for i in range(len(fsets))
    ]
    return canonical_relabel(FactorTree(tuple(nodes), J))


def tree_from_children(num_variables: int, spec: dict) -> FactorTree:
    """Build a tree from ``{label: (variables, [child labels])}``.

    Labels are kept as given (no relabelling), which is useful for
    constructing deliberately non-canonical trees.
    """
    parent = {}
    for lab, (_, kids) in spec.items():
        for k in kids:
            parent[k] = lab
    nodes = tuple(
        FactorNode(
            label=lab,
            variables=frozenset(vs),
            parent=parent.get(lab),
            children=tuple(kids),
        )
        for lab, (vs, kids) in spec.items()
    )
    return FactorTree(nodes, num_variables)


def one_factor_tree(num_variables: int) -> FactorTree:
    return tree_from_sets([range(1, num_variables + 1)], num_variables)


# ----------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------
def validate_tree(tree: FactorTree) -> ValidationReport:
    """Check the four structural constraints on a well-formed tree.

    C1: the root is factor 1 and holds all variables.  C2: any two factor
    sets are nested (the larger one carrying the smaller label) or
    disjoint.  C3: every factor has zero or at least two children whose
    sets partition it, siblings are ordered by smallest variable and
    factors are labelled breadth-first (C3a/C3b).  C4: every factor has
    at least three variables, and at least seven if it has children.
    """
    out = []
    J = tree.num_variables
    root = tree.root
    full = frozenset(range(1, J + 1))
    if root.label != 1:
        out.append(Violation("C1", root.label, "root factor is not labelled 1"))
    if root.variables != full:
        out.append(Violation("C1", root.label, "root factor does not hold all variables"))

    nodes = sorted(tree.factors, key=lambda n: n.label)
    for a_i, a in enumerate(nodes):
        for b in nodes[a_i + 1:]:
            inter = a.variables & b.variables
            if not inter:
                continue
            if b.variables < a.variables:
                continue
            out.append(
                Violation("C2", b.label,
                          f"variables of factors {a.label} and {b.label} overlap without "
                          "nesting under the smaller label")
            )

    for n in nodes:
        if len(n.children) == 1:
            out.append(Violation("C3", n.label, "factor has exactly one child"))
        if n.children:
            kids = [tree.node(c) for c in n.children]
            union = frozenset().union(*(k.variables for k in kids))
            total = sum(k.size for k in kids)
            if union != n.variables or total != n.size:
                out.append(Violation("C3", n.label,
                                     "children's variables do not partition the factor"))
            mins = [k.min_variable for k in kids]
            labs = [k.label for k in kids]
            if labs != sorted(labs) or any(
                (mins[i] < mins[j]) != (labs[i] < labs[j])
                for i in range(len(kids)) for j in range(len(kids)) if i != j
            ):
                out.append(Violation("C3a", n.label,
                                     "sibling labels do not follow smallest-variable order"))
    expected = _bfs_order(tree)
    if [n.label for n in nodes] != list(range(1, len(nodes) + 1)):
        out.append(Violation("C3b", nodes[0].label, "labels are not 1..K"))
    else:
        for pos, lab in enumerate(expected, start=1):
            if lab != pos:
                out.append(Violation("C3b", lab,
                                     "labels do not follow breadth-first parent order"))
                break
    for n in nodes:
        if n.size < 3:
            out.append(Violation("C4", n.label, f"factor has {n.size} < 3 variables"))
        elif len(n.children) >= 2 and n.size < 7:
            out.append(Violation("C4", n.label,
                                 f"factor with {len(n.children)} children has {n.size} < 7 variables"))
    return ValidationReport(tuple(out))


def _bfs_order(tree: FactorTree) -> list:
    """Labels in canonical breadth-first order, siblings by smallest variable."""
    order = []
    queue = [tree.root.label]
    while queue:
        lab = queue.pop(0)
        order.append(lab)
        kids = sorted(tree.node(lab).children, key=lambda c: tree.node(c).min_variable)
        queue.extend(kids)
    return order


def compute_layers(tree: FactorTree) -> list:
    """Return ``[L_1, ..., L_T]`` as lists of factor labels."""
    layers = [[tree.root.label]]
    while True:
        nxt = [c for lab in layers[-1] for c in tree.node(lab).children]
        if not nxt:
            return layers
        layers.append(nxt)


def canonical_relabel(tree: FactorTree) -> FactorTree:
    """Relabel factors breadth-first with siblings ordered by smallest variable."""
    order = _bfs_order(tree)
    new = {old: i + 1 for i, old in enumerate(order)}
    nodes = []
    for old in order:
        n = tree.node(old)
        kids = sorted(n.children, key=lambda c: tree.node(c).min_variable)
        nodes.append(
            FactorNode(
                label=new[old],
                variables=n.variables,
                parent=None if n.parent is None else new[n.parent],
                children=tuple(new[c] for c in kids),
            )
        )
    return FactorTree(tuple(nodes), tree.num_variables)


@dataclass(frozen=True)
class LoadingPattern:
    """Boolean support of a loading matrix (``True`` = free loading)."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("mask must be two-dimensional")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def num_free(self) -> int:
        return int(self.mask.sum())

    def column_sets(self) -> list:
        """1-based variable sets of each column."""
        return [frozenset((np.flatnonzero(self.mask[:, k]) + 1).tolist())
                for k in range(self.mask.shape[1])]

    def __eq__(self, other):
        return isinstance(other, LoadingPattern) and np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash(self.mask.tobytes()) ^ hash(self.mask.shape)


def pattern_from_tree(tree: FactorTree) -> LoadingPattern:
    """Loading support of ``tree``; column ``k-1`` corresponds to factor ``k``."""
    J = tree.num_variables
    labels = sorted(tree.labels)
    mask = np.zeros((J, len(labels)), dtype=bool)
    for col, lab in enumerate(labels):
        idx = np.array(sorted(tree.node(lab).variables)) - 1
        mask[idx, col] = True
    return LoadingPattern(mask)


def tree_from_pattern(pattern: LoadingPattern) -> FactorTree:
    """Inverse of :func:`pattern_from_tree` via the nested column supports."""
    return tree_from_sets(pattern.column_sets(), pattern.shape[0])


@dataclass(frozen=True)
class BlockPartition:
    """Ordered partition of row positions ``0..m-1`` into child blocks."""

    blocks: tuple
    num_rows: int

    def __post_init__(self):
        blocks = tuple(tuple(sorted(int(i) for i in b)) for b in self.blocks)
        if any(len(b) == 0 for b in blocks):
            raise ValueError("blocks must be nonempty")
        flat = [i for b in blocks for i in b]
        if sorted(flat) != list(range(self.num_rows)):
            raise ValueError("blocks must partition 0..num_rows-1")
        blocks = tuple(sorted(blocks, key=min))
        object.__setattr__(self, "blocks", blocks)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def sizes(self) -> tuple:
        return tuple(len(b) for b in self.blocks)

    def labels(self) -> np.ndarray:
        """Block index of each row."""
        out = np.empty(self.num_rows, dtype=int)
        for s, b in enumerate(self.blocks):
            out[list(b)] = s
        return out

    def lift(self, variables: Sequence[int]) -> list:
        """Map blocks to subsets of ``variables`` (sorted, typically 1-based)."""
        vs = sorted(variables)
        if len(vs) != self.num_rows:
            raise ValueError("variable list length does not match the partition")
        return [frozenset(vs[i] for i in b) for b in self.blocks]

    def satisfies_min_size(self, minimum: int = 3) -> bool:
        return all(len(b) >= minimum for b in self.blocks)


def block_columns(s: int, d: int) -> range:
    """0-based column indices of block ``s`` (0-based) in a ``1+c*d`` matrix."""
    return range(1 + s * d, 1 + (s + 1) * d)


def partition_from_loading(lam: np.ndarray, c: int, d: int, delta2: float = 0.01) -> BlockPartition:
    """Assign each row to the one block whose loadings are not suppressed.

    ``lam`` has ``1 + c*d`` columns; the first is the parent factor and the
    rest form ``c`` groups of ``d`` columns.  A row belongs to block ``s``
    when every loading outside block ``s`` is below ``delta2`` in absolute
    value.  Raises :class:`AmbiguousRowError` for a row with zero or more
    than one candidate block.
    """
    lam = np.asarray(lam, dtype=float)
    m, p = lam.shape
    if p != 1 + c * d:
        raise ValueError(f"expected {1 + c * d} columns, got {p}")
    if delta2 <= 0:
        raise ValueError("delta2 must be positive")
    blk = np.abs(lam[:, 1:]).reshape(m, c, d).max(axis=2)
    members = [[] for _ in range(c)]
    for i in range(m):
        above = np.flatnonzero(blk[i] >= delta2)
        if len(above) == 1:
            members[above[0]].append(i)
        elif len(above) == 0:
            raise AmbiguousRowError(i, f"row {i} has no block above {delta2}")
        else:
            raise AmbiguousRowError(i, f"row {i} loads on blocks {above.tolist()}")
    empty = [s for s in range(c) if not members[s]]
    if empty:
        raise ValueError(f"blocks {empty} received no rows")
    return BlockPartition(tuple(tuple(b) for b in members), m)


def partition_by_dominant_block(lam: np.ndarray, c: int, d: int) -> tuple:
    """Fallback assignment: each row goes to the block with the largest loading.

    Returns ``(labels, nonempty)`` where ``labels[i]`` is the block of row
    ``i`` in column-group order and ``nonempty`` is the list of blocks that
    received at least one row.
    """
    lam = np.asarray(lam, dtype=float)
    m = lam.shape[0]
    blk = np.abs(lam[:, 1:]).reshape(m, c, d).max(axis=2)
    labels = blk.argmax(axis=1)
    return labels, sorted(set(labels.tolist()))
