"""
Branch-dependent history trees.

A tree is grown one time step at a time on a fixed global grid. Every leaf is
evolved to the next grid time and split by the projector set assigned to its
own label; a ``TRIVIAL`` assignment stands for the one-member set {I} and pads
branches that need no alternative at that step. Node vectors are stored in the
Schrodinger picture at the node's own grid time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import DimensionError, TreeError, UnknownLabelError
from .linalg import (
    DEFAULT_TOL,
    Diagnostic,
    Hamiltonian,
    Projector,
    ProjectorSet,
    ToleranceConfig,
    as_vector,
    validate_projector_set,
)

log = logging.getLogger(__name__)

Label = tuple


class _Trivial:
    """Singleton for the trivial set {I}."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "TRIVIAL"

    def __reduce__(self):
        return (_Trivial, ())

    def as_set(self, dim: int) -> ProjectorSet:
        return ProjectorSet([Projector.identity(dim)], label="trivial", names=("I",))


TRIVIAL = _Trivial()
Trivial = _Trivial
StepSet = Union[ProjectorSet, _Trivial]


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    steps: tuple

    def __post_init__(self):
        steps = tuple(float(t) for t in self.steps)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "t0", float(self.t0))
        times = (self.t0,) + steps
        if any(not np.isfinite(t) for t in times):
            raise ValueError("grid times must be finite")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"grid must be strictly increasing from t0, got {times}")

    @classmethod
    def uniform(cls, n: int, dt: float = 1.0, t0: float = 0.0) -> "TimeGrid":
        return cls(t0, tuple(t0 + dt * (k + 1) for k in range(n)))

    def __len__(self):
        return len(self.steps)

    def time(self, depth: int) -> float:
        """Grid time at a tree depth (depth 0 is t0)."""
        return self.t0 if depth == 0 else self.steps[depth - 1]

    def interval(self, depth: int) -> float:
        """Duration from depth-1 to depth."""
        return self.time(depth) - self.time(depth - 1)

    def extended(self, dt: float) -> "TimeGrid":
        return TimeGrid(self.t0, self.steps + (self.time(len(self.steps)) + dt,))

    def to_dict(self) -> dict:
        return {"t0": self.t0, "steps": list(self.steps)}


@dataclass(eq=False)
class BranchNode:
    label: tuple
    depth: int
    vector: np.ndarray
    projector: np.ndarray | None = None
    child_set: StepSet | None = None
    children: tuple = ()
    negligible: bool = False
    # labels in the source tree merged into this node (coarse-grained trees only)
    members: tuple | None = None

    @property
    def probability(self) -> float:
        return float(np.vdot(self.vector, self.vector).real)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __repr__(self):
        return f"BranchNode({self.label}, p={self.probability:.6g})"


class BranchTree:
    """Immutable branch-dependent set of histories grown on a fixed grid."""

    def __init__(
        self,
        grid: TimeGrid,
        hamiltonian: Hamiltonian,
        root: BranchNode,
        *,
        tol: ToleranceConfig = DEFAULT_TOL,
        rules: tuple = (),
        source: "BranchTree | None" = None,
        name: str = "",
    ):
        self.grid = grid
        self.hamiltonian = hamiltonian
        self.root = root
        self.tol = tol
        self.rules = tuple(rules)
        self.source = source
        self.name = name
        self._class_ops: dict = {}

    @property
    def dim(self) -> int:
        return self.hamiltonian.dim

    @property
    def psi0(self) -> np.ndarray:
        return self.root.vector

    @cached_property
    def _levels(self) -> list[list[BranchNode]]:
        levels = [[self.root]]
        while True:
            nxt = [c for n in levels[-1] for c in n.children]
            if not nxt:
                return levels
            levels.append(nxt)

    @cached_property
    def _index(self) -> dict:
        return {n.label: n for level in self._levels for n in level}

    @property
    def depth(self) -> int:
        return len(self._levels) - 1

    @property
    def time(self) -> float:
        return self.grid.time(self.depth)

    def nodes_at(self, depth: int) -> list[BranchNode]:
        return list(self._levels[depth])

    def leaves(self) -> list[BranchNode]:
        return list(self._levels[-1])

    def labels(self) -> list[tuple]:
        return [n.label for n in self._levels[-1]]

    def node(self, label) -> BranchNode:
        try:
            return self._index[tuple(label)]
        except KeyError:
            raise UnknownLabelError(f"no branch with label {tuple(label)}") from None

    def __contains__(self, label) -> bool:
        return tuple(label) in self._index

    def __iter__(self) -> Iterator[BranchNode]:
        for level in self._levels:
            yield from level

    def __len__(self):
        return len(self._levels[-1])

    def __repr__(self):
        return f"BranchTree({self.name!r}, depth={self.depth}, leaves={len(self)})"

    def leaf_matrix(self) -> np.ndarray:
        """Leaf vectors stacked as rows, in leaf order."""
        return np.stack([n.vector for n in self._levels[-1]])

    def evolved_state(self, depth: int | None = None) -> np.ndarray:
        """U(t_depth, t0) applied to the initial state."""
        depth = self.depth if depth is None else depth
        return self.hamiltonian.propagator(self.grid.time(depth) - self.grid.t0) @ self.psi0

    def branch_vector(self, prefix) -> np.ndarray:
        """Sum of the leaf vectors whose label starts with ``prefix``."""
        prefix = tuple(prefix)
        k = len(prefix)
        hits = [n.vector for n in self._levels[-1] if n.label[:k] == prefix]
        if not hits:
            raise UnknownLabelError(f"no leaf below prefix {prefix}")
        return np.sum(hits, axis=0)

    def with_grid(self, grid: TimeGrid) -> "BranchTree":
        if grid.t0 != self.grid.t0 or grid.steps[: self.depth] != self.grid.steps[: self.depth]:
            raise TreeError("new grid must agree with the times already used")
        return BranchTree(grid, self.hamiltonian, self.root, tol=self.tol, rules=self.rules,
                          source=self.source, name=self.name)

    def truncated(self, depth: int) -> "BranchTree":
        """The tree cut back to ``depth`` (nodes below become leaves)."""
        if not 0 <= depth <= self.depth:
            raise TreeError(f"depth {depth} outside 0..{self.depth}")
        root = _clone(self.root, stop=depth)
        return BranchTree(self.grid, self.hamiltonian, root, tol=self.tol,
                          rules=self.rules[:depth], source=self.source, name=self.name)

    def summary(self) -> dict:
        leaves = self.leaves()
        return {
            "depth": self.depth,
            "n_leaves": len(leaves),
            "leaves": [
                {"label": list(n.label), "probability": n.probability, "negligible": n.negligible}
                for n in leaves
            ],
            "total_probability": float(sum(n.probability for n in leaves)),
        }


def _clone(node: BranchNode, stop: int | None = None) -> BranchNode:
    children = ()
    child_set = node.child_set
    if stop is None or node.depth < stop:
        children = tuple(_clone(c, stop) for c in node.children)
    else:
        child_set = None
    return BranchNode(
        label=node.label,
        depth=node.depth,
        vector=node.vector,
        projector=node.projector,
        child_set=child_set,
        children=children,
        negligible=node.negligible,
        members=node.members,
    )


def _readonly(v: np.ndarray) -> np.ndarray:
    v = np.ascontiguousarray(v)
    v.setflags(write=False)
    return v


def start_tree(psi0, h: Hamiltonian, grid: TimeGrid, tol: ToleranceConfig = DEFAULT_TOL,
               name: str = "") -> BranchTree:
    """A tree holding only the initial state at t0."""
    psi = _readonly(as_vector(psi0, h.dim).copy())
    root = BranchNode(label=(), depth=0, vector=psi)
    return BranchTree(grid, h, root, tol=tol, name=name)


Assignment = Union[Mapping, Callable]


def extend_tree(tree: BranchTree, step_sets: Assignment, rule=None) -> BranchTree:
    """Advance every leaf one grid step and split it by its assigned set.

    ``step_sets`` maps each current leaf label to a ProjectorSet or TRIVIAL
    (or is a callable ``label -> set``). The assignment for a leaf may only
    depend on that leaf's own label, so causality holds by construction.
    """
    depth = tree.depth
    if depth >= len(tree.grid):
        raise TreeError(f"time grid exhausted: tree is at depth {depth} of {len(tree.grid)}")
    leaves = tree.leaves()
    labels = [n.label for n in leaves]
    if callable(step_sets) and not isinstance(step_sets, Mapping):
        assigned = {lab: step_sets(lab) for lab in labels}
    else:
        assigned = {tuple(k): v for k, v in step_sets.items()}
        missing = [lab for lab in labels if lab not in assigned]
        if missing:
            raise TreeError(f"no projector set assigned to leaves {missing[:5]}")
        extra = [k for k in assigned if k not in set(labels)]
        if extra:
            raise TreeError(f"assignment names labels that are not current leaves: {extra[:5]}")

    dim = tree.dim
    checked: dict[int, ProjectorSet] = {}
    for lab in labels:
        s = assigned[lab]
        if s is None:
            raise TreeError(f"no projector set assigned to leaf {lab}")
        if isinstance(s, _Trivial):
            continue
        if not isinstance(s, ProjectorSet):
            raise TypeError(f"assignment for {lab} must be a ProjectorSet or TRIVIAL, got {type(s).__name__}")
        if id(s) in checked:
            continue
        if s.dim != dim:
            raise DimensionError(f"set {s.label!r} has dimension {s.dim}, tree has {dim}")
        diag = validate_projector_set(s, tree.tol)
        if not diag.passed:
            raise TreeError(f"set {s.label!r} is not exhaustive/exclusive: {diag.details}")
        checked[id(s)] = s

    u = tree.hamiltonian.propagator(tree.grid.interval(depth + 1))
    evolved = (u @ np.stack([n.vector for n in leaves]).T).T
    floor = tree.tol.tol_proj ** 2

    # group leaves by set so each set is applied in one batched product
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(id(assigned[lab]), []).append(i)
    new_children: list[tuple | None] = [None] * len(leaves)
    ident = None
    for _, idxs in groups.items():
        s = assigned[labels[idxs[0]]]
        block = evolved[idxs]
        if isinstance(s, _Trivial):
            if ident is None:
                ident = _readonly(np.eye(dim, dtype=complex))
            for row, i in enumerate(idxs):
                v = _readonly(block[row].copy())
                child = BranchNode(label=labels[i] + (0,), depth=depth + 1, vector=v, projector=ident,
                                   negligible=bool(np.vdot(v, v).real <= floor))
                new_children[i] = (child,)
            continue
        split = np.einsum("mij,nj->nmi", s.stack, block)
        for row, i in enumerate(idxs):
            kids = []
            for a, p in enumerate(s.members):
                v = _readonly(split[row, a].copy())
                kids.append(BranchNode(label=labels[i] + (a,), depth=depth + 1, vector=v,
                                       projector=p.matrix,
                                       negligible=bool(np.vdot(v, v).real <= floor)))
            new_children[i] = tuple(kids)

    leaf_ids = {id(n): i for i, n in enumerate(leaves)}

    def rebuild(node: BranchNode) -> BranchNode:
        if node.children:
            kids = tuple(rebuild(c) for c in node.children)
            child_set = node.child_set
        else:
            i = leaf_ids[id(node)]
            kids = new_children[i]
            child_set = assigned[labels[i]]
        return BranchNode(label=node.label, depth=node.depth, vector=node.vector,
                          projector=node.projector, child_set=child_set, children=kids,
                          negligible=node.negligible, members=node.members)

    root = rebuild(tree.root)
    return BranchTree(tree.grid, tree.hamiltonian, root, tol=tree.tol,
                      rules=tree.rules + (rule,), source=tree.source, name=tree.name)


def build_uniform_history(pset: StepSet, grid: TimeGrid, h: Hamiltonian, psi0,
                          tol: ToleranceConfig = DEFAULT_TOL, name: str = "") -> BranchTree:
    """Histories with the same set of alternatives at every grid time."""
    if isinstance(pset, ProjectorSet):
        diag = validate_projector_set(pset, tol)
        if not diag.passed:
            raise TreeError(f"invalid projector set: {diag.details}")
    tree = start_tree(psi0, h, grid, tol, name=name)
    for _ in range(len(grid)):
        tree = extend_tree(tree, lambda lab: pset)
    return tree


def branch_probability(tree: BranchTree, label) -> float:
    """Squared norm of a branch vector; meaningful only for decoherent sets."""
    return tree.node(label).probability


def check_branch_sum(tree: BranchTree) -> Diagnostic:
    """Residual of sum(branches at depth d) - U(t_d, t0) psi0 for every depth."""
    residuals = []
    for d in range(tree.depth + 1):
        total = np.sum([n.vector for n in tree.nodes_at(d)], axis=0)
        residuals.append(float(np.linalg.norm(total - tree.evolved_state(d))))
    value = max(residuals)
    return Diagnostic("branch_sum", value <= tree.tol.tol_proj, value, tree.tol.tol_proj,
                      details={"per_depth": residuals})


def class_operator(tree: BranchTree, label) -> np.ndarray:
    """Explicit chain of projectors and unitary steps for one history."""
    label = tuple(label)
    node = tree.node(label)
    return _class_op(tree, node)


def _class_op(tree: BranchTree, node: BranchNode) -> np.ndarray:
    cached = tree._class_ops.get(node.label)
    if cached is not None:
        return cached
    if node.depth == 0:
        op = np.eye(tree.dim, dtype=complex)
    elif node.projector is None:
        if node.members is None or tree.source is None:
            raise TreeError(f"node {node.label} has neither a projector nor source members")
        op = sum(_class_op(tree.source, tree.source.node(m)) for m in node.members)
    else:
        parent = tree.node(node.label[:-1])
        u = tree.hamiltonian.propagator(tree.grid.interval(node.depth))
        op = node.projector @ u @ _class_op(tree, parent)
    op.setflags(write=False)
    tree._class_ops[node.label] = op
    return op


def coarse_grain(tree: BranchTree, grouping: Sequence[Iterable], name: str | None = None) -> BranchTree:
    """Merge leaves into groups; each coarse history sums its members' branches.

    Interior structure is induced from the grouping: two nodes at a depth are
    merged when they share a descendant group. A merged node whose members
    all descend from one fine node keeps a projector (the sum of the fine
    ones); otherwise it is an aggregate and its class operator is the sum of
    the fine class operators.
    """
    leaves = tree.leaves()
    leaf_labels = [n.label for n in leaves]
    group_of: dict[tuple, int] = {}
    for g, members in enumerate(grouping):
        for lab in members:
            lab = tuple(lab)
            if lab not in tree or tree.node(lab).children:
                raise TreeError(f"grouping names {lab}, which is not a leaf")
            if lab in group_of:
                raise TreeError(f"leaf {lab} appears in more than one group")
            group_of[lab] = g
    missing = [lab for lab in leaf_labels if lab not in group_of]
    if missing:
        raise TreeError(f"grouping is not exhaustive; missing leaves {missing[:5]}")

    n = tree.depth
    # groups below each node, bottom-up
    below: dict[tuple, frozenset] = {lab: frozenset([group_of[lab]]) for lab in leaf_labels}
    for d in range(n - 1, -1, -1):
        for node in tree.nodes_at(d):
            below[node.label] = frozenset().union(*(below[c.label] for c in node.children))

    # components per depth: union-find over nodes sharing any group
    comps: list[list[list[tuple]]] = []
    for d in range(n + 1):
        labs = [node.label for node in tree.nodes_at(d)]
        parent = {lab: lab for lab in labs}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        owner: dict[int, tuple] = {}
        for lab in labs:
            for g in below[lab]:
                if g in owner:
                    ra, rb = find(owner[g]), find(lab)
                    if ra != rb:
                        parent[rb] = ra
                else:
                    owner[g] = lab
        buckets: dict[tuple, list[tuple]] = {}
        for lab in labs:
            buckets.setdefault(find(lab), []).append(lab)
        comps.append(sorted(buckets.values(), key=lambda c: c[0]))

    floor = tree.tol.tol_proj ** 2
    comp_of: list[dict[tuple, int]] = [
        {lab: i for i, comp in enumerate(level) for lab in comp} for level in comps
    ]

    def make(d: int, ci: int, label: tuple, projector) -> BranchNode:
        members = tuple(comps[d][ci])
        vector = _readonly(np.sum([tree.node(m).vector for m in members], axis=0))
        child_set = None
        children: tuple = ()
        if d < n:
            kid_ids: list[int] = []
            for m in members:
                for c in tree.node(m).children:
                    k = comp_of[d + 1][c.label]
                    if k not in kid_ids:
                        kid_ids.append(k)
            kid_ids.sort(key=lambda k: comps[d + 1][k][0])
            single = len(members) == 1
            kid_projs = []
            for k in kid_ids:
                if single:
                    p = np.sum([tree.node(m).projector for m in comps[d + 1][k]], axis=0)
                    kid_projs.append(_readonly(p))
                else:
                    kid_projs.append(None)
            if single:
                child_set = ProjectorSet([Projector(p, check=False) for p in kid_projs],
                                         label="coarse")
            children = tuple(
                make(d + 1, k, label + (j,), kid_projs[j]) for j, k in enumerate(kid_ids)
            )
        return BranchNode(label=label, depth=d, vector=vector, projector=projector,
                          child_set=child_set, children=children,
                          negligible=bool(np.vdot(vector, vector).real <= floor) if d else False,
                          members=members)

    root = make(0, 0, (), None)
    return BranchTree(tree.grid, tree.hamiltonian, root, tol=tree.tol, rules=tree.rules,
                      source=tree, name=tree.name if name is None else name)
