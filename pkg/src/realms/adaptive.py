"""
Branch-dependent assignment rules and the greedy maximal-refinement search.

A rule sees one leaf and a step context (interval, propagator, tolerances) and
returns the set of alternatives for that leaf, or None to defer. It never sees
the tree, so a branch's alternatives depend on its own history only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .decoherence import medium_check, strong_check
from .errors import NotSystemLocalError, TreeError
from .framework import Factorization, factor_hilbert, framework_for_tree
from .histories import TRIVIAL, BranchNode, BranchTree, _class_op, _Trivial, extend_tree, start_tree
from .linalg import DEFAULT_TOL, Hamiltonian, Projector, ProjectorSet, ToleranceConfig

log = logging.getLogger(__name__)

DEFAULT_P_MIN = 1e-8


@dataclass(frozen=True)
class RuleContext:
    step: int
    dt: float
    propagator: np.ndarray
    tol: ToleranceConfig


class BranchRule:
    kind = "rule"

    def assign(self, node: BranchNode, ctx: RuleContext):
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class FixedRule(BranchRule):
    """A given set for every leaf, or per label prefix (longest prefix wins)."""

    kind = "fixed"

    def __init__(self, sets):
        if isinstance(sets, (ProjectorSet, _Trivial)):
            self.table = {(): sets}
        elif isinstance(sets, Mapping):
            self.table = {tuple(k): v for k, v in sets.items()}
        else:
            raise TypeError("FixedRule takes a ProjectorSet, TRIVIAL or a prefix mapping")
        self._lengths = sorted({len(k) for k in self.table}, reverse=True)

    def assign(self, node, ctx):
        for k in self._lengths:
            if len(node.label) < k:
                continue
            hit = self.table.get(node.label[:k])
            if hit is not None:
                return hit
        return None

    def to_dict(self):
        return {"kind": self.kind,
                "prefixes": [{"prefix": list(k), "set": _set_name(v)} for k, v in self.table.items()]}


class PruneRule(BranchRule):
    """TRIVIAL for leaves below p_min; defers otherwise."""

    kind = "prune_threshold"

    def __init__(self, p_min: float = DEFAULT_P_MIN):
        p_min = float(p_min)
        if not 0.0 <= p_min < 1.0:
            raise ValueError(f"p_min must lie in [0, 1), got {p_min}")
        self.p_min = p_min

    def assign(self, node, ctx):
        return TRIVIAL if node.probability < self.p_min else None

    def to_dict(self):
        return {"kind": self.kind, "p_min": self.p_min}


class FollowSupportRule(BranchRule):
    """Fine cells where the leaf's evolved mass is at least ``threshold`` of its total.

    The remaining cells are merged into one coarse alternative.
    """

    kind = "follow_support"

    def __init__(self, cells: ProjectorSet, threshold: float = 1e-3):
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        self.cells = cells
        self.threshold = float(threshold)
        self._cache: dict[tuple, ProjectorSet] = {}

    def support(self, vec: np.ndarray) -> list[int]:
        p = float(np.vdot(vec, vec).real)
        if p == 0.0:
            return []
        mass = np.real(np.einsum("i,mij,j->m", vec.conj(), self.cells.stack, vec))
        return [c for c in range(len(self.cells)) if mass[c] >= self.threshold * p]

    def assign(self, node, ctx):
        w = ctx.propagator @ node.vector
        keep = tuple(self.support(w))
        if not keep:
            return TRIVIAL
        if len(keep) == len(self.cells):
            return self.cells
        hit = self._cache.get(keep)
        if hit is None:
            members = [self.cells[c] for c in keep]
            rest = np.eye(self.cells.dim, dtype=complex) - sum(p.matrix for p in members)
            if np.real(np.trace(rest)) >= 0.5:
                members.append(Projector(rest, ctx.tol))
            names = [f"cell{c}" for c in keep] + ["rest"]
            hit = ProjectorSet(members, label=f"follow{list(keep)}", names=names[:len(members)])
            self._cache[keep] = hit
        return hit

    def to_dict(self):
        return {"kind": self.kind, "threshold": self.threshold, "n_cells": len(self.cells)}


class CompositeRule(BranchRule):
    """First rule with an answer wins."""

    kind = "composite"

    def __init__(self, rules: Sequence[BranchRule]):
        if not rules:
            raise ValueError("composite rule needs at least one rule")
        self.rules = tuple(rules)

    def assign(self, node, ctx):
        for r in self.rules:
            s = r.assign(node, ctx)
            if s is not None:
                return s
        return None

    def to_dict(self):
        return {"kind": self.kind, "rules": [r.to_dict() for r in self.rules]}


def _set_name(s) -> str:
    return "trivial" if isinstance(s, _Trivial) else (s.label or f"set[{len(s)}]")


def rule_context(tree: BranchTree, step: int | None = None) -> RuleContext:
    step = tree.depth + 1 if step is None else step
    if step != tree.depth + 1:
        raise TreeError(f"rules assign the next step ({tree.depth + 1}), not step {step}")
    if step > len(tree.grid):
        raise TreeError("time grid exhausted")
    dt = tree.grid.interval(step)
    return RuleContext(step, dt, tree.hamiltonian.propagator(dt), tree.tol)


def apply_rule(tree: BranchTree, rule: BranchRule, step: int | None = None) -> dict:
    """Assignment map {leaf label: set} for the next step."""
    ctx = rule_context(tree, step)
    out = {}
    for node in tree.leaves():
        s = rule.assign(node, ctx)
        if s is None:
            raise TreeError(f"rule {rule.kind} gives no set for leaf {node.label}")
        out[node.label] = s
    return out


def grow(tree: BranchTree, rules: Sequence[BranchRule]) -> BranchTree:
    for rule in rules:
        tree = extend_tree(tree, apply_rule(tree, rule), rule)
    return tree


def leaf_patterns(tree: BranchTree) -> dict:
    """Per leaf, its label with None at steps that used the trivial set."""
    out = {}
    for leaf in tree.leaves():
        pat = []
        for k in range(1, leaf.depth + 1):
            parent = tree.node(leaf.label[:k - 1])
            pat.append(None if isinstance(parent.child_set, _Trivial) else leaf.label[k - 1])
        out[leaf.label] = tuple(pat)
    return out


def group_by_patterns(coarse: BranchTree, fine: BranchTree) -> dict:
    """Map each coarse leaf to the fine leaves matching its pattern."""
    pats = leaf_patterns(coarse)
    out = {lab: [] for lab in pats}
    for f in fine.labels():
        for lab, pat in pats.items():
            if all(p is None or p == x for p, x in zip(pat, f)):
                out[lab].append(f)
                break
    return out


def total_variation(coarse: BranchTree, fine: BranchTree) -> float:
    """TV distance between coarse leaf probabilities and grouped fine ones."""
    groups = group_by_patterns(coarse, fine)
    tv = 0.0
    for lab, members in groups.items():
        pf = sum(fine.node(m).probability for m in members)
        tv += abs(coarse.node(lab).probability - pf)
    return 0.5 * tv


@dataclass
class RefinementCandidate:
    """Replace the set used at ``step`` (1-based) on leaves under ``prefix`` by a finer one."""
    step: int
    pset: ProjectorSet
    prefix: tuple | None = None
    name: str = ""

    def targets(self, label: tuple) -> bool:
        return self.prefix is None or tuple(label[:len(self.prefix)]) == tuple(self.prefix)

    def to_dict(self) -> dict:
        return {"name": self.name, "step": self.step,
                "prefix": None if self.prefix is None else list(self.prefix), "n_members": len(self.pset)}


@dataclass
class RefinementReport:
    order: list
    entries: list = field(default_factory=list)
    mode: str = "medium"
    final: dict = field(default_factory=dict)
    sweeps: int = 0

    @property
    def accepted(self) -> list:
        return [e["name"] for e in self.entries if e["status"] == "accepted"]

    @property
    def rejected(self) -> list:
        return [e["name"] for e in self.entries if e["status"] == "rejected"]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "candidate_order": list(self.order), "sweeps": self.sweeps,
                "n_accepted": len(self.accepted), "n_rejected": len(self.rejected),
                "entries": list(self.entries), "final": dict(self.final)}


def _current_set(node: BranchNode, dim: int) -> ProjectorSet:
    s = node.child_set
    return s.as_set(dim) if isinstance(s, _Trivial) else s


def _refinement_map(coarse: ProjectorSet, fine: ProjectorSet, tol: ToleranceConfig):
    """Index map fine member -> coarse member, or None if ``fine`` does not refine ``coarse``."""
    mapping = []
    for p in fine:
        hit = None
        for j, q in enumerate(coarse):
            if np.linalg.norm(q.matrix @ p.matrix - p.matrix) <= tol.tol_proj:
                hit = j
                break
        if hit is None:
            return None
        mapping.append(hit)
    for j, q in enumerate(coarse):
        total = sum((fine[i].matrix for i, m in enumerate(mapping) if m == j), np.zeros_like(q.matrix))
        if np.linalg.norm(total - q.matrix) > tol.tol_proj:
            return None
    return mapping


def apply_candidate(tree: BranchTree, cand: RefinementCandidate, tol: ToleranceConfig | None = None):
    """Regrow the tree with the candidate set in place. Returns (tree, status, note).

    Labels below the refined step are translated back to the old tree so the
    later steps keep the sets they had.
    """
    tol = tol or tree.tol
    if any(n.members is not None for n in tree):
        raise TreeError("refinement needs a tree grown by extend_tree, not a coarse-grained one")
    if not 1 <= cand.step <= tree.depth:
        return tree, "invalid", f"step {cand.step} outside 1..{tree.depth}"
    targets = [n for n in tree.nodes_at(cand.step - 1) if cand.targets(n.label)]
    if not targets:
        return tree, "invalid", "no branch matches the prefix"
    maps: dict[int, list] = {}
    noop = True
    for n in targets:
        cur = _current_set(n, tree.dim)
        key = id(n.child_set)
        if key not in maps:
            m = _refinement_map(cur, cand.pset, tol)
            if m is None:
                return tree, "invalid", f"candidate does not refine the set at {n.label}"
            maps[key] = m
        if not (len(cur) == len(cand.pset) and cur.same_as(cand.pset, tol.tol_proj)):
            noop = False
    if noop:
        return tree, "no-op", "set already in place"

    k = cand.step - 1
    target_ids = {n.label: maps[id(n.child_set)] for n in targets}

    def translate(label: tuple) -> tuple:
        if len(label) > k and label[:k] in target_ids:
            m = target_ids[label[:k]]
            return label[:k] + (m[label[k]],) + label[k + 1:]
        return label

    new = start_tree(tree.psi0, tree.hamiltonian, tree.grid, tree.tol, name=tree.name)
    for d in range(tree.depth):
        assign = {}
        for leaf in new.leaves():
            if d == k and leaf.label in target_ids:
                assign[leaf.label] = cand.pset
            else:
                assign[leaf.label] = tree.node(translate(leaf.label)).child_set
        rule = tree.rules[d] if d < len(tree.rules) else None
        new = extend_tree(new, assign, rule)
    return new, "changed", ""


def _measure(tree: BranchTree, mode: str, fact: Factorization | None, tol: ToleranceConfig):
    if mode == "medium":
        rep = medium_check(tree, tol)
        return rep.passes, rep.max_offdiag, None
    if mode == "strong":
        f = fact
        try:
            if f is None:
                f = factor_hilbert(framework_for_tree(tree, tol=tol))
            rep = strong_check(tree, f, tol)
        except NotSystemLocalError as exc:
            return False, float("inf"), str(exc)
        return rep.passes, rep.max_cross_past, None
    raise ValueError(f"unknown mode {mode!r}")


def maximal_refine(tree: BranchTree, candidates: Sequence[RefinementCandidate], mode: str = "medium",
                   tol: ToleranceConfig | None = None, fact: Factorization | None = None,
                   max_sweeps: int = 10):
    """Greedy refinement in the given order; sweep until a sweep accepts nothing.

    A candidate is kept iff the refined tree passes the selected check. The
    result is maximal relative to the candidate list only.
    """
    tol = tol or tree.tol
    order = [c.name or f"candidate{i}" for i, c in enumerate(candidates)]
    report = RefinementReport(order=order, mode=mode)
    cur = tree
    for sweep in range(max_sweeps):
        accepted = 0
        for name, cand in zip(order, candidates):
            trial, status, note = apply_candidate(cur, cand, tol)
            entry = {"sweep": sweep, "name": name, "step": cand.step}
            if status != "changed":
                entry.update(status=status, measure=None, note=note)
                if sweep == 0:
                    report.entries.append(entry)
                continue
            ok, value, note = _measure(trial, mode, fact, tol)
            entry.update(status="accepted" if ok else "rejected", measure=value, note=note or "")
            # later sweeps only log new outcomes, keeping the log monotone
            if sweep == 0 or ok:
                report.entries.append(entry)
            if ok:
                cur = trial
                accepted += 1
                log.info("accepted %s (measure %.3g)", name, value)
        report.sweeps = sweep + 1
        if accepted == 0:
            break
    final = medium_check(cur, tol)
    report.final = {"n_leaves": len(cur), "depth": cur.depth, "medium_passes": final.passes,
                    "max_offdiag": final.max_offdiag}
    return cur, report


def _paths(tree: BranchTree) -> dict:
    out = {}
    for leaf in tree.leaves():
        out[leaf.label] = [tree.node(leaf.label[:k]) for k in range(1, leaf.depth + 1)]
    return out


def is_coarse_graining_of(a: BranchTree, b: BranchTree, tol: ToleranceConfig | None = None):
    """Whether every class operator of ``a`` is a sum of class operators of ``b``.

    Returns (flag, witness). On success the witness maps each a-leaf to the
    b-leaves it sums; on failure it names the first a-leaf with its residual.
    """
    tol = tol or a.tol
    if a.grid.t0 != b.grid.t0 or a.depth != b.depth or a.grid.steps[:a.depth] != b.grid.steps[:b.depth]:
        raise TreeError("trees live on different time grids")
    if a.dim != b.dim:
        raise TreeError("trees have different dimensions")
    b_paths = _paths(b)
    b_ops = {lab: _class_op(b, b.node(lab)) for lab in b_paths}
    witness = {}
    for leaf in a.leaves():
        ca = _class_op(a, leaf)
        members = _structural_members(a, leaf, b, b_paths, tol)
        ok, res = _verify_sum(ca, members, b_ops, tol)
        if not ok:
            members = _lstsq_members(ca, b_ops)
            ok, res = _verify_sum(ca, members, b_ops, tol)
        if not ok:
            return False, {"leaf": list(leaf.label), "residual": res}
        witness[leaf.label] = members
    return True, witness


def _structural_members(a, leaf, b, b_paths, tol):
    if a.source is b and leaf.members is not None:
        return list(leaf.members)
    path = [a.node(leaf.label[:k]) for k in range(1, leaf.depth + 1)]
    if any(n.projector is None for n in path):
        return []
    out = []
    for lab, bpath in b_paths.items():
        inside = True
        for qa, nb in zip(path, bpath):
            pb = nb.projector
            if pb is None or np.linalg.norm(qa.projector @ pb - pb) > tol.tol_proj:
                inside = False
                break
        if inside:
            out.append(lab)
    return out


def _lstsq_members(ca, b_ops):
    labels = list(b_ops)
    mat = np.stack([b_ops[lab].reshape(-1) for lab in labels], axis=1)
    x, *_ = np.linalg.lstsq(mat, ca.reshape(-1), rcond=None)
    return [lab for lab, xi in zip(labels, x) if xi.real > 0.5]


def _verify_sum(ca, members, b_ops, tol):
    total = np.zeros_like(ca)
    for m in members:
        total = total + b_ops[m]
    res = float(np.linalg.norm(ca - total))
    return res <= tol.tol_proj, res
