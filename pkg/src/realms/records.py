"""Records of past branches in the environment, permanence, branch density matrices."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .decoherence import ZFamily, strong_check
from .errors import DimensionError, StrongDecoherenceError
from .framework import Factorization, SystemObservable
from .histories import BranchTree, _Trivial, extend_tree
from .linalg import (
    DEFAULT_TOL,
    Diagnostic,
    Projector,
    ProjectorSet,
    ToleranceConfig,
    commutator_norm,
    gram,
    span_projector,
)


@dataclass
class RecordSet:
    """Per past branch b, R_b = I_s (x) R_b^e on the full space."""
    fact: Factorization
    members: dict
    env: dict = field(default_factory=dict)
    strong_passed: bool = True

    @property
    def labels(self) -> list:
        return list(self.members)

    @property
    def ranks(self) -> dict:
        return {b: p.rank for b, p in self.members.items()}

    def orthogonality_residual(self) -> float:
        keys = self.labels
        worst = 0.0
        for i in range(len(keys)):
            for j in range(i + 1, len(keys)):
                r = float(np.linalg.norm(self.members[keys[i]].matrix @ self.members[keys[j]].matrix))
                worst = max(worst, r)
        return worst

    def to_dict(self) -> dict:
        return {
            "n_records": len(self.members),
            "ranks": [{"past": list(b), "rank": int(p.rank), "env_rank": int(self.env[b].rank) if b in self.env else None}
                      for b, p in self.members.items()],
            "orthogonality_residual": self.orthogonality_residual(),
            "strong_passed": self.strong_passed,
        }


def _zero_projector(dim: int) -> Projector:
    return Projector(np.zeros((dim, dim), dtype=complex), check=False)


def construct_records(zf: ZFamily, tree: BranchTree | None = None, tol: ToleranceConfig = DEFAULT_TOL,
                      require_strong: bool = True) -> RecordSet:
    """R_b^e = projector onto the span of all z's of past branch b.

    Raises StrongDecoherenceError when the z's of different past branches are
    not orthogonal, unless ``require_strong`` is False (then the projectors
    are still built, and may overlap).
    """
    fact = zf.fact
    ok = True
    if tree is not None:
        ok = strong_check(tree, fact, tol, zf=zf).passes
    else:
        ok = _strong_from_z(zf, tol)
    if require_strong and not ok:
        raise StrongDecoherenceError("z vectors of different past branches overlap: records are not guaranteed")
    floor = tol.tol_proj
    members, env = {}, {}
    for b in zf.pasts():
        zs = [z for z in zf.for_past(b) if np.linalg.norm(z) > floor]
        if zs:
            re = span_projector(zs, tol)
        else:
            re = _zero_projector(fact.d_e)
        env[b] = re
        full = fact.lift_environment(re.matrix)
        members[b] = Projector(0.5 * (full + full.conj().T), check=False)
    return RecordSet(fact, members, env, strong_passed=ok)


def _strong_from_z(zf: ZFamily, tol: ToleranceConfig) -> bool:
    keys = zf.keys()
    if not keys:
        return True
    g = gram(zf.matrix())
    top = max(float(np.max(np.real(np.diagonal(g)))), 1.0)
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            if keys[i][0] != keys[j][0] and abs(g[i, j]) > tol.tol_decoh * top:
                return False
    return True


def verify_records(rs: RecordSet, tree: BranchTree, tol: ToleranceConfig | None = None) -> Diagnostic:
    """(a) R_b R_b' = 0 for b != b'; (b) R_b Psi = Psi_b at the tree's current time.

    Psi_b is the sum of the tree's leaves whose labels start with b, so the
    same record set can be tested on a tree cut back to an earlier step.
    """
    tol = tol or tree.tol
    if rs.fact.dim != tree.dim:
        raise DimensionError("record set and tree dimensions differ")
    psi = tree.leaf_matrix().sum(axis=0)
    ortho = rs.orthogonality_residual()
    per = []
    worst = 0.0
    for b, r in rs.members.items():
        psi_b = tree.branch_vector(b)
        res = float(np.linalg.norm(r.matrix @ psi - psi_b))
        per.append({"past": list(b), "residual": res, "rank": int(r.rank)})
        worst = max(worst, res)
    ok_a = ortho <= tol.tol_proj
    ok_b = worst <= tol.tol_decoh
    return Diagnostic("records", bool(ok_a and ok_b), worst, tol.tol_decoh,
                      details={"orthogonality_residual": ortho, "orthogonality_passed": bool(ok_a),
                               "correlation_passed": bool(ok_b), "per_record": per,
                               "time": tree.time})


def permanence_check(tree: BranchTree, rs: RecordSet, extension, dt: float | None = None,
                     tol: ToleranceConfig | None = None) -> Diagnostic:
    """Extend by one step and measure interference between different past labels.

    ``extension`` is a ProjectorSet or TRIVIAL for every leaf, or a mapping
    leaf label -> set. The guarantee needs each extension projector, moved to
    the record time by U(dt), to commute with every record; that precondition
    is measured and reported. Past interference is always measured.
    """
    tol = tol or tree.tol
    labels = tree.labels()
    if isinstance(extension, (ProjectorSet, _Trivial)):
        assign = {lab: extension for lab in labels}
    elif isinstance(extension, Mapping):
        assign = {tuple(k): v for k, v in extension.items()}
    else:
        raise TypeError("extension must be a ProjectorSet, TRIVIAL or a mapping")

    if tree.depth < len(tree.grid):
        base = tree
        dt = tree.grid.interval(tree.depth + 1)
    else:
        if dt is None:
            raise ValueError("tree is at the end of its grid: give the extension interval dt")
        base = tree.with_grid(tree.grid.extended(dt))
    u = tree.hamiltonian.propagator(dt)
    worst_comm = 0.0
    seen = set()
    for s in assign.values():
        if isinstance(s, _Trivial) or id(s) in seen:
            continue
        seen.add(id(s))
        for p in s:
            back = u.conj().T @ p.matrix @ u
            for r in rs.members.values():
                worst_comm = max(worst_comm, commutator_norm(back, r.matrix))
    pre_ok = worst_comm <= tol.tol_proj
    corr = verify_records(rs, tree, tol)

    ext = extend_tree(base, assign)
    record_pasts = rs.labels
    k = len(record_pasts[0]) if record_pasts else 0
    leaves = ext.leaves()
    g = gram(ext.leaf_matrix())
    pid = {}
    ids = np.array([pid.setdefault(n.label[:k], len(pid)) for n in leaves])
    cross = ids[:, None] != ids[None, :]
    a = np.abs(g) * cross
    worst = float(a.max()) if a.size else 0.0
    thr = tree.dim * tol.tol_proj
    witness = None
    if worst > 0:
        i, j = np.unravel_index(int(np.argmax(a)), a.shape)
        witness = [list(leaves[i].label), list(leaves[j].label)]
    guaranteed = bool(pre_ok and corr.passed)
    return Diagnostic("permanence", worst <= thr, worst, thr,
                      details={"precondition_commutator": worst_comm, "precondition_passed": bool(pre_ok),
                               "records_passed": corr.passed, "guaranteed": guaranteed,
                               "status": "guaranteed" if guaranteed else "not guaranteed",
                               "witness": witness, "n_extended": len(leaves)})


@dataclass
class BranchDensityMatrix:
    label: tuple
    rho_s: np.ndarray

    @property
    def trace(self) -> float:
        return float(np.real(np.trace(self.rho_s)))

    def to_dict(self) -> dict:
        ev = np.linalg.eigvalsh(self.rho_s)
        return {"label": list(self.label), "trace": self.trace, "min_eigenvalue": float(ev[0]),
                "hermiticity": float(np.linalg.norm(self.rho_s - self.rho_s.conj().T))}


def branch_density_matrix(tree: BranchTree, fact: Factorization, label) -> BranchDensityMatrix:
    """Tr_e |Psi_b><Psi_b| with Psi_b the leaf (or sum of leaves below ``label``)."""
    if fact.dim != tree.dim:
        raise DimensionError(f"factorization has dimension {fact.dim}, tree has {tree.dim}")
    label = tuple(label)
    node = tree.node(label) if label in tree else None
    if node is not None and node.depth == tree.depth:
        psi = node.vector
    else:
        psi = tree.branch_vector(label)
    m = fact.split_vector(psi)
    rho = m @ m.conj().T
    rho = 0.5 * (rho + rho.conj().T)
    return BranchDensityMatrix(label, rho)


def past_labels(tree: BranchTree) -> list[tuple]:
    return list(dict.fromkeys(lab[:-1] for lab in tree.labels()))


def expectation_identity_check(tree: BranchTree, fact: Factorization, obs, tol: ToleranceConfig | None = None,
                               rtol: float = 1e-10) -> Diagnostic:
    """<O> = tr(O_s rho_s) = sum_b tr(O_s rho_b) over past branches b.

    The middle equality holds for any state; the branch sum needs the cross
    terms between different past labels to vanish. Errors are relative to
    max(|<O>|, ||O_s||).
    """
    op_s = obs.op_s if isinstance(obs, SystemObservable) else np.asarray(obs, dtype=complex)
    if op_s.shape != (fact.d_s, fact.d_s):
        raise DimensionError(f"observable has shape {op_s.shape}, system dimension is {fact.d_s}")
    psi = tree.leaf_matrix().sum(axis=0)
    full = complex(np.vdot(psi, fact.lift_system(op_s) @ psi))
    m = fact.split_vector(psi)
    rho_s = m @ m.conj().T
    inter = complex(np.trace(op_s @ rho_s))
    pasts = past_labels(tree)
    branch_sum = 0j
    for b in pasts:
        rb = branch_density_matrix(tree, fact, b).rho_s
        branch_sum += complex(np.trace(op_s @ rb))
    scale = max(abs(full), float(np.linalg.norm(op_s, 2)), 1e-300)
    e_inter = abs(full - inter) / scale
    e_branch = abs(full - branch_sum) / scale
    return Diagnostic("expectation_identity", bool(e_inter <= rtol and e_branch <= rtol), e_branch, rtol,
                      details={"expectation": [full.real, full.imag],
                               "reduced_trace": [inter.real, inter.imag],
                               "branch_sum": [branch_sum.real, branch_sum.imag],
                               "intermediate_error": e_inter, "violation": abs(full - branch_sum),
                               "n_branches": len(pasts)})


__all__ = [
    "RecordSet", "BranchDensityMatrix", "construct_records", "verify_records", "permanence_check",
    "branch_density_matrix", "expectation_identity_check", "past_labels",
]
