"""Interference between branches: medium, operator-class and strong decoherence."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError
from .framework import Factorization, require_system_local
from .histories import BranchTree
from .linalg import DEFAULT_TOL, Diagnostic, ToleranceConfig, _fix_phases, as_operator, gram


def _worst_offdiag(g: np.ndarray, mask: np.ndarray | None = None, top: int = 5):
    """Largest |g_ij| over i<j (optionally restricted by ``mask``) and the top offenders."""
    n = g.shape[0]
    if n < 2:
        return 0.0, []
    iu, ju = np.triu_indices(n, k=1)
    vals = np.abs(g[iu, ju])
    if mask is not None:
        keep = mask[iu, ju]
        iu, ju, vals = iu[keep], ju[keep], vals[keep]
    if vals.size == 0:
        return 0.0, []
    # stable sort so ties resolve by index order
    order = np.argsort(-vals, kind="stable")[:top]
    return float(vals[order[0]]), [(int(iu[k]), int(ju[k]), float(vals[k])) for k in order]


@dataclass
class DecoherenceReport:
    labels: list
    gram: np.ndarray
    max_offdiag: float
    threshold: float
    passes: bool
    worst_pairs: list = field(default_factory=list)

    @property
    def probabilities(self) -> np.ndarray:
        return np.real(np.diagonal(self.gram)).copy()

    @property
    def measure(self) -> float:
        """Max offdiag normalized by the largest diagonal entry."""
        top = float(np.max(self.probabilities)) if self.gram.size else 0.0
        return self.max_offdiag / top if top > 0 else 0.0

    @property
    def witness(self):
        if not self.worst_pairs:
            return None
        i, j, _ = self.worst_pairs[0]
        return (self.labels[i], self.labels[j])

    def to_dict(self) -> dict:
        return {
            "passes": self.passes,
            "max_offdiag": self.max_offdiag,
            "normalized_measure": self.measure,
            "threshold": self.threshold,
            "n_branches": len(self.labels),
            "probabilities": self.probabilities.tolist(),
            "witness": None if self.witness is None else [list(x) for x in self.witness],
            "worst_pairs": [
                {"a": list(self.labels[i]), "b": list(self.labels[j]), "value": v}
                for i, j, v in self.worst_pairs
            ],
        }


def medium_check(tree: BranchTree, tol: ToleranceConfig | None = None, extra_time: float = 0.0) -> DecoherenceReport:
    """Gram of the leaf vectors.

    All leaves of a tree live at the same grid time. ``extra_time`` evolves
    every leaf further by a common unitary first (the Gram is invariant under
    that, up to rounding).
    """
    tol = tol or tree.tol
    vecs = tree.leaf_matrix()
    if extra_time:
        vecs = (tree.hamiltonian.propagator(extra_time) @ vecs.T).T
    g = gram(vecs)
    worst, pairs = _worst_offdiag(g)
    top = float(np.max(np.real(np.diagonal(g))))
    thr = tol.tol_decoh * max(top, 1.0)
    return DecoherenceReport(tree.labels(), g, worst, thr, worst <= thr, pairs)


def operator_decoherence_check(tree: BranchTree, ops, tol: ToleranceConfig | None = None) -> Diagnostic:
    """max |<Psi_a', O Psi_a>| over a != a' for O in ops plus the identity."""
    tol = tol or tree.tol
    dim = tree.dim
    mats = [np.eye(dim, dtype=complex)]
    for o in ops:
        o = np.asarray(o, dtype=complex)
        if o.shape != (dim, dim):
            raise DimensionError(f"operator has shape {o.shape}, tree dimension is {dim}")
        mats.append(as_operator(o, dim))
    vecs = tree.leaf_matrix()
    labels = tree.labels()
    worst_ratio, worst = 0.0, None
    per_op = []
    passed = True
    for k, o in enumerate(mats):
        norm = float(np.linalg.norm(o, 2))
        m = vecs.conj() @ (o @ vecs.T)
        np.fill_diagonal(m, 0.0)
        a = np.abs(m)
        val = float(a.max()) if a.size else 0.0
        thr = tol.tol_decoh * max(norm, 1e-300)
        ok = val <= thr
        passed &= ok
        per_op.append({"index": k, "max_offdiag": val, "op_norm": norm, "passed": bool(ok)})
        ratio = val / max(norm, 1e-300)
        if ratio > worst_ratio:
            i, j = np.unravel_index(int(np.argmax(a)), a.shape)
            worst_ratio, worst = ratio, (k, list(labels[i]), list(labels[j]))
    return Diagnostic("operator_decoherence", bool(passed), worst_ratio, tol.tol_decoh,
                      details={"per_operator": per_op, "worst": worst})


def system_basis(ps: np.ndarray, rank: int) -> np.ndarray:
    """Orthonormal basis of range(ps) by column-pivoted QR, phases fixed.

    Each column is rotated so its largest-magnitude entry is real positive,
    which makes the basis reproducible.
    """
    if rank == 0:
        return np.zeros((ps.shape[0], 0), dtype=complex)
    q, _, _ = scipy.linalg.qr(ps, pivoting=True)
    return _fix_phases(q[:, :rank])


@dataclass
class ZFamily:
    """Environment components z of each leaf under a system-environment split.

    ``entries`` maps (past label, final index, r) to a vector of length d_e.
    ``v_bases`` maps each leaf label to its system basis (d_s x rank).
    """
    fact: Factorization
    entries: dict
    v_bases: dict
    leaf_labels: list
    probabilities: dict

    def keys(self) -> list:
        return list(self.entries)

    def matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, self.fact.d_e), dtype=complex)
        return np.stack(list(self.entries.values()))

    def for_past(self, past) -> list[np.ndarray]:
        past = tuple(past)
        return [z for (b, _, _), z in self.entries.items() if b == past]

    def pasts(self) -> list[tuple]:
        seen: dict = {}
        for b, _, _ in self.entries:
            seen.setdefault(b, None)
        return list(seen)

    def reconstruct(self, leaf_label) -> np.ndarray:
        """sum_r v_r (x) z_r mapped back to the original basis."""
        leaf_label = tuple(leaf_label)
        past, final = leaf_label[:-1], leaf_label[-1]
        v = self.v_bases[leaf_label]
        m = np.zeros((self.fact.d_s, self.fact.d_e), dtype=complex)
        for r in range(v.shape[1]):
            m += np.outer(v[:, r], self.entries[(past, final, r)])
        return self.fact.from_product(m.reshape(-1))

    def norm_residuals(self) -> dict:
        out = {}
        for lab in self.leaf_labels:
            past, final = lab[:-1], lab[-1]
            s = sum(float(np.vdot(z, z).real) for (b, a, _), z in self.entries.items() if b == past and a == final)
            out[lab] = abs(s - self.probabilities[lab])
        return out


def extract_z(tree: BranchTree, fact: Factorization, tol: ToleranceConfig | None = None) -> ZFamily:
    """z_{past, final, r} = (v_r^dagger (x) I) Psi for each leaf.

    The final projector of every leaf must be P_s (x) I_e under ``fact``.
    Aggregate leaves of coarse-grained trees have no single projector; the
    whole system factor is used for them.
    """
    tol = tol or tree.tol
    if fact.dim != tree.dim:
        raise DimensionError(f"factorization has dimension {fact.dim}, tree has {tree.dim}")
    if tree.depth == 0:
        raise ValueError("tree has no alternatives yet")
    entries: dict = {}
    bases: dict = {}
    cache: dict[bytes, np.ndarray] = {}
    probs = {}
    for node in tree.leaves():
        p = node.projector
        if p is None:
            p = np.eye(tree.dim, dtype=complex)
        key = np.round(p, 12).tobytes()
        if key not in cache:
            ps = require_system_local(p, fact, tol, what=f"final projector of {node.label}")
            rank = int(round(float(np.real(np.trace(ps)))))
            cache[key] = system_basis(ps, rank)
        v = cache[key]
        bases[node.label] = v
        m = fact.split_vector(node.vector)
        zs = v.conj().T @ m
        past, final = node.label[:-1], node.label[-1]
        for r in range(v.shape[1]):
            z = zs[r].copy()
            z.setflags(write=False)
            entries[(past, final, r)] = z
        probs[node.label] = node.probability
    return ZFamily(fact, entries, bases, tree.labels(), probs)


@dataclass
class StrongReport:
    max_cross_past: float
    passes: bool
    threshold: float
    witness: tuple | None
    max_same_past: float
    z_gram: np.ndarray
    keys: list

    def to_dict(self) -> dict:
        w = None
        if self.witness is not None:
            w = [[list(k[0]), int(k[1]), int(k[2])] for k in self.witness]
        return {
            "passes": self.passes,
            "max_cross_past": self.max_cross_past,
            "threshold": self.threshold,
            "witness": w,
            "max_same_past_offdiag": self.max_same_past,
            "n_z": len(self.keys),
        }


def strong_check(tree: BranchTree, fact: Factorization, tol: ToleranceConfig | None = None,
                 zf: ZFamily | None = None) -> StrongReport:
    """Orthogonality of z vectors whose past labels differ.

    Overlaps between z's sharing a past label (different final index or r)
    are reported but do not affect the verdict.
    """
    tol = tol or tree.tol
    zf = zf or extract_z(tree, fact, tol)
    keys = zf.keys()
    g = gram(zf.matrix()) if keys else np.zeros((0, 0), dtype=complex)
    pasts = [k[0] for k in keys]
    n = len(keys)
    ids = {b: k for k, b in enumerate(dict.fromkeys(pasts))}
    pid = np.array([ids[b] for b in pasts], dtype=int)
    cross = pid[:, None] != pid[None, :]
    worst, pairs = _worst_offdiag(g, cross, top=1)
    same, _ = _worst_offdiag(g, ~cross, top=1)
    top = float(np.max(np.real(np.diagonal(g)))) if n else 0.0
    thr = tol.tol_decoh * max(top, 1.0)
    witness = None
    if pairs and worst > thr:
        i, j, _ = pairs[0]
        witness = (keys[i], keys[j])
    return StrongReport(worst, worst <= thr, thr, witness, same, g, keys)


def too_strong_check(zf: ZFamily, tol: ToleranceConfig = DEFAULT_TOL) -> Diagnostic:
    """Whether all z's are mutually orthogonal, including in final index and r.

    Informational: this is stronger than strong decoherence and not required.
    """
    keys = zf.keys()
    g = gram(zf.matrix()) if keys else np.zeros((0, 0), dtype=complex)
    worst, pairs = _worst_offdiag(g, top=1)
    top = float(np.max(np.real(np.diagonal(g)))) if keys else 0.0
    thr = tol.tol_decoh * max(top, 1.0)
    witness = None
    if pairs and worst > thr:
        i, j, _ = pairs[0]
        witness = [[list(keys[i][0]), int(keys[i][1]), int(keys[i][2])],
                   [list(keys[j][0]), int(keys[j][1]), int(keys[j][2])]]
    return Diagnostic("too_strong", worst <= thr, worst, thr,
                      details={"witness": witness, "n_z": len(keys), "informational": True})
