"""
Commutation structure of history projectors and system-environment splits.

Commuting projectors are refined into a common framework of mutually
orthogonal blocks. Relabeling each block's basis as |gamma, r, A> then factors
the Hilbert space so every framework projector acts as P_s (x) I_e.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import gcd
from typing import Sequence

import numpy as np

from .errors import DimensionError, NonCommutingError, NotSystemLocalError
from .histories import BranchTree, _Trivial
from .linalg import (
    DEFAULT_TOL,
    Diagnostic,
    Projector,
    ProjectorSet,
    ToleranceConfig,
    as_operator,
    commutator_norm,
    range_basis,
    validate_projector_set,
)

log = logging.getLogger(__name__)


class Factorization:
    """A split H = H_s (x) H_e realised by an orthonormal basis change.

    Column ``s * d_e + A`` of ``basis`` is the global vector labelled |s, A>.
    ``system_labels[s]`` is the (gamma, r) pair of system index s, and
    ``system_blocks[gamma]`` lists the system indices of block gamma.
    """

    def __init__(self, d_s: int, d_e: int, basis=None, system_blocks=None, system_labels=None,
                 warnings: Sequence[str] = ()):
        if d_s <= 0 or d_e <= 0:
            raise ValueError("factor dimensions must be positive")
        dim = d_s * d_e
        if basis is None:
            basis = np.eye(dim, dtype=complex)
        basis = as_operator(basis, dim)
        err = float(np.linalg.norm(basis.conj().T @ basis - np.eye(dim)))
        if err > 1e-9:
            raise ValueError(f"factorization basis is not unitary (residual {err:.3g})")
        self.d_s = d_s
        self.d_e = d_e
        self.basis = basis
        self.basis.setflags(write=False)
        self.system_blocks = dict(system_blocks or {})
        self.system_labels = list(system_labels or [])
        self.warnings = list(warnings)
        self._perm = _as_permutation(basis)

    def __repr__(self):
        return f"Factorization(d_s={self.d_s}, d_e={self.d_e})"

    @property
    def dim(self) -> int:
        return self.d_s * self.d_e

    @property
    def trivial_environment(self) -> bool:
        return self.d_e == 1

    @classmethod
    def from_subsystems(cls, dims: Sequence[int], system: Sequence[int]) -> "Factorization":
        """Split a tensor-product space by grouping some factors into the system.

        ``dims`` lists the factor dimensions in kron order; ``system`` picks the
        factors forming H_s (kept in their original order), the rest form H_e.
        """
        dims = [int(d) for d in dims]
        system = [int(i) for i in system]
        if len(set(system)) != len(system) or any(not 0 <= i < len(dims) for i in system):
            raise ValueError(f"invalid system factor indices {system} for dims {dims}")
        env = [i for i in range(len(dims)) if i not in system]
        order = system + env
        dim = int(np.prod(dims))
        idx = np.arange(dim).reshape(dims).transpose(order).reshape(-1)
        basis = np.zeros((dim, dim), dtype=complex)
        basis[idx, np.arange(dim)] = 1.0
        d_s = int(np.prod([dims[i] for i in system])) if system else 1
        d_e = dim // d_s
        return cls(d_s, d_e, basis, system_labels=[(0, r) for r in range(d_s)],
                   system_blocks={0: list(range(d_s))})

    def to_product(self, vec) -> np.ndarray:
        """Coordinates of a global vector in the |s, A> basis."""
        v = np.asarray(vec, dtype=complex)
        if self._perm is not None:
            return v[self._perm]
        return self.basis.conj().T @ v

    def from_product(self, vec) -> np.ndarray:
        v = np.asarray(vec, dtype=complex)
        if self._perm is not None:
            out = np.empty_like(v)
            out[self._perm] = v
            return out
        return self.basis @ v

    def to_product_operator(self, op) -> np.ndarray:
        op = np.asarray(op, dtype=complex)
        if self._perm is not None:
            return op[np.ix_(self._perm, self._perm)]
        return self.basis.conj().T @ op @ self.basis

    def from_product_operator(self, op) -> np.ndarray:
        op = np.asarray(op, dtype=complex)
        if self._perm is not None:
            out = np.empty_like(op)
            out[np.ix_(self._perm, self._perm)] = op
            return out
        return self.basis @ op @ self.basis.conj().T

    def system_part(self, op) -> tuple[np.ndarray, float]:
        """Best P_s with op ~ P_s (x) I_e, and the Frobenius residual."""
        op = as_operator(op, self.dim)
        r = self.to_product_operator(op).reshape(self.d_s, self.d_e, self.d_s, self.d_e)
        ps = np.einsum("iaja->ij", r) / self.d_e
        resid = float(np.linalg.norm(r.reshape(self.dim, self.dim) - np.kron(ps, np.eye(self.d_e))))
        return ps, resid

    def is_system_local(self, op, tol: ToleranceConfig = DEFAULT_TOL) -> bool:
        return self.system_part(op)[1] <= tol.tol_proj

    def lift_system(self, op_s) -> np.ndarray:
        op_s = as_operator(op_s, self.d_s)
        return self.from_product_operator(np.kron(op_s, np.eye(self.d_e)))

    def lift_environment(self, op_e) -> np.ndarray:
        op_e = as_operator(op_e, self.d_e)
        return self.from_product_operator(np.kron(np.eye(self.d_s), op_e))

    def split_vector(self, vec) -> np.ndarray:
        """Vector reshaped to a (d_s, d_e) coefficient matrix."""
        return self.to_product(vec).reshape(self.d_s, self.d_e)

    def to_dict(self) -> dict:
        out = {
            "d_s": self.d_s,
            "d_e": self.d_e,
            "trivial_environment": self.trivial_environment,
            "system_labels": [list(map(int, lab)) for lab in self.system_labels],
            "warnings": list(self.warnings),
        }
        if self._perm is not None:
            out["permutation"] = [int(i) for i in self._perm]
        else:
            out["basis_real"] = self.basis.real.tolist()
            out["basis_imag"] = self.basis.imag.tolist()
        return out


def _as_permutation(basis: np.ndarray):
    """Row permutation ``perm`` with product coordinate k = global entry perm[k], if any."""
    mag = np.abs(basis)
    if not np.allclose(mag[mag > 1e-12], 1.0, atol=1e-12):
        return None
    if not np.all((mag > 1e-12).sum(axis=0) == 1):
        return None
    cols = np.argmax(mag, axis=0)
    if not np.allclose(basis[cols, np.arange(basis.shape[1])], 1.0, atol=1e-12):
        return None
    return cols


class SystemObservable:
    def __init__(self, op_s):
        self.op_s = as_operator(op_s)

    @property
    def dim(self) -> int:
        return self.op_s.shape[0]

    @property
    def hermitian(self) -> bool:
        return bool(np.linalg.norm(self.op_s - self.op_s.conj().T) <= 1e-12 * max(1.0, np.linalg.norm(self.op_s)))


def lift(obs, fact: Factorization) -> np.ndarray:
    """op_s (x) I_e written in the original basis."""
    op_s = obs.op_s if isinstance(obs, SystemObservable) else obs
    op_s = np.asarray(op_s, dtype=complex)
    if op_s.shape != (fact.d_s, fact.d_s):
        raise DimensionError(f"observable has shape {op_s.shape}, system dimension is {fact.d_s}")
    return fact.lift_system(op_s)


@dataclass
class CommonFramework:
    gammas: ProjectorSet
    covering: dict = field(default_factory=dict)
    inputs: tuple = ()

    @property
    def ranks(self) -> list[int]:
        return [p.rank for p in self.gammas]

    def recovery_residuals(self) -> list[float]:
        out = []
        for i, p in enumerate(self.inputs):
            total = np.zeros_like(p.matrix)
            for g in self.covering[i]:
                total = total + self.gammas[g].matrix
            out.append(float(np.linalg.norm(p.matrix - total)))
        return out

    def to_dict(self) -> dict:
        res = self.recovery_residuals()
        return {
            "n_blocks": len(self.gammas),
            "ranks": self.ranks,
            "covering": {str(k): list(v) for k, v in self.covering.items()},
            "max_recovery_residual": max(res) if res else 0.0,
        }


def _canonical_key(m: np.ndarray):
    diag = np.real(np.diagonal(m))
    nz = np.flatnonzero(diag > 1e-9)
    first = int(nz[0]) if nz.size else m.shape[0]
    # +0.0 folds negative zeros so ties sort identically
    re = tuple((np.round(m.real, 9) + 0.0).ravel().tolist())
    im = tuple((np.round(m.imag, 9) + 0.0).ravel().tolist())
    return (first, re, im)


def build_common_framework(projs: Sequence, tol: ToleranceConfig = DEFAULT_TOL) -> CommonFramework:
    """Refine {I} by each projector in turn, B -> {B P, B (I - P)}, dropping empty blocks."""
    inputs = [p if isinstance(p, Projector) else Projector(p, tol) for p in projs]
    if not inputs:
        raise ValueError("need at least one projector")
    dim = inputs[0].dim
    if any(p.dim != dim for p in inputs):
        raise DimensionError("projectors have mismatched dimensions")
    # canonical processing order makes the fixed point order-independent
    distinct: list[Projector] = []
    for p in sorted(inputs, key=lambda p: _canonical_key(p.matrix)):
        if not any(np.allclose(p.matrix, q.matrix, atol=tol.tol_proj, rtol=0) for q in distinct):
            distinct.append(p)

    blocks = [np.eye(dim, dtype=complex)]
    for p in distinct:
        pm = p.matrix
        nxt = []
        for b in blocks:
            c = commutator_norm(b, pm)
            if c > tol.tol_proj:
                raise NonCommutingError(f"projectors do not commute (commutator norm {c:.3g})")
            inside = b @ pm @ b
            outside = b - inside
            for part in (inside, outside):
                part = 0.5 * (part + part.conj().T)
                if np.real(np.trace(part)) >= 0.5:
                    nxt.append(part)
        blocks = nxt
    blocks.sort(key=_canonical_key)
    gammas = ProjectorSet([Projector(b, tol) for b in blocks], label="framework")

    covering = {}
    for i, p in enumerate(inputs):
        covering[i] = [g for g, b in enumerate(gammas)
                       if np.real(np.trace(p.matrix @ b.matrix)) > 0.5 * b.rank]
    fw = CommonFramework(gammas=gammas, covering=covering, inputs=tuple(inputs))
    diag = validate_projector_set(gammas, tol)
    if not diag.passed:
        raise NonCommutingError(f"framework blocks are not a partition: {diag.details}")
    return fw


def factor_hilbert(fw: CommonFramework, env_dim: int | None = None) -> Factorization:
    """Factor the space so every framework block is P_s (x) I_e.

    The environment dimension defaults to the gcd of the block ranks, the
    largest choice compatible with rank(P) = rank(P_s) * d_e for all blocks.
    A smaller divisor can be requested through ``env_dim``; each block then
    carries more system multiplicity r.
    """
    ranks = fw.ranks
    g = 0
    for r in ranks:
        g = gcd(g, r)
    d_e = g if env_dim is None else int(env_dim)
    if d_e <= 0 or any(r % d_e for r in ranks):
        raise ValueError(f"environment dimension {d_e} must divide every block rank {ranks}")
    dim = sum(ranks)
    warnings = []
    if d_e == 1:
        msg = f"block ranks {ranks} have gcd 1: the environment is trivial"
        log.warning(msg)
        warnings.append(msg)
    mult = [r // d_e for r in ranks]
    d_s = sum(mult)
    basis = np.zeros((dim, dim), dtype=complex)
    system_labels = []
    system_blocks: dict[int, list[int]] = {}
    s = 0
    for gamma, (p, m) in enumerate(zip(fw.gammas, mult)):
        vecs = range_basis(p.matrix)
        system_blocks[gamma] = []
        for r in range(m):
            system_labels.append((gamma, r))
            system_blocks[gamma].append(s)
            for a in range(d_e):
                basis[:, s * d_e + a] = vecs[:, r * d_e + a]
            s += 1
    return Factorization(d_s, d_e, basis, system_blocks, system_labels, warnings)


def factorization_residuals(fw: CommonFramework, fact: Factorization) -> list[float]:
    """|P_gamma - P_gamma^s (x) I_e| for every block, with P^s the block's system projector."""
    out = []
    for gamma, p in enumerate(fw.gammas):
        ps = np.zeros((fact.d_s, fact.d_s), dtype=complex)
        for s in fact.system_blocks.get(gamma, []):
            ps[s, s] = 1.0
        out.append(float(np.linalg.norm(p.matrix - fact.lift_system(ps))))
    return out


def _step_projectors(tree: BranchTree, step: int) -> list[np.ndarray]:
    """Distinct non-identity projectors assigned at a step (1-based), across branches."""
    if not 1 <= step <= tree.depth:
        raise ValueError(f"step {step} outside 1..{tree.depth}")
    seen: dict[bytes, np.ndarray] = {}
    for node in tree.nodes_at(step - 1):
        cs = node.child_set
        if cs is None or isinstance(cs, _Trivial):
            continue
        for p in cs:
            key = np.round(p.matrix, 12).tobytes()
            seen.setdefault(key, p.matrix)
    ident = np.eye(tree.dim)
    return [m for m in seen.values() if not np.allclose(m, ident, atol=1e-12)]


def tree_projectors(tree: BranchTree, steps: Sequence[int] | None = None) -> list[np.ndarray]:
    steps = range(1, tree.depth + 1) if steps is None else steps
    seen: dict[bytes, np.ndarray] = {}
    for k in steps:
        for m in _step_projectors(tree, k):
            seen.setdefault(np.round(m, 12).tobytes(), m)
    return list(seen.values())


def _max_commutator(mats: list[np.ndarray]) -> tuple[float, tuple | None]:
    worst, pair = 0.0, None
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            c = commutator_norm(mats[i], mats[j])
            if c > worst:
                worst, pair = c, (i, j)
    return worst, pair


def check_equal_time_commutation(tree: BranchTree, step: int, tol: ToleranceConfig | None = None) -> Diagnostic:
    """Largest commutator among the projectors used at one step, on any branch."""
    tol = tol or tree.tol
    mats = _step_projectors(tree, step)
    worst, pair = _max_commutator(mats)
    return Diagnostic("equal_time_commutation", worst <= tol.tol_proj, worst, tol.tol_proj,
                      details={"step": step, "n_projectors": len(mats), "worst_pair": pair})


def check_narrative(tree: BranchTree, tol: ToleranceConfig | None = None) -> Diagnostic:
    """Largest commutator among all history projectors at all steps."""
    tol = tol or tree.tol
    mats = tree_projectors(tree)
    worst, pair = _max_commutator(mats)
    per_step = [check_equal_time_commutation(tree, k, tol).passed for k in range(1, tree.depth + 1)]
    return Diagnostic("narrative", worst <= tol.tol_proj, worst, tol.tol_proj,
                      details={"n_projectors": len(mats), "worst_pair": pair,
                               "equal_time_passed": per_step})


def framework_for_tree(tree: BranchTree, steps: Sequence[int] | None = None,
                       tol: ToleranceConfig | None = None) -> CommonFramework:
    """Common framework of every projector used at the given steps (all steps by default)."""
    tol = tol or tree.tol
    mats = tree_projectors(tree, steps)
    if not mats:
        mats = [np.eye(tree.dim)]
    return build_common_framework([Projector(m, tol) for m in mats], tol)


def require_system_local(op, fact: Factorization, tol: ToleranceConfig, what: str = "projector"):
    ps, resid = fact.system_part(op)
    if resid > tol.tol_proj:
        raise NotSystemLocalError(f"{what} is not of the form P_s (x) I_e (residual {resid:.3g})")
    return ps
