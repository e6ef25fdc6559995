"""
Dense complex linear algebra used by every other module.

Vectors and operators are plain ``numpy`` arrays (complex128). Projectors,
projector sets and Hamiltonians are thin validated wrappers around them.
Conventions: hbar = 1, tensor products use row-major index order
``i = i_s * dim_e + i_e`` (``numpy.kron``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, NonHermitianError, ProjectorError

MAX_DIM = 4096
RANK_GUARD = 0.01


@dataclass(frozen=True)
class ToleranceConfig:
    tol_proj: float = 1e-10
    tol_decoh: float = 1e-8
    tol_rank: float = 1e-10

    def __post_init__(self):
        for name in ("tol_proj", "tol_decoh", "tol_rank"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")

    def replace(self, **overrides) -> "ToleranceConfig":
        values = {k: getattr(self, k) for k in ("tol_proj", "tol_decoh", "tol_rank")}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return ToleranceConfig(**values)


DEFAULT_TOL = ToleranceConfig()


@dataclass(frozen=True)
class Diagnostic:
    """Outcome of a numerical check: the measured value and whether it passed."""

    name: str
    passed: bool
    value: float
    threshold: float
    details: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "value": float(self.value),
            "threshold": float(self.threshold),
            "details": self.details,
        }


def as_vector(v, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(v, dtype=complex).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"expected vector of dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def as_operator(a, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(a, dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"operator must be square, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"expected operator of dimension {dim}, got {arr.shape[0]}")
    if arr.shape[0] > MAX_DIM:
        raise DimensionError(f"dimension {arr.shape[0]} exceeds the dense cap {MAX_DIM}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("operator has non-finite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=complex, copy=True)
    arr.setflags(write=False)
    return arr


def hermiticity_residual(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - a.conj().T))


def trace_rank(matrix: np.ndarray) -> int:
    tr = float(np.real(np.trace(matrix)))
    rank = int(round(tr))
    if abs(tr - rank) > RANK_GUARD:
        raise ProjectorError(f"trace {tr:.6g} is not within {RANK_GUARD} of an integer")
    return rank


class Projector:
    """Orthogonal projector. Validated on construction; immutable."""

    __slots__ = ("matrix", "rank")

    def __init__(self, matrix, tol: ToleranceConfig = DEFAULT_TOL, *, check: bool = True):
        m = as_operator(matrix)
        if check:
            herm = hermiticity_residual(m)
            idem = float(np.linalg.norm(m @ m - m))
            if herm > tol.tol_proj or idem > tol.tol_proj:
                raise ProjectorError(
                    f"not a projector: |P-P^+|={herm:.3g}, |P^2-P|={idem:.3g} (tol {tol.tol_proj:.3g})"
                )
        object.__setattr__(self, "matrix", _frozen(m))
        object.__setattr__(self, "rank", trace_rank(m))

    def __setattr__(self, name, value):
        raise AttributeError("Projector is immutable")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __repr__(self):
        return f"Projector(dim={self.dim}, rank={self.rank})"

    @classmethod
    def identity(cls, dim: int) -> "Projector":
        return cls(np.eye(dim), check=False)

    @classmethod
    def from_indices(cls, dim: int, indices) -> "Projector":
        m = np.zeros((dim, dim), dtype=complex)
        idx = list(indices)
        m[idx, idx] = 1.0
        return cls(m, check=False)

    def complement(self) -> "Projector":
        return Projector(np.eye(self.dim) - self.matrix, check=False)


class ProjectorSet:
    """An ordered family of projectors meant to be exhaustive and exclusive.

    ``names`` optionally labels the members (e.g. range indices); member order
    fixes the child order of branches split by this set.
    """

    __slots__ = ("members", "label", "names", "notes", "_stack")

    def __init__(self, members: Sequence, label: str = "", names=None, notes=()):
        ps = [m if isinstance(m, Projector) else Projector(m) for m in members]
        if not ps:
            raise ProjectorError("a projector set needs at least one member")
        dims = {p.dim for p in ps}
        if len(dims) != 1:
            raise DimensionError(f"members have mismatched dimensions {sorted(dims)}")
        object.__setattr__(self, "members", tuple(ps))
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "names", tuple(names) if names is not None else tuple(range(len(ps))))
        object.__setattr__(self, "notes", tuple(notes))
        stack = np.stack([p.matrix for p in ps])
        stack.setflags(write=False)
        object.__setattr__(self, "_stack", stack)
        if len(self.names) != len(ps):
            raise ValueError("names must match members one to one")

    def __setattr__(self, name, value):
        raise AttributeError("ProjectorSet is immutable")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i) -> Projector:
        return self.members[i]

    def __repr__(self):
        ranks = ",".join(str(p.rank) for p in self.members)
        return f"ProjectorSet({self.label!r}, dim={self.dim}, ranks=({ranks}))"

    @property
    def dim(self) -> int:
        return self.members[0].dim

    @property
    def stack(self) -> np.ndarray:
        """Members stacked into an array of shape (m, dim, dim)."""
        return self._stack

    def same_as(self, other: "ProjectorSet", atol: float = 1e-10) -> bool:
        if len(self) != len(other) or self.dim != other.dim:
            return False
        return bool(np.allclose(self.stack, other.stack, atol=atol, rtol=0))


def validate_projector_set(pset: ProjectorSet, tol: ToleranceConfig = DEFAULT_TOL) -> Diagnostic:
    """Completeness and exclusivity residuals of a projector family."""
    dims = {p.dim for p in pset.members}
    if len(dims) != 1:
        raise DimensionError(f"members have mismatched dimensions {sorted(dims)}")
    dim = dims.pop()
    total = pset.stack.sum(axis=0)
    completeness = float(np.linalg.norm(total - np.eye(dim)))
    exclusivity = 0.0
    for i, a in enumerate(pset.members):
        for b in pset.members[i + 1:]:
            exclusivity = max(exclusivity, float(np.linalg.norm(a.matrix @ b.matrix)))
    value = max(completeness, exclusivity)
    return Diagnostic(
        "projector_set",
        passed=value <= tol.tol_proj,
        value=value,
        threshold=tol.tol_proj,
        details={
            "label": pset.label,
            "completeness": completeness,
            "exclusivity": exclusivity,
            "rank_sum": sum(p.rank for p in pset.members),
            "dim": dim,
        },
    )


class Hamiltonian:
    """Hermitian generator with a cached eigendecomposition (hbar = 1)."""

    def __init__(self, matrix, tol: ToleranceConfig = DEFAULT_TOL):
        m = as_operator(matrix)
        herm = hermiticity_residual(m)
        if herm > tol.tol_proj:
            raise NonHermitianError(f"|H-H^+|={herm:.3g} exceeds tol_proj={tol.tol_proj:.3g}")
        m = 0.5 * (m + m.conj().T)
        self.matrix = _frozen(m)
        self.eigenvalues, self.eigenvectors = np.linalg.eigh(m)
        self._cache: dict[float, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __repr__(self):
        return f"Hamiltonian(dim={self.dim})"

    def propagator(self, dt: float) -> np.ndarray:
        """exp(-i H dt) from the eigendecomposition."""
        dt = float(dt)
        if not np.isfinite(dt):
            raise ValueError("time step must be finite")
        u = self._cache.get(dt)
        if u is None:
            v = self.eigenvectors
            u = (v * np.exp(-1j * self.eigenvalues * dt)) @ v.conj().T
            u.setflags(write=False)
            if len(self._cache) < 64:
                self._cache[dt] = u
        return u

    @classmethod
    def zero(cls, dim: int) -> "Hamiltonian":
        return cls(np.zeros((dim, dim)))


def evolve(state, h: Hamiltonian, dt: float) -> np.ndarray:
    psi = as_vector(state, h.dim) if np.ndim(state) == 1 else np.asarray(state, dtype=complex)
    if psi.shape[0] != h.dim:
        raise DimensionError(f"state dimension {psi.shape[0]} does not match H ({h.dim})")
    return h.propagator(dt) @ psi


def tensor(*ops) -> np.ndarray:
    out = np.asarray(ops[0], dtype=complex)
    for op in ops[1:]:
        out = np.kron(out, np.asarray(op, dtype=complex))
    return out


def tensor_state(*vectors) -> np.ndarray:
    out = as_vector(vectors[0])
    for v in vectors[1:]:
        out = np.kron(out, as_vector(v))
    return out


def partial_trace(rho, fact, over: str = "environment") -> np.ndarray:
    """Reduced operator of one factor of ``fact`` (a Factorization).

    ``over`` names the factor traced out: ``"environment"`` keeps the system.
    """
    rho = as_operator(rho)
    d_s, d_e = fact.d_s, fact.d_e
    if rho.shape[0] != d_s * d_e:
        raise DimensionError(f"operator dimension {rho.shape[0]} != d_s*d_e = {d_s * d_e}")
    r = fact.to_product_operator(rho).reshape(d_s, d_e, d_s, d_e)
    if over in ("environment", "env", "e"):
        return np.einsum("iaja->ij", r)
    if over in ("system", "sys", "s"):
        return np.einsum("aiaj->ij", r)
    raise ValueError(f"over must be 'system' or 'environment', got {over!r}")


def commutator_norm(a, b) -> float:
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a @ b - b @ a))


def span_projector(vectors, tol: ToleranceConfig = DEFAULT_TOL) -> Projector:
    """Orthogonal projector onto the span of ``vectors`` (SVD rank cut)."""
    vs = [as_vector(v) for v in vectors]
    if not vs:
        raise ValueError("span_projector needs at least one vector")
    dims = {v.shape[0] for v in vs}
    if len(dims) != 1:
        raise DimensionError(f"vectors have mismatched dimensions {sorted(dims)}")
    m = np.stack(vs, axis=1)
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("span_projector: all input vectors are zero")
    k = int(np.sum(s > tol.tol_rank * s[0]))
    basis = u[:, :k]
    return Projector(basis @ basis.conj().T, check=False)


def gram(vectors) -> np.ndarray:
    """G[i, j] = <v_i, v_j> (conjugate-linear in the first slot).

    Uses a non-BLAS einsum so every entry has a fixed reduction order.
    """
    if isinstance(vectors, np.ndarray) and vectors.ndim == 2:
        m = np.asarray(vectors, dtype=complex)
    else:
        vs = [as_vector(v) for v in vectors]
        if not vs:
            return np.zeros((0, 0), dtype=complex)
        dims = {v.shape[0] for v in vs}
        if len(dims) != 1:
            raise DimensionError(f"vectors have mismatched dimensions {sorted(dims)}")
        m = np.stack(vs)
    g = np.einsum("ik,jk->ij", m.conj(), m, optimize=False)
    # exact Hermitian symmetry: mirror the upper triangle
    iu = np.triu_indices(g.shape[0], 1)
    g[(iu[1], iu[0])] = g[iu].conj()
    g[np.diag_indices(g.shape[0])] = g.diagonal().real
    return g


def range_basis(matrix) -> np.ndarray:
    """Orthonormal basis of a projector's range: Gram-Schmidt on its columns in index order.

    A column is kept when its residual norm is at least 0.5/sqrt(dim); for a
    projector of rank m some column always clears that bar until m vectors are
    found, so one pass suffices. Returns an array of shape (dim, rank).
    """
    m = np.asarray(matrix, dtype=complex)
    dim = m.shape[0]
    rank = trace_rank(m)
    cut = 0.5 / np.sqrt(dim)
    basis: list[np.ndarray] = []
    for j in range(dim):
        if len(basis) == rank:
            break
        col = m[:, j].copy()
        for _ in range(2):
            for b in basis:
                col -= b * np.vdot(b, col)
        n = np.linalg.norm(col)
        if n >= cut:
            basis.append(col / n)
    if len(basis) != rank:
        raise ProjectorError(f"found {len(basis)} basis vectors for a rank-{rank} projector")
    if not basis:
        return np.zeros((dim, 0), dtype=complex)
    return _fix_phases(np.stack(basis, axis=1))


def _fix_phases(cols: np.ndarray) -> np.ndarray:
    """Make the first largest-magnitude entry of each column real and positive."""
    out = cols.copy()
    for j in range(out.shape[1]):
        c = out[:, j]
        k = int(np.argmax(np.abs(c) > np.abs(c).max() * (1 - 1e-9)))
        phase = c[k] / abs(c[k])
        out[:, j] = c / phase
    return out


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return scale * 0.5 * (a + a.conj().T)


def random_state(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def random_partition_set(dim: int, ranks: Sequence[int], rng: np.random.Generator, label: str = "") -> ProjectorSet:
    """Unitarily rotated partition of C^dim into blocks of the given ranks."""
    if sum(ranks) != dim or any(r <= 0 for r in ranks):
        raise ValueError(f"ranks {ranks} must be positive and sum to {dim}")
    u = random_unitary(dim, rng)
    members, start = [], 0
    for r in ranks:
        cols = u[:, start:start + r]
        members.append(Projector(cols @ cols.conj().T, check=False))
        start += r
    return ProjectorSet(members, label=label)
