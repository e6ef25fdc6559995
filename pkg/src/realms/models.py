"""
Desk-scale models: qubit chains with volume-averaged number densities, the
coin-selected spin measurement, a one-dimensional wave packet, a two-slit
style interference qubit, and a system with orthogonal environment records.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adaptive import (
    DEFAULT_P_MIN,
    CompositeRule,
    FixedRule,
    FollowSupportRule,
    PruneRule,
    RefinementCandidate,
    grow,
)
from .errors import BoundaryError, DimensionError, NonCommutingError
from .framework import Factorization
from .histories import TRIVIAL, BranchTree, TimeGrid, start_tree
from .linalg import (
    DEFAULT_TOL,
    Hamiltonian,
    Projector,
    ProjectorSet,
    ToleranceConfig,
    commutator_norm,
    tensor,
    tensor_state,
    validate_projector_set,
)

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
P0 = np.diag([1.0, 0.0]).astype(complex)
P1 = np.diag([0.0, 1.0]).astype(complex)
KET0 = np.array([1, 0], dtype=complex)
KET1 = np.array([0, 1], dtype=complex)
PLUS = np.array([1, 1], dtype=complex) / np.sqrt(2)
MINUS = np.array([1, -1], dtype=complex) / np.sqrt(2)
HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)


def ket_projector(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    return np.outer(v, v.conj())


def involution_hamiltonian(v: np.ndarray, tol: ToleranceConfig = DEFAULT_TOL) -> Hamiltonian:
    """H = (pi/2)(I - V) for a Hermitian unitary V, so exp(-iH) = V and exp(-2iH) = I."""
    v = np.asarray(v, dtype=complex)
    eye = np.eye(v.shape[0])
    if np.linalg.norm(v @ v - eye) > 1e-12 or np.linalg.norm(v - v.conj().T) > 1e-12:
        raise ValueError("V must be a Hermitian involution")
    return Hamiltonian(0.5 * np.pi * (eye - v), tol)


# ----------------------------------------------------------------- lattice

@dataclass
class LatticeModel:
    n_sites: int
    local_dim: int
    hamiltonian: Hamiltonian
    conserving: bool = True
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.local_dim ** self.n_sites

    def site_operator(self, op, site: int) -> np.ndarray:
        if not 0 <= site < self.n_sites:
            raise IndexError(f"site {site} outside 0..{self.n_sites - 1}")
        factors = [np.eye(self.local_dim)] * self.n_sites
        factors[site] = op
        return tensor(*factors)

    def number(self, site: int) -> np.ndarray:
        return self.site_operator(np.diag(np.arange(self.local_dim)).astype(complex), site)

    def total_number(self) -> np.ndarray:
        return sum(self.number(i) for i in range(self.n_sites))

    def basis_state(self, occupations: Sequence[int]) -> np.ndarray:
        if len(occupations) != self.n_sites:
            raise DimensionError("one occupation per site")
        idx = 0
        for n in occupations:
            idx = idx * self.local_dim + int(n)
        v = np.zeros(self.dim, dtype=complex)
        v[idx] = 1.0
        return v


def xx_chain(n_sites: int, hop: float = 1.0, fields: Sequence[float] | None = None,
             tol: ToleranceConfig = DEFAULT_TOL) -> LatticeModel:
    """Open XX chain: H = -hop sum_i (s+_i s-_{i+1} + h.c.) + sum_i f_i n_i."""
    if n_sites < 1:
        raise ValueError("need at least one site")
    if 2 ** n_sites > 4096:
        raise DimensionError("chain too long for dense storage")
    sp = np.array([[0, 0], [1, 0]], dtype=complex)   # |1><0|
    model = LatticeModel(n_sites, 2, Hamiltonian.zero(2 ** n_sites), True,
                         {"hop": hop, "fields": list(fields) if fields is not None else None})
    h = np.zeros((model.dim, model.dim), dtype=complex)
    for i in range(n_sites - 1):
        a = model.site_operator(sp, i) @ model.site_operator(sp.conj().T, i + 1)
        h -= hop * (a + a.conj().T)
    if fields is not None:
        if len(fields) != n_sites:
            raise DimensionError("one field per site")
        for i, f in enumerate(fields):
            h += f * model.number(i)
    model.hamiltonian = Hamiltonian(h, tol)
    return model


@dataclass(frozen=True)
class VolumePartition:
    volumes: tuple
    labels: tuple = ()

    def __post_init__(self):
        vols = tuple(tuple(int(s) for s in v) for v in self.volumes)
        object.__setattr__(self, "volumes", vols)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"V{i}" for i in range(len(vols))))
        if any(len(v) == 0 for v in vols):
            raise ValueError("volumes must be nonempty")

    def validate(self, n_sites: int, exhaustive: bool = True):
        seen = [s for v in self.volumes for s in v]
        if len(seen) != len(set(seen)):
            raise ValueError("volumes overlap")
        if any(not 0 <= s < n_sites for s in seen):
            raise ValueError(f"volume sites must lie in 0..{n_sites - 1}")
        if exhaustive and sorted(seen) != list(range(n_sites)):
            raise ValueError("volumes do not cover every site")


@dataclass(frozen=True)
class RangeSpec:
    """Ranges [b0,b1), [b1,b2), ..., [b_{m-1}, b_m]; the last one is closed."""
    boundaries: tuple

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError(f"boundaries must be strictly increasing, got {b}")

    @property
    def n_ranges(self) -> int:
        return len(self.boundaries) - 1

    def index(self, value: float) -> int:
        b = self.boundaries
        for k in range(self.n_ranges - 1):
            if value < b[k + 1]:
                return k
        return self.n_ranges - 1


def average_density_operator(model: LatticeModel, vol: Sequence[int], quantity: str = "number") -> np.ndarray:
    """(1/|V|) sum of the local density over the sites in V."""
    if quantity != "number":
        raise NonCommutingError(f"only number densities are supported, not {quantity!r}")
    vol = list(vol)
    if not vol:
        raise ValueError("empty volume")
    return sum(model.number(s) for s in vol) / len(vol)


def range_projectors(op, ranges: RangeSpec, tol: ToleranceConfig = DEFAULT_TOL, label: str = "") -> ProjectorSet:
    """Spectral projectors of a Hermitian op grouped by range; empty ranges are dropped."""
    op = np.asarray(op, dtype=complex)
    if np.linalg.norm(op - op.conj().T) > tol.tol_proj:
        raise ValueError("operator is not Hermitian")
    dim = op.shape[0]
    off = op - np.diag(np.diagonal(op))
    if not np.any(off):
        # diagonal: projectors are exact coordinate projectors
        evals = np.real(np.diagonal(op))
        vecs = None
    else:
        evals, vecs = np.linalg.eigh(op)
    b = ranges.boundaries
    lo, hi = b[0], b[-1]
    scale = max(1.0, float(np.max(np.abs(evals))))
    eps = tol.tol_rank * scale
    if evals.min() < lo - eps or evals.max() > hi + eps:
        raise ValueError(f"ranges [{lo}, {hi}] do not cover the spectrum [{evals.min()}, {evals.max()}]")
    distinct = np.unique(np.round(evals, 12))
    for x in b[1:-1]:
        close = np.abs(evals - x) <= eps
        if np.any(close):
            others = distinct[np.abs(distinct - x) > eps]
            nearest = others[np.argmin(np.abs(others - x))] if others.size else x + 1.0
            suggestion = 0.5 * (x + nearest)
            raise BoundaryError(f"eigenvalue {x} lies on boundary {x}; try {suggestion}", x, suggestion)
    groups: list[list[int]] = [[] for _ in range(ranges.n_ranges)]
    for i, e in enumerate(evals):
        groups[ranges.index(float(e))].append(i)
    members, names, notes = [], [], []
    for k, idx in enumerate(groups):
        name = f"[{b[k]:g},{b[k + 1]:g}{']' if k == ranges.n_ranges - 1 else ')'}"
        if not idx:
            notes.append(f"range {name} is empty and was dropped")
            continue
        if vecs is None:
            m = np.zeros((dim, dim), dtype=complex)
            m[idx, idx] = 1.0
        else:
            v = vecs[:, idx]
            m = v @ v.conj().T
        members.append(Projector(m, tol))
        names.append(name)
    return ProjectorSet(members, label=label, names=names, notes=notes)


def joint_set(sets: Sequence[ProjectorSet], tol: ToleranceConfig = DEFAULT_TOL, label: str = "") -> ProjectorSet:
    """All nonzero products P_a Q_b ... of mutually commuting sets."""
    for s, t in itertools.combinations(sets, 2):
        for p in s:
            for q in t:
                c = commutator_norm(p.matrix, q.matrix)
                if c > tol.tol_proj:
                    raise NonCommutingError(f"sets {s.label!r} and {t.label!r} do not commute ({c:.3g})")
    dim = sets[0].dim
    members, names = [], []
    for combo in itertools.product(*[range(len(s)) for s in sets]):
        m = np.eye(dim, dtype=complex)
        for s, k in zip(sets, combo):
            m = m @ s[k].matrix
        if np.real(np.trace(m)) < 0.5:
            continue
        members.append(Projector(0.5 * (m + m.conj().T), tol))
        names.append("&".join(s.names[k] if s.names else str(k) for s, k in zip(sets, combo)))
    return ProjectorSet(members, label=label, names=names)


def volume_sets(model: LatticeModel, partition: VolumePartition, ranges: RangeSpec,
                tol: ToleranceConfig = DEFAULT_TOL) -> list[ProjectorSet]:
    return [range_projectors(average_density_operator(model, v), ranges, tol, label=f"n[{lab}]")
            for v, lab in zip(partition.volumes, partition.labels)]


def number_sector_set(model: LatticeModel, tol: ToleranceConfig = DEFAULT_TOL) -> ProjectorSet:
    """Eigenprojectors of the total number, one per occupation."""
    n = model.n_sites
    edges = [-0.5 + k for k in range(n + 2)]
    return range_projectors(model.total_number(), RangeSpec(tuple(edges)), tol, label="N")


# ---------------------------------------------------------------- scenario

@dataclass
class Scenario:
    """A model plus everything needed to grow and analyse its histories."""
    name: str
    kind: str
    hamiltonian: Hamiltonian
    psi0: np.ndarray
    grid: TimeGrid
    rules: list
    tol: ToleranceConfig = DEFAULT_TOL
    subsystem_dims: tuple | None = None
    record_system: tuple | None = None
    env_dim: int | None = None
    groupings: dict = field(default_factory=dict)
    extensions: dict = field(default_factory=dict)
    refine_base: list | None = None
    candidates: list = field(default_factory=list)
    refine_mode: str = "medium"
    assert_checks: bool = True
    params: dict = field(default_factory=dict)
    observables: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.hamiltonian.dim

    def build_tree(self, rules: Sequence | None = None) -> BranchTree:
        tree = start_tree(self.psi0, self.hamiltonian, self.grid, self.tol, name=self.name)
        return grow(tree, self.rules if rules is None else rules)

    def build_refine_base(self) -> BranchTree:
        return self.build_tree(self.refine_base if self.refine_base is not None else self.rules)

    def record_factorization(self) -> Factorization | None:
        if self.subsystem_dims is None or self.record_system is None:
            return None
        return Factorization.from_subsystems(self.subsystem_dims, self.record_system)

    def with_tol(self, tol: ToleranceConfig) -> "Scenario":
        from dataclasses import replace
        return replace(self, tol=tol, hamiltonian=Hamiltonian(self.hamiltonian.matrix, tol))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "dim": self.dim,
            "grid": self.grid.to_dict(),
            "params": self.params,
            "rules": [r.to_dict() for r in self.rules],
            "subsystem_dims": None if self.subsystem_dims is None else list(self.subsystem_dims),
            "record_system": None if self.record_system is None else list(self.record_system),
            "tolerances": {"tol_proj": self.tol.tol_proj, "tol_decoh": self.tol.tol_decoh,
                           "tol_rank": self.tol.tol_rank},
        }


def _named(members, label, names, tol):
    return ProjectorSet([Projector(m, tol) for m in members], label=label, names=names)


def spin_operators():
    """Coin (x) spin (x) apparatus pieces for the coin-selected measurement."""
    ph = tensor(P0, I2, I2)
    pt = tensor(P1, I2, I2)
    pz_plus = tensor(I2, P0, I2)
    px_plus = tensor(I2, ket_projector(PLUS), I2)
    cnot_z = tensor(P0, I2) + tensor(P1, X)
    cnot_x = tensor(ket_projector(PLUS), I2) + tensor(ket_projector(MINUS), X)
    v = tensor(P0, cnot_z) + tensor(P1, cnot_x)
    return {"P_h": ph, "P_t": pt, "Pz+": pz_plus, "Px+": px_plus, "V": v}


def build_spin_measurement_scenario(copy_after: bool = False, tol: ToleranceConfig = DEFAULT_TOL,
                                    name: str = "spin") -> Scenario:
    """A coin picks z or x; the spin is measured in that basis and copied into an apparatus.

    Factor order coin (x) spin (x) apparatus, heads = coin |0>. The copy
    unitary V acts over one time unit; two units give the identity. By
    default the copy happens before the second alternative; with
    ``copy_after`` it happens during the final, trivial interval.
    """
    ops = spin_operators()
    h = involution_hamiltonian(ops["V"], tol)
    grid = TimeGrid(0.0, (2.0, 4.0, 5.0) if copy_after else (2.0, 3.0, 5.0))
    psi0 = tensor_state(PLUS, PLUS, KET0)
    eye = np.eye(8, dtype=complex)
    coin = _named([ops["P_h"], ops["P_t"]], "coin", ["heads", "tails"], tol)
    hz = ops["P_h"] @ ops["Pz+"]
    tx = ops["P_t"] @ ops["Px+"]
    heads_set = _named([hz, eye - hz], "heads:z", ["z+", "z-"], tol)
    tails_set = _named([tx, eye - tx], "tails:x", ["x+", "x-"], tol)
    rules = [FixedRule(coin), FixedRule({(0,): heads_set, (1,): tails_set}), FixedRule(TRIVIAL)]
    groupings = {"merge_tails": [[(0, 0, 0)], [(0, 1, 0)], [(1, 0, 0), (1, 1, 0)]]}
    coin_x = _named([tensor(ket_projector(PLUS), I2, I2), tensor(ket_projector(MINUS), I2, I2)],
                    "coin_x", ["+", "-"], tol)
    yp = ket_projector(np.array([1, 1j]) / np.sqrt(2))
    spin_y = _named([tensor(I2, yp, I2), tensor(I2, np.eye(2) - yp, I2)], "spin_y", ["y+", "y-"], tol)
    return Scenario(
        name=name, kind="spin", hamiltonian=h, psi0=psi0, grid=grid, rules=rules, tol=tol,
        subsystem_dims=(2, 2, 2), record_system=(1,), groupings=groupings,
        extensions={"coin_x": (coin_x, 2.0), "spin_y": (spin_y, 2.0)},
        params={"copy_after": copy_after},
    )


def build_twoslit_scenario(tol: ToleranceConfig = DEFAULT_TOL, name: str = "twoslit") -> Scenario:
    """One qubit, Hadamard evolution per time unit, z alternatives at t=1 and t=2.

    Nothing records the first alternative, so the branches interfere.
    """
    h = involution_hamiltonian(HADAMARD, tol)
    z = _named([P0, P1], "z", ["0", "1"], tol)
    return Scenario(
        name=name, kind="twoslit", hamiltonian=h, psi0=KET0.copy(), grid=TimeGrid(0.0, (1.0, 2.0)),
        rules=[FixedRule(z), FixedRule(z)], tol=tol, subsystem_dims=(2,), record_system=(0,),
        refine_base=[FixedRule(z), FixedRule(TRIVIAL)],
        candidates=[RefinementCandidate(2, z, name="second_slit_z")],
    )


def build_records_scenario(seed: int = 7, tol: ToleranceConfig = DEFAULT_TOL, name: str = "records") -> Scenario:
    """Two system qubits each copied into its own environment qubit.

    Factors S1 (x) S2 (x) E1 (x) E2; V = CNOT(S1->E1) CNOT(S2->E2). The system
    is measured in the z basis after one copy, then a trivial step lets the
    records stand.
    """
    cnot1 = tensor(P0, I2, I2, I2) + tensor(P1, I2, X, I2)
    cnot2 = tensor(I2, P0, I2, I2) + tensor(I2, P1, I2, X)
    v = cnot1 @ cnot2
    h = involution_hamiltonian(v, tol)
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    s = s / np.linalg.norm(s)
    psi0 = np.kron(s, tensor_state(KET0, KET0))
    members = [tensor(np.diag(np.eye(4)[k]).astype(complex), np.eye(4)) for k in range(4)]
    zset = _named(members, "system_z", ["00", "01", "10", "11"], tol)
    sys_obs = np.kron(X, Y) + 0.5 * np.kron(Z, I2)
    w, u = np.linalg.eigh(sys_obs)
    eig = []
    for val in np.unique(np.round(w, 10)):
        cols = u[:, np.abs(w - val) < 1e-9]
        eig.append(np.kron(cols @ cols.conj().T, np.eye(4)))
    obs_set = _named(eig, "system_observable", [f"e{k}" for k in range(len(eig))], tol)
    return Scenario(
        name=name, kind="records", hamiltonian=h, psi0=psi0, grid=TimeGrid(0.0, (1.0, 3.0)),
        rules=[FixedRule(zset), FixedRule(TRIVIAL)], tol=tol,
        subsystem_dims=(2, 2, 2, 2), record_system=(0, 1),
        extensions={"system_observable": (obs_set, 2.0)},
        params={"seed": seed},
    )


def build_wave_packet_scenario(n_sites: int = 12, hop_strength: float = 1.0, packet_width: float = 1.0,
                               center: float | None = None, momentum: float = np.pi / 2, n_steps: int = 3,
                               dt: float = 1.0, p_min: float = DEFAULT_P_MIN, threshold: float = 1e-3,
                               cell_size: int = 1, adaptive: str = "follow",
                               tol: ToleranceConfig = DEFAULT_TOL, name: str = "wavepacket") -> Scenario:
    """Single excitation on an open chain; alternatives are position cells.

    ``adaptive`` picks the rule per step: "follow" refines only cells that
    carry mass, "prune" refines every cell except on branches below p_min,
    "full" refines every cell on every branch.
    """
    if n_sites < 8:
        raise ValueError("wave packet needs at least 8 sites")
    if packet_width <= 0 or cell_size < 1 or n_sites % cell_size:
        raise ValueError("invalid packet width or cell size")
    h = -hop_strength * (np.eye(n_sites, k=1) + np.eye(n_sites, k=-1))
    ham = Hamiltonian(h.astype(complex), tol)
    c = n_sites / 4 if center is None else center
    j = np.arange(n_sites)
    psi = np.exp(-((j - c) ** 2) / (4 * packet_width ** 2)) * np.exp(1j * momentum * j)
    psi = psi / np.linalg.norm(psi)
    cells = []
    for k in range(n_sites // cell_size):
        m = np.zeros((n_sites, n_sites), dtype=complex)
        idx = np.arange(k * cell_size, (k + 1) * cell_size)
        m[idx, idx] = 1.0
        cells.append(m)
    cell_set = _named(cells, "cells", [f"c{k}" for k in range(len(cells))], tol)
    if adaptive == "full":
        rule = FixedRule(cell_set)
    elif adaptive == "prune":
        rule = CompositeRule([PruneRule(p_min), FixedRule(cell_set)])
    elif adaptive == "follow":
        rule = CompositeRule([PruneRule(p_min), FollowSupportRule(cell_set, threshold)])
    else:
        raise ValueError(f"unknown adaptive mode {adaptive!r}")
    return Scenario(
        name=name, kind="wavepacket", hamiltonian=ham, psi0=psi,
        grid=TimeGrid.uniform(n_steps, dt), rules=[rule] * n_steps, tol=tol, assert_checks=False,
        params={"n_sites": n_sites, "hop_strength": hop_strength, "packet_width": packet_width,
                "center": c, "momentum": momentum, "p_min": p_min, "threshold": threshold,
                "cell_size": cell_size, "adaptive": adaptive},
        observables={"cells": cell_set},
    )


def build_chain_scenario(n_sites: int = 4, volumes=((0, 1), (2, 3)), ranges=(0.0, 0.75, 1.0),
                         steps: int = 2, dt: float = 0.5, hop: float = 1.0, occupations=None,
                         superpose=None, tol: ToleranceConfig = DEFAULT_TOL, name: str = "chain") -> Scenario:
    """XX chain with volume-averaged number ranges at every step.

    The initial state is a basis state (``occupations``) or an equal
    superposition of several (``superpose``). Refinement candidates split
    the conserved total number at each step, then the volume ranges.
    """
    model = xx_chain(n_sites, hop, tol=tol)
    part = VolumePartition(tuple(tuple(v) for v in volumes))
    part.validate(n_sites, exhaustive=False)
    rs = RangeSpec(tuple(ranges))
    vsets = volume_sets(model, part, rs, tol)
    joint = vsets[0] if len(vsets) == 1 else joint_set(vsets, tol, label="volumes")
    if superpose is not None:
        psi = sum(model.basis_state(o) for o in superpose)
        psi = psi / np.linalg.norm(psi)
    else:
        occ = occupations if occupations is not None else [1] * (n_sites // 2) + [0] * (n_sites - n_sites // 2)
        psi = model.basis_state(occ)
    nset = number_sector_set(model, tol)
    with_volumes = joint_set([nset, joint], tol, label="N&volumes")
    candidates = []
    for k in range(1, steps + 1):
        candidates.append(RefinementCandidate(k, nset, name=f"N@{k}"))
    for k in range(1, steps + 1):
        candidates.append(RefinementCandidate(k, with_volumes, name=f"N&volumes@{k}"))
    return Scenario(
        name=name, kind="chain", hamiltonian=model.hamiltonian, psi0=psi,
        grid=TimeGrid.uniform(steps, dt), rules=[FixedRule(joint)] * steps, tol=tol,
        subsystem_dims=(2,) * n_sites, refine_base=[FixedRule(TRIVIAL)] * steps,
        candidates=candidates, assert_checks=False,
        params={"n_sites": n_sites, "volumes": [list(v) for v in part.volumes], "ranges": list(rs.boundaries),
                "hop": hop, "dt": dt},
        observables={"volumes": joint, "number": nset},
    )


def check_number_conservation(model: LatticeModel) -> float:
    return commutator_norm(model.hamiltonian.matrix, model.total_number())


def validate_all(sets: Sequence[ProjectorSet], tol: ToleranceConfig = DEFAULT_TOL) -> bool:
    return all(validate_projector_set(s, tol).passed for s in sets)
