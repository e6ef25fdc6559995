"""Seeded random models for the property and acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import realms as r


def haar_unitary(dim, rng):
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, rr = np.linalg.qr(z)
    return q * (np.diagonal(rr) / np.abs(np.diagonal(rr)))


def hermitian(dim, rng, scale=1.0):
    a = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    h = 0.5 * (a + a.conj().T)
    return scale * h / np.linalg.norm(h, 2)


def state(dim, rng):
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def composition(dim, parts, rng):
    """Random positive integers summing to dim."""
    parts = min(parts, dim)
    cuts = np.sort(rng.choice(np.arange(1, dim), size=parts - 1, replace=False)) if parts > 1 else []
    edges = [0, *cuts, dim]
    return [int(b - a) for a, b in zip(edges[:-1], edges[1:])]


def partition(dim, rng, parts=None, basis=None):
    """Projectors onto consecutive column blocks of a random unitary."""
    parts = parts or int(rng.integers(2, 5))
    u = haar_unitary(dim, rng) if basis is None else basis
    out, start = [], 0
    for k in composition(dim, parts, rng):
        cols = u[:, start:start + k]
        out.append(cols @ cols.conj().T)
        start += k
    return out


def pset(members, label="p"):
    return r.ProjectorSet([r.Projector(m) for m in members], label=label)


def random_tree(rng, dim=None, steps=None):
    """Random H, state and per-step random partitions (the same set for all leaves of a step)."""
    dim = dim or int(rng.integers(2, 17))
    steps = steps or int(rng.integers(1, 4))
    h = r.Hamiltonian(hermitian(dim, rng, scale=float(rng.uniform(0.3, 3.0))))
    dts = rng.uniform(0.1, 1.5, size=steps)
    grid = r.TimeGrid(0.0, tuple(np.cumsum(dts)))
    tree = r.start_tree(state(dim, rng), h, grid)
    sets = []
    for _ in range(steps):
        s = pset(partition(dim, rng))
        sets.append(s)
        tree = r.extend_tree(tree, lambda lab, s=s: s)
    return tree, sets


@dataclass
class RecordModel:
    tree: r.BranchTree
    fact: r.Factorization
    eps: float
    imperfect: bool
    d_s: int
    d_e: int


def record_model(rng, eps=None, imperfect=None) -> RecordModel:
    """System (x) environment where each system basis state copies into its own env state.

    H = sum_j P_j (x) K_j with exp(-i K_j) = W V_j W^dag, V_j swapping env |0> and |j>.
    Alternatives: the copy basis at t=1, then a random system partition at t=3
    (V_j^3 = V_j, so the records stand). ``eps`` adds a random Hermitian
    perturbation; ``imperfect`` starts the environment off the ready state.
    """
    d_s = int(rng.choice([2, 3]))
    d_e = int(rng.choice([2, 4, 8] if d_s == 2 else [3, 4, 5]))
    if eps is None:
        eps = float(rng.choice([0.0, 0.0, 1e-12, 1e-3, 1e-1]))
    if imperfect is None:
        imperfect = bool(rng.random() < 0.2)
    us = haar_unitary(d_s, rng)
    w = haar_unitary(d_e, rng)
    h = np.zeros((d_s * d_e, d_s * d_e), dtype=complex)
    sys_p = []
    for j in range(d_s):
        pj = np.outer(us[:, j], us[:, j].conj())
        sys_p.append(pj)
        v = np.eye(d_e, dtype=complex)
        if j:
            v[[0, j]] = v[[j, 0]]
        k = 0.5 * np.pi * (np.eye(d_e) - w @ v @ w.conj().T)
        h += np.kron(pj, k)
    if eps:
        h += hermitian(d_s * d_e, rng, scale=eps)
    e0 = np.zeros(d_e, dtype=complex)
    e0[0] = 1.0
    if imperfect:
        e0 = np.cos(0.4) * e0 + np.sin(0.4) * state(d_e, rng)
        e0 /= np.linalg.norm(e0)
    psi0 = np.kron(state(d_s, rng), w @ e0)
    eye_e = np.eye(d_e)
    first = pset([np.kron(p, eye_e) for p in sys_p], "copy_basis")
    second = pset([np.kron(p, eye_e) for p in partition(d_s, rng, parts=int(rng.integers(1, d_s + 1)))
                   if np.trace(p).real > 0.5], "later")
    tree = r.start_tree(psi0, r.Hamiltonian(h), r.TimeGrid(0.0, (1.0, 3.0)))
    tree = r.extend_tree(tree, lambda lab: first)
    tree = r.extend_tree(tree, lambda lab: second)
    fact = r.Factorization.from_subsystems((d_s, d_e), (0,))
    return RecordModel(tree, fact, eps, imperfect, d_s, d_e)
