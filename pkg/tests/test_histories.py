import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
import randmodels as rm
import realms as r
from realms.errors import DimensionError, TreeError, UnknownLabelError

seeds = st.integers(0, 2**32 - 1)
X = np.array([[0, 1], [1, 0]], dtype=complex)
ZSET = r.ProjectorSet([np.diag([1, 0]), np.diag([0, 1])], label="z")


def rabi_tree(dt=0.37, steps=3):
    return r.build_uniform_history(ZSET, r.TimeGrid.uniform(steps, dt), r.Hamiltonian(X), [1, 0])


def test_time_grid():
    g = r.TimeGrid.uniform(3, 0.5, t0=1.0)
    assert g.steps == (1.5, 2.0, 2.5) and len(g) == 3
    assert g.time(0) == 1.0 and g.interval(2) == pytest.approx(0.5)
    assert g.extended(1.0).steps[-1] == 3.5
    with pytest.raises(ValueError):
        r.TimeGrid(0.0, (1.0, 1.0))
    with pytest.raises(ValueError):
        r.TimeGrid(0.0, (-1.0,))


def test_rabi_closed_form():
    tree = rabi_tree()
    exact = oracles.rabi_probabilities(0.37, 3)
    for lab, p in exact.items():
        assert r.branch_probability(tree, lab) == pytest.approx(p, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_branch_vectors_match_dense_enumeration(seed):
    rng = np.random.default_rng(seed)
    tree, sets = rm.random_tree(rng, dim=int(rng.integers(2, 9)))
    times = [tree.grid.t0, *tree.grid.steps[:tree.depth]]
    leaves = oracles.histories(tree.psi0, tree.hamiltonian.matrix, times,
                               lambda lab: [p.matrix for p in sets[len(lab)]])
    for lab, v in leaves.items():
        assert np.allclose(tree.node(lab).vector, v, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_class_operator_matches_dense_chain(seed):
    rng = np.random.default_rng(seed)
    tree, sets = rm.random_tree(rng, dim=int(rng.integers(2, 7)))
    times = [tree.grid.t0, *tree.grid.steps[:tree.depth]]
    for lab in tree.labels():
        c = oracles.class_op(tree.hamiltonian.matrix, times, [sets[k][a].matrix for k, a in enumerate(lab)])
        assert np.allclose(r.class_operator(tree, lab), c, atol=1e-12)
        assert np.allclose(r.class_operator(tree, lab) @ tree.psi0, tree.node(lab).vector, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_branch_sum_and_probability_sum(seed):
    tree, _ = rm.random_tree(np.random.default_rng(seed))
    d = r.check_branch_sum(tree)
    assert d.passed and d.value <= 1e-12
    assert len(d.details["per_depth"]) == tree.depth + 1


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_leaf_probabilities_always_sum_to_one(seed):
    tree, _ = rm.random_tree(np.random.default_rng(seed))
    assert sum(leaf.probability for leaf in tree.leaves()) == pytest.approx(1.0, abs=1e-12)


def test_additivity_fails_without_decoherence():
    tree = r.build_twoslit_scenario().build_tree()
    coarse = r.coarse_grain(tree, [[(0, 0), (1, 0)], [(0, 1), (1, 1)]])
    p_fine = tree.node((0, 0)).probability + tree.node((1, 0)).probability
    assert p_fine == pytest.approx(0.5)
    assert abs(coarse.leaves()[0].probability - p_fine) > 0.1
    spin = r.build_spin_measurement_scenario()
    stree = spin.build_tree()
    merged = r.coarse_grain(stree, spin.groupings["merge_tails"])
    assert merged.leaves()[-1].probability == pytest.approx(
        stree.node((1, 0, 0)).probability + stree.node((1, 1, 0)).probability, abs=1e-14)


def test_labels_and_lookup():
    tree = rabi_tree(steps=2)
    assert tree.labels() == list(itertools.product((0, 1), repeat=2))
    assert (0,) in tree and (2,) not in tree
    with pytest.raises(UnknownLabelError):
        tree.node((5, 5))
    assert len(list(tree)) == 1 + 2 + 4
    assert np.allclose(tree.branch_vector((1,)), tree.node((1, 0)).vector + tree.node((1, 1)).vector)


def test_tree_is_immutable():
    tree = rabi_tree()
    with pytest.raises(ValueError):
        tree.leaves()[0].vector[0] = 1.0


def test_extend_tree_errors():
    tree = rabi_tree(steps=1)
    with pytest.raises(TreeError, match="exhausted"):
        r.extend_tree(tree, lambda lab: ZSET)
    base = r.start_tree([1, 0], r.Hamiltonian(X), r.TimeGrid.uniform(2))
    with pytest.raises(TreeError, match="no projector set"):
        r.extend_tree(base, {})
    with pytest.raises(TreeError, match="not current leaves"):
        r.extend_tree(base, {(): ZSET, (3,): ZSET})
    with pytest.raises(DimensionError):
        r.extend_tree(base, lambda lab: r.ProjectorSet([np.eye(3)]))
    broken = r.ProjectorSet([np.diag([1, 0])])
    with pytest.raises(TreeError, match="exhaustive"):
        r.extend_tree(base, lambda lab: broken)
    with pytest.raises(TypeError):
        r.extend_tree(base, lambda lab: "z")


def test_branch_dependent_sets():
    xset = r.ProjectorSet([np.full((2, 2), 0.5), np.array([[0.5, -0.5], [-0.5, 0.5]])], label="x")
    tree = r.start_tree([1, 0], r.Hamiltonian(X), r.TimeGrid.uniform(2, 0.3))
    tree = r.extend_tree(tree, lambda lab: ZSET)
    tree = r.extend_tree(tree, {(0,): xset, (1,): r.TRIVIAL})
    assert tree.labels() == [(0, 0), (0, 1), (1, 0)]
    assert tree.node((0,)).child_set is xset
    assert r.check_branch_sum(tree).value < 1e-14


def test_trivial_singleton():
    assert r.Trivial() is r.TRIVIAL
    import pickle
    assert pickle.loads(pickle.dumps(r.TRIVIAL)) is r.TRIVIAL
    s = r.TRIVIAL.as_set(3)
    assert len(s) == 1 and s[0].rank == 3


def test_negligible_flag():
    tree = r.build_spin_measurement_scenario().build_tree()
    assert tree.node((1, 1, 0)).negligible
    assert not tree.node((1, 0, 0)).negligible


def test_truncated_and_with_grid():
    tree = rabi_tree(steps=3)
    cut = tree.truncated(1)
    assert cut.depth == 1 and cut.labels() == [(0,), (1,)]
    assert np.allclose(cut.node((1,)).vector, tree.node((1,)).vector)
    with pytest.raises(TreeError):
        tree.truncated(4)
    longer = cut.with_grid(tree.grid.extended(1.0))
    assert len(longer.grid) == 4
    with pytest.raises(TreeError):
        tree.with_grid(r.TimeGrid.uniform(3, 0.5))


def test_coarse_grain_probabilities_and_class_ops():
    tree = rabi_tree(steps=2)
    coarse = r.coarse_grain(tree, [[(0, 0), (0, 1)], [(1, 0)], [(1, 1)]])
    assert coarse.labels() == [(0, 0), (1, 0), (1, 1)]
    assert coarse.node((0, 0)).probability == pytest.approx(tree.node((0,)).probability)
    # an aggregate across different first labels has no projector, only members
    agg = r.coarse_grain(tree, [[(0, 0), (1, 1)], [(0, 1), (1, 0)]])
    assert len(agg) == 2
    for leaf in agg.leaves():
        assert leaf.projector is None
        total = sum(r.class_operator(tree, m) for m in leaf.members)
        assert np.allclose(r.class_operator(agg, leaf.label), total)


def test_coarse_grain_errors():
    tree = rabi_tree(steps=2)
    with pytest.raises(TreeError, match="not exhaustive"):
        r.coarse_grain(tree, [[(0, 0)]])
    with pytest.raises(TreeError, match="more than one"):
        r.coarse_grain(tree, [[(0, 0), (0, 1)], [(0, 1), (1, 0), (1, 1)]])
    with pytest.raises(TreeError, match="not a leaf"):
        r.coarse_grain(tree, [[(0,)], [(1, 0), (1, 1)]])


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_coarse_graining_adds_branch_vectors(seed):
    rng = np.random.default_rng(seed)
    tree, _ = rm.random_tree(rng, dim=int(rng.integers(2, 7)), steps=2)
    labels = tree.labels()
    order = rng.permutation(len(labels))
    cut = sorted(rng.choice(np.arange(1, len(labels)), size=min(2, len(labels) - 1), replace=False))
    groups = [[labels[i] for i in part] for part in np.split(order, cut)]
    coarse = r.coarse_grain(tree, groups)
    assert r.check_branch_sum(coarse).value < 1e-12
    total = sum(leaf.probability for leaf in coarse.leaves())
    psi = tree.leaf_matrix().sum(axis=0)
    assert total <= 2 * len(groups) * np.vdot(psi, psi).real + 1e-12
    flag, _ = r.is_coarse_graining_of(coarse, tree)
    assert flag


def test_summary():
    s = rabi_tree(steps=1).summary()
    assert s["n_leaves"] == 2 and s["total_probability"] == pytest.approx(1.0)
