import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import frozen
import oracles
import randmodels as rm
import realms as r
from realms.errors import DimensionError, StrongDecoherenceError

seeds = st.integers(0, 2**32 - 1)


def spin_records(copy_after=False):
    sc = r.build_spin_measurement_scenario(copy_after=copy_after)
    tree = sc.build_tree()
    fact = sc.record_factorization()
    return sc, tree, fact, r.construct_records(r.extract_z(tree, fact), tree)


def test_spin_records():
    _, tree, _, rs = spin_records()
    assert rs.strong_passed
    assert [rs.ranks[b] for b in rs.labels] == [2, 2, 2, 0]
    d = r.verify_records(rs, tree)
    assert d.passed and d.value <= 1e-10 and d.details["orthogonality_residual"] <= 1e-10
    assert [e["past"] for e in rs.to_dict()["ranks"]] == [list(b) for b in rs.labels]


def test_records_are_environment_projectors():
    _, _, fact, rs = spin_records()
    for b, rec in rs.members.items():
        env = rs.env[b].matrix
        assert np.allclose(rec.matrix, fact.lift_environment(env), atol=1e-12)
        assert np.allclose(rec.matrix @ rec.matrix, rec.matrix, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_records_property(seed):
    m = rm.record_model(np.random.default_rng(seed))
    zf = r.extract_z(m.tree, m.fact)
    if not r.strong_check(m.tree, m.fact, zf=zf).passes:
        with pytest.raises(StrongDecoherenceError):
            r.construct_records(zf, m.tree)
        loose = r.construct_records(zf, m.tree, require_strong=False)
        assert not loose.strong_passed
        return
    rs = r.construct_records(zf, m.tree)
    psi = m.tree.leaf_matrix().sum(axis=0)
    for b, rec in rs.members.items():
        assert np.linalg.norm(rec.matrix @ psi - m.tree.branch_vector(b)) <= 1e-8
    assert rs.orthogonality_residual() <= 1e-10


def test_construct_records_without_tree_uses_z_only():
    _, tree, fact, rs = spin_records()
    alone = r.construct_records(r.extract_z(tree, fact))
    for b in rs.labels:
        assert np.allclose(alone.members[b].matrix, rs.members[b].matrix)


def test_copy_after_records_only_exist_after_the_copy():
    sc, tree, fact, rs = spin_records(copy_after=True)
    assert r.verify_records(rs, tree).passed
    early = r.verify_records(rs, tree.truncated(2))
    assert not early.passed and early.value == pytest.approx(0.5, abs=1e-9)


def test_permanence_commuting_extension():
    sc, tree, _, rs = spin_records()
    pset, dt = sc.extensions["spin_y"]
    d = r.permanence_check(tree, rs, pset, dt)
    assert d.passed and d.details["precondition_passed"] and d.details["guaranteed"]
    assert d.details["status"] == "guaranteed"


def test_permanence_counterexample_matches_oracle():
    sc, tree, _, rs = spin_records()
    pset, dt = sc.extensions["coin_x"]
    d = r.permanence_check(tree, rs, pset, dt)
    assert not d.passed and not d.details["precondition_passed"]
    assert d.value == pytest.approx(oracles.coin_x_past_interference(), abs=1e-12)
    assert d.value == pytest.approx(frozen.SPIN_COIN_X_INTERFERENCE, abs=1e-12)
    assert d.details["witness"] is not None


def test_permanence_needs_dt_at_grid_end():
    sc, tree, _, rs = spin_records()
    with pytest.raises(ValueError, match="dt"):
        r.permanence_check(tree, rs, sc.extensions["spin_y"][0])
    with pytest.raises(TypeError):
        r.permanence_check(tree, rs, "spin_y", 1.0)
    # a trivial extension never creates interference
    d = r.permanence_check(tree, rs, r.TRIVIAL, 1.0)
    assert d.passed and d.details["precondition_passed"]


def test_permanence_uses_remaining_grid_step():
    sc = r.build_records_scenario()
    tree = sc.build_tree().truncated(1)
    fact = sc.record_factorization()
    rs = r.construct_records(r.extract_z(tree, fact), tree)
    d = r.permanence_check(tree, rs, sc.extensions["system_observable"][0])
    assert d.passed


def test_branch_density_matrices():
    _, tree, fact, _ = spin_records()
    traces = []
    for b in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        bd = r.branch_density_matrix(tree, fact, b)
        v = fact.to_product(tree.branch_vector(b))
        expected = oracles.partial_trace_env(np.outer(v, v.conj()), fact.d_s, fact.d_e)
        assert np.allclose(bd.rho_s, expected, atol=1e-14)
        assert np.linalg.eigvalsh(bd.rho_s)[0] >= -1e-14
        traces.append(bd.trace)
    assert np.allclose(traces, [0.25, 0.25, 0.5, 0.0], atol=1e-12)
    assert set(bd.to_dict()) == {"label", "trace", "min_eigenvalue", "hermiticity"}
    with pytest.raises(DimensionError):
        r.branch_density_matrix(tree, r.Factorization(2, 2), (0,))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_expectation_identity_on_strong_models(seed):
    rng = np.random.default_rng(seed)
    m = rm.record_model(rng)
    o_s = rm.hermitian(m.d_s, rng)
    d = r.expectation_identity_check(m.tree, m.fact, r.SystemObservable(o_s))
    assert d.details["intermediate_error"] <= 1e-10  # holds for any state
    if r.strong_check(m.tree, m.fact).passes:
        assert d.passed


def test_expectation_identity_records_and_twoslit():
    sc = r.build_records_scenario()
    tree = sc.build_tree()
    fact = sc.record_factorization()
    d = r.expectation_identity_check(tree, fact, np.kron(np.diag([1, -1]), np.eye(2)))
    assert d.passed and d.details["n_branches"] == 4
    ts = r.build_twoslit_scenario()
    v = r.expectation_identity_check(ts.build_tree(), ts.record_factorization(), np.diag([1.0, -1.0]))
    assert not v.passed
    assert v.details["violation"] == pytest.approx(frozen.TWOSLIT_SIGMA_Z_VIOLATION, abs=1e-12)
    with pytest.raises(DimensionError):
        r.expectation_identity_check(tree, fact, np.eye(3))
