import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import frozen
import randmodels as rm
import realms as r
from realms.adaptive import RuleContext, apply_candidate, grow, leaf_patterns, rule_context, total_variation
from realms.errors import TreeError

seeds = st.integers(0, 2**32 - 1)
X = np.array([[0, 1], [1, 0]], dtype=complex)
ZSET = r.ProjectorSet([np.diag([1, 0]), np.diag([0, 1])], label="z")
XSET = r.ProjectorSet([np.full((2, 2), 0.5), np.array([[0.5, -0.5], [-0.5, 0.5]])], label="x")


def qubit_tree(steps=3, dt=0.4):
    return r.start_tree([1, 0], r.Hamiltonian(X), r.TimeGrid.uniform(steps, dt))


def test_fixed_rule_longest_prefix_wins():
    rule = r.FixedRule({(): ZSET, (1,): XSET, (1, 0): r.TRIVIAL})
    tree = grow(qubit_tree(), [r.FixedRule(ZSET), r.FixedRule(ZSET)])
    assign = r.apply_rule(tree, rule)
    assert assign[(0, 0)] is ZSET and assign[(0, 1)] is ZSET
    assert assign[(1, 1)] is XSET and assign[(1, 0)] is r.TRIVIAL
    with pytest.raises(TypeError):
        r.FixedRule("z")


def test_rule_without_answer_raises():
    rule = r.FixedRule({(1,): XSET})
    tree = grow(qubit_tree(), [r.FixedRule(ZSET)])
    with pytest.raises(TreeError, match="no set"):
        r.apply_rule(tree, rule)


def test_prune_rule_bounds():
    assert r.PruneRule(0.0).p_min == 0.0
    for bad in (1.0, -0.1, 2.0):
        with pytest.raises(ValueError):
            r.PruneRule(bad)
    with pytest.raises(ValueError):
        r.FollowSupportRule(ZSET, threshold=1.5)
    with pytest.raises(ValueError):
        r.CompositeRule([])


def test_prune_rule_stops_low_probability_branches():
    rule = r.CompositeRule([r.PruneRule(0.2), r.FixedRule(ZSET)])
    tree = grow(qubit_tree(), [rule] * 3)
    for leaf in tree.leaves():
        parent = tree.node(leaf.label[:-1])
        if parent.probability < 0.2:
            assert parent.child_set is r.TRIVIAL
        else:
            assert parent.child_set is ZSET
    assert r.check_branch_sum(tree).value < 1e-14


def test_prune_zero_threshold_keeps_everything():
    pruned = grow(qubit_tree(), [r.CompositeRule([r.PruneRule(0.0), r.FixedRule(ZSET)])] * 3)
    assert len(pruned) == 8


def test_follow_support_rule():
    cells = r.ProjectorSet([np.diag(np.eye(4)[k]).astype(complex) for k in range(4)], label="cells")
    rule = r.FollowSupportRule(cells, threshold=0.1)
    psi = np.array([1, 1, 0, 0], dtype=complex) / np.sqrt(2)
    ident = np.eye(4, dtype=complex)
    ctx = RuleContext(1, 1.0, ident, r.DEFAULT_TOL)
    node = r.BranchNode((), 0, psi)
    s = rule.assign(node, ctx)
    assert len(s) == 3 and r.validate_projector_set(s).passed
    assert rule.assign(node, ctx) is s  # cached by support pattern
    full = r.BranchNode((), 0, np.full(4, 0.5, dtype=complex))
    assert rule.assign(full, ctx) is cells
    assert rule.assign(r.BranchNode((), 0, np.zeros(4, complex)), ctx) is r.TRIVIAL


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_rules_see_only_their_own_branch(seed):
    """An assignment depends only on the leaf, so changing another branch changes nothing."""
    rng = np.random.default_rng(seed)
    dim = 4
    h = r.Hamiltonian(rm.hermitian(dim, rng))
    cells = r.ProjectorSet([np.diag(np.eye(dim)[k]).astype(complex) for k in range(dim)])
    rule = r.CompositeRule([r.PruneRule(0.05), r.FollowSupportRule(cells, 0.2)])
    first = rm.pset(rm.partition(dim, rng, parts=2))
    base = r.extend_tree(r.start_tree(rm.state(dim, rng), h, r.TimeGrid.uniform(2, 0.7)), lambda lab: first)
    assign = r.apply_rule(base, rule)
    ctx = rule_context(base)
    for leaf in base.leaves():
        alone = rule.assign(leaf, ctx)
        assert alone is assign[leaf.label]


def test_rule_context_checks_step():
    tree = qubit_tree(steps=1)
    with pytest.raises(TreeError):
        rule_context(tree, step=3)
    full = grow(tree, [r.FixedRule(ZSET)])
    with pytest.raises(TreeError):
        rule_context(full)


def test_leaf_patterns_and_total_variation():
    full = grow(qubit_tree(), [r.FixedRule(ZSET)] * 3)
    pruned = grow(qubit_tree(), [r.CompositeRule([r.PruneRule(0.2), r.FixedRule(ZSET)])] * 3)
    pats = leaf_patterns(pruned)
    assert any(None in p for p in pats.values())
    # z projections at every step: grouped probabilities are exactly additive
    assert total_variation(pruned, full) < 1e-14
    assert total_variation(full, full) == 0.0


def test_wave_packet_pruning_respects_tv():
    full = r.build_wave_packet_scenario(n_sites=12, adaptive="full").build_tree()
    pruned = r.build_wave_packet_scenario(n_sites=12, adaptive="prune", p_min=1e-6).build_tree()
    assert len(pruned) < len(full)
    assert total_variation(pruned, full) <= 1e-5


def test_refine_twoslit_rejects_second_alternative():
    sc = r.build_twoslit_scenario()
    base = sc.build_refine_base()
    refined, rep = r.maximal_refine(base, sc.candidates)
    assert rep.accepted == [] and rep.rejected == ["second_slit_z"]
    assert rep.entries[0]["measure"] == pytest.approx(frozen.TWOSLIT_MAX_OFFDIAG, abs=1e-12)
    assert refined is base


def test_refine_chain_accepts_expected_candidates():
    sc = r.build_chain_scenario(superpose=[[1, 1, 0, 0], [1, 0, 0, 0]])
    base = sc.build_refine_base()
    refined, rep = r.maximal_refine(base, sc.candidates)
    assert rep.accepted == ["N@1", "N@2", "N&volumes@1"]
    assert rep.rejected == ["N&volumes@2"]
    assert rep.order == ["N@1", "N@2", "N&volumes@1", "N&volumes@2"]
    assert r.medium_check(refined).passes
    d = rep.to_dict()
    assert d["n_accepted"] == 3 and d["candidate_order"] == rep.order and d["final"]["medium_passes"]
    _, again = r.maximal_refine(refined, sc.candidates)
    assert again.accepted == []


def test_refine_order_matters_and_is_reported():
    sc = r.build_chain_scenario(superpose=[[1, 1, 0, 0], [1, 0, 0, 0]])
    base = sc.build_refine_base()
    reordered = list(reversed(sc.candidates))
    _, rep = r.maximal_refine(base, reordered)
    assert rep.order == [c.name for c in reordered]


def test_apply_candidate_statuses():
    tree = grow(qubit_tree(steps=2), [r.FixedRule(r.TRIVIAL), r.FixedRule(ZSET)])
    new, status, _ = apply_candidate(tree, r.RefinementCandidate(1, ZSET))
    assert status == "changed" and len(new) == 4
    assert apply_candidate(tree, r.RefinementCandidate(2, ZSET))[1] == "no-op"
    assert apply_candidate(tree, r.RefinementCandidate(3, ZSET))[1] == "invalid"
    assert apply_candidate(tree, r.RefinementCandidate(2, XSET))[1] == "invalid"
    assert apply_candidate(tree, r.RefinementCandidate(1, ZSET, prefix=(1,)))[1] == "invalid"
    coarse = r.coarse_grain(tree, [[(0, 0), (0, 1)]])
    with pytest.raises(TreeError):
        apply_candidate(coarse, r.RefinementCandidate(1, ZSET))


def test_apply_candidate_with_prefix_keeps_later_sets():
    tree = grow(qubit_tree(steps=3), [r.FixedRule(ZSET), r.FixedRule(r.TRIVIAL), r.FixedRule(ZSET)])
    new, status, _ = apply_candidate(tree, r.RefinementCandidate(2, ZSET, prefix=(1,)))
    assert status == "changed"
    assert new.labels() == [(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
    assert r.check_branch_sum(new).value < 1e-14


def test_refine_strong_mode():
    sc = r.build_spin_measurement_scenario()
    base = sc.build_tree(rules=[sc.rules[0], r.FixedRule(r.TRIVIAL), r.FixedRule(r.TRIVIAL)])
    heads = sc.rules[1].table[(0,)]
    cand = [r.RefinementCandidate(2, heads, prefix=(0,), name="heads_z")]
    _, rep = r.maximal_refine(base, cand, mode="strong", fact=sc.record_factorization())
    assert rep.accepted == ["heads_z"]
    with pytest.raises(ValueError):
        r.maximal_refine(base, cand, mode="weak")


def test_is_coarse_graining_of():
    sc = r.build_spin_measurement_scenario()
    tree = sc.build_tree()
    coarse = r.coarse_grain(tree, sc.groupings["merge_tails"])
    ok, witness = r.is_coarse_graining_of(coarse, tree)
    assert ok and witness[(1, 0, 0)] == [(1, 0, 0), (1, 1, 0)]
    ok, _ = r.is_coarse_graining_of(tree, tree)
    assert ok
    # the finer tree is not a coarse graining of the coarser one
    ok, info = r.is_coarse_graining_of(tree, coarse)
    assert not ok and info["residual"] > 0.1


def test_is_coarse_graining_of_independent_trees():
    fine = grow(qubit_tree(steps=2), [r.FixedRule(ZSET), r.FixedRule(ZSET)])
    trivial_first = grow(qubit_tree(steps=2), [r.FixedRule(r.TRIVIAL), r.FixedRule(ZSET)])
    assert r.is_coarse_graining_of(trivial_first, fine)[0]
    x_first = grow(qubit_tree(steps=2), [r.FixedRule(XSET), r.FixedRule(ZSET)])
    assert not r.is_coarse_graining_of(x_first, fine)[0]
    with pytest.raises(TreeError):
        r.is_coarse_graining_of(qubit_tree(steps=2), fine)
