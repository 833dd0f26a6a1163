"""Refinement-loop tests: pruning, enrichment, condensing, grouping, the
iteration loop, interruption/resume byte-identity, and whole-tree invariants.

Expected concrete values below were measured once on the frozen worlds and
pinned; the structural invariants are re-checked by independent validators in
validators.py that re-parse the serialized JSON with the stdlib.
"""

from __future__ import annotations

import copy
import json

import pytest
from hypothesis import given, settings, HealthCheck
from hypothesis import strategies as st

from domainscout.errors import (
    BudgetExceeded, ConfigMismatch, InvalidInput, NoOpError,
)
from domainscout.oracles import ORACLE_KINDS
from domainscout.search import (
    FINAL_TIE_TOLERANCE, Candidate, SearchReport, expand_node, group_if_needed,
    init_tree, maybe_enrich, prune_check, resume_search, run_search,
    search_is_complete, summarize_and_select,
)
from domainscout.types import (
    Config, Description, Relevance, SearchTree, deserialize_tree,
    serialize_tree,
)
from domainscout.universe import ClassSpec, UniverseSpec, build_universe, generate_universe_spec

from conftest import tiny_spec
from validators import duplicate_text_leaf_violations, relevance_path_violations


def small_cfg(**overrides) -> Config:
    fields = dict(run_seed=3, m_samples_per_node=16, n_final_samples=16,
                  max_depth=3, enrich_depth_limit=1, verbosity_threshold=20,
                  l_summaries=3, group_threshold=6, group_target=3,
                  generality_schedule=(1.0, 0.5, 0.0), no_improvement_patience=2,
                  lambda_=0.25)
    fields.update(overrides)
    return Config(**fields)


def noiseless_spec(**overrides) -> UniverseSpec:
    """One class {t01, t04}, zero sample noise: classification is a pure
    function of which tokens the decoder completes."""
    fields = dict(universe_seed=9, classes=(ClassSpec(0, ("t01", "t04")),),
                  vocab_size=8, dim=24, max_tokens=3,
                  sigma_min=0.0, sigma_max=0.0, accept_threshold=0.8)
    fields.update(overrides)
    return UniverseSpec(**fields)


def single_tokens(n: int = 8) -> list[Description]:
    return [Description(f"t0{i}") for i in range(n)]


# ---------------------------------------------------------------------------
# init_tree


def test_init_tree_one_root_per_distinct_text():
    cfg = small_cfg()
    tree = init_tree([Description("a"), Description("b"), Description("a")], cfg)
    roots = [n for n in tree.nodes.values() if n.is_root]
    assert [r.description.text for r in roots] == ["a", "b"]
    assert all(r.depth == 0 and r.status == "pending" for r in roots)
    assert tree.iteration == 0
    assert sorted(tree.frontier) == [r.id for r in roots]


def test_init_tree_rejects_empty():
    with pytest.raises(InvalidInput):
        init_tree([], small_cfg())


# ---------------------------------------------------------------------------
# expand_node


def test_expand_node_scores_and_charges_budget():
    cfg = small_cfg()
    suite = build_universe(noiseless_spec())
    tree = init_tree([Description("t01 t04")], cfg)
    before = dict(suite.call_budget.spent)
    est = expand_node(tree, 0, 0, cfg, suite)
    node = tree.node(0)
    assert node.status == "scored"
    assert node.relevance == est.relevance
    assert est.relevance.m == cfg.m_samples_per_node
    assert suite.call_budget.spent["decode"] - before["decode"] == cfg.m_samples_per_node
    assert suite.call_budget.spent["classify"] - before["classify"] == cfg.m_samples_per_node
    assert 0 not in tree.frontier


def test_expand_node_twice_is_a_noop_error():
    cfg = small_cfg()
    suite = build_universe(noiseless_spec())
    tree = init_tree([Description("t01 t04")], cfg)
    expand_node(tree, 0, 0, cfg, suite)
    with pytest.raises(NoOpError):
        expand_node(tree, 0, 0, cfg, suite)


def test_expand_node_default_generality_is_depth_schedule_entry():
    cfg = small_cfg()
    spec = tiny_spec()
    tree_a = init_tree([Description("t01")], cfg)
    tree_b = init_tree([Description("t01")], cfg)
    est_default = expand_node(tree_a, 0, 0, cfg, build_universe(spec))
    est_explicit = expand_node(tree_b, 0, 0, cfg, build_universe(spec),
                               generality_level=cfg.generality_for_iteration(0))
    assert est_default.relevance == est_explicit.relevance
    assert est_default.per_sample_labels == est_explicit.per_sample_labels


def test_expand_node_budget_failure_leaves_node_pending():
    cfg = small_cfg()
    suite = build_universe(noiseless_spec(), budgets={"classify": 10})
    tree = init_tree([Description("t03")], cfg)
    with pytest.raises(BudgetExceeded):
        expand_node(tree, 0, 0, cfg, suite)
    node = tree.node(0)
    assert node.status == "pending"
    assert node.relevance is None
    assert 0 in tree.frontier
    tree.validate()


# ---------------------------------------------------------------------------
# prune_check


def scored_pair(parent_rel: Relevance, child_rel: Relevance):
    cfg = small_cfg()
    tree = SearchTree(cfg)
    root = tree.add_root(Description("parent text"))
    tree.mark_scored(root.id, parent_rel)
    child = tree.add_child(root.id, Description("child text"),
                           status="scored", relevance=child_rel)
    return tree, child.id


def test_prune_keeps_strict_improvement():
    tree, cid = scored_pair(Relevance(2, 4), Relevance(3, 4))
    assert prune_check(tree, cid) is True
    assert tree.node(cid).status == "scored"


def test_prune_terminates_equal_nonperfect_across_denominators():
    # 1/2 == 2/4 must compare equal exactly, not approximately
    tree, cid = scored_pair(Relevance(2, 4), Relevance(1, 2))
    assert prune_check(tree, cid) is False
    assert tree.node(cid).status == "terminated"


def test_prune_saturates_equal_perfect():
    tree, cid = scored_pair(Relevance(4, 4), Relevance(8, 8))
    assert prune_check(tree, cid) is True
    assert tree.node(cid).status == "saturated"


def test_prune_terminates_strictly_worse():
    tree, cid = scored_pair(Relevance(3, 4), Relevance(2, 4))
    assert prune_check(tree, cid) is False
    assert tree.node(cid).status == "terminated"


def test_prune_root_is_invalid():
    cfg = small_cfg()
    tree = SearchTree(cfg)
    root = tree.add_root(Description("r"))
    tree.mark_scored(root.id, Relevance(1, 4))
    with pytest.raises(InvalidInput):
        prune_check(tree, root.id)


def test_prune_unscored_is_invalid():
    cfg = small_cfg()
    tree = SearchTree(cfg)
    root = tree.add_root(Description("r"))
    tree.mark_scored(root.id, Relevance(1, 4))
    child = tree.add_child(root.id, Description("c"))
    with pytest.raises(InvalidInput):
        prune_check(tree, child.id)


# ---------------------------------------------------------------------------
# enrichment


def test_enrich_gates_on_hits_and_depth():
    cfg = small_cfg(enrich_depth_limit=0)
    suite = build_universe(noiseless_spec())
    tree = SearchTree(cfg)
    hit_root = tree.add_root(Description("t01 t04"))
    tree.mark_scored(hit_root.id, Relevance(5, 16))
    assert maybe_enrich(tree, hit_root.id, 0, cfg, suite) == []

    miss_root = tree.add_root(Description("t06"))
    tree.mark_scored(miss_root.id, Relevance(0, 16))
    deep = tree.add_child(miss_root.id, Description("t06 t07"),
                          status="scored", relevance=Relevance(0, 16))
    assert maybe_enrich(tree, deep.id, 0, cfg, suite) == []


def test_enrich_unscored_is_invalid():
    cfg = small_cfg()
    suite = build_universe(noiseless_spec())
    tree = init_tree([Description("t03")], cfg)
    with pytest.raises(InvalidInput):
        maybe_enrich(tree, 0, 0, cfg, suite)


def test_enrich_rescues_dead_end_with_scoring_variants():
    # "t03" never classifies here (no 2-token superset of t03 reaches the
    # acceptance threshold), but its 3-token completions occasionally do.
    # Measured once and pinned: the only surviving one-token-superset variant
    # is "t01 t03" with k = 3 of 16.
    cfg = small_cfg(group_threshold=7)
    suite = build_universe(noiseless_spec())
    tree = init_tree([Description("t03")], cfg)
    est = expand_node(tree, 0, 0, cfg, suite)
    assert est.relevance == Relevance(0, 16)
    child_ids = maybe_enrich(tree, 0, 0, cfg, suite)
    children = [tree.node(c) for c in child_ids]
    assert [c.description.text for c in children] == ["t01 t03"]
    assert children[0].relevance == Relevance(3, 16)
    assert children[0].status == "scored"
    assert children[0].depth == 1
    # discarded zero-hit variants left no trace
    assert len(tree.nodes) == 2


def test_enrich_copies_existing_score_without_respending():
    cfg = small_cfg(group_threshold=7)
    suite = build_universe(noiseless_spec())
    tree = init_tree([Description("t01 t03"), Description("t03")], cfg)
    owner_est = expand_node(tree, 0, 0, cfg, suite)
    assert owner_est.relevance.k >= 1
    expand_node(tree, 1, 0, cfg, suite)
    before = suite.call_budget.spent["decode"]
    child_ids = maybe_enrich(tree, 1, 0, cfg, suite)
    spent = suite.call_budget.spent["decode"] - before
    # 7 variants, one of which ("t01 t03") is already owned: 6 get probed
    assert spent == 6 * cfg.m_samples_per_node
    copies = [tree.node(c) for c in child_ids
              if tree.node(c).description.text == "t01 t03"]
    assert len(copies) == 1
    assert copies[0].relevance == tree.node(0).relevance


# ---------------------------------------------------------------------------
# summarize_and_select / group_if_needed


def test_summarize_short_text_passes_through_for_free():
    cfg = small_cfg(verbosity_threshold=2)
    suite = build_universe(noiseless_spec())
    before = dict(suite.call_budget.spent)
    desc = Description("t01 t04")
    out = summarize_and_select(desc, 0, cfg, suite)
    assert out.text == "t01 t04"
    assert suite.call_budget.spent == before


def test_summarize_verbose_text_picks_highest_hit_fewest_words():
    cfg = small_cfg(verbosity_threshold=2)
    suite = build_universe(noiseless_spec(accept_threshold=0.65))
    out = summarize_and_select(Description("t01 t04 t07"), 0, cfg, suite)
    assert out.text == "t01 t04"


def test_group_passthrough_below_threshold():
    cfg = small_cfg(group_threshold=3)
    suite = build_universe(noiseless_spec())
    batch = [Description("t01 t02"), Description("t01 t03"), Description("t01 t04")]
    assert group_if_needed(batch, cfg, suite) == batch


def test_group_collapses_oversized_batch():
    cfg = small_cfg(group_threshold=3, group_target=2)
    suite = build_universe(noiseless_spec())
    batch = [Description("t01 t02"), Description("t01 t03"),
             Description("t01 t04"), Description("t01 t05")]
    out = group_if_needed(batch, cfg, suite)
    assert out == list(suite.grouper.group(batch, cfg.group_target))
    assert len(out) <= cfg.group_target


# ---------------------------------------------------------------------------
# whole searches on the tiny two-class world


REF_SPEC = tiny_spec()
REF_BEST = "t01 t03 t05"          # measured once on this world and pinned
REF_VALUE = 0.750339384675        # ±1e-9
REF_ITERATIONS = 3
REF_NODES = 35


def run_reference(budgets=None, pause=None):
    cfg = small_cfg()
    suite = build_universe(REF_SPEC, budgets=budgets)
    return run_search(single_tokens(), 0, cfg, suite, pause_after_iteration=pause)


def test_search_completes_and_reports_consistently():
    report = run_reference()
    assert report.partial is False
    assert report.best_description.text == REF_BEST
    assert report.best_objective.value == pytest.approx(REF_VALUE, abs=1e-9)
    assert report.iterations_run == REF_ITERATIONS == report.tree.iteration
    assert len(report.tree.nodes) == REF_NODES
    assert search_is_complete(report.tree)
    report.tree.validate()

    # candidates: one per surviving node, sorted by value then node id
    assert report.best_objective == report.candidates[0].objective
    keys = [(-c.objective.value, c.node_id) for c in report.candidates]
    assert keys == sorted(keys)
    surviving = {nid for nid, n in report.tree.nodes.items()
                 if n.status in ("scored", "saturated")}
    assert {c.node_id for c in report.candidates} == surviving

    # same text, same objective — values are per-text, not per-node
    by_text = {}
    for c in report.candidates:
        by_text.setdefault(c.description.text, c.objective)
        assert c.objective == by_text[c.description.text]

    # budget accounting covers every oracle kind and only known kinds
    assert set(report.budget_spent) == set(ORACLE_KINDS)
    assert report.budget_spent["decode"] > 0
    assert report.budget_spent["classify"] > 0
    assert all(v >= 0 for v in report.budget_spent.values())

    # report serializes to plain JSON
    doc = json.loads(json.dumps(report.to_dict()))
    assert doc["best_description"] == REF_BEST
    assert doc["config_digest"] == small_cfg().digest()


def test_search_is_deterministic_to_the_byte():
    a = run_reference()
    b = run_reference()
    assert serialize_tree(a.tree) == serialize_tree(b.tree)
    assert a.to_dict() == b.to_dict()


def test_search_tree_passes_independent_validators():
    report = run_reference()
    blob = serialize_tree(report.tree)
    assert relevance_path_violations(blob) == []
    assert duplicate_text_leaf_violations(blob) == []


def test_duplicate_text_nodes_are_scored_leaves():
    report = run_reference()
    first_scored: dict[str, int] = {}
    duplicates = 0
    for nid in sorted(report.tree.nodes):
        node = report.tree.nodes[nid]
        if node.relevance is None:
            continue
        text = node.description.text
        if text in first_scored:
            duplicates += 1
            owner = report.tree.nodes[first_scored[text]]
            assert node.child_ids == []
            assert node.relevance == owner.relevance
        else:
            first_scored[text] = nid
    assert duplicates > 0  # the world actually exercises the copy path


def test_max_depth_one_runs_exactly_one_iteration():
    cfg = small_cfg(max_depth=1)
    report = run_search(single_tokens(), 0, cfg, build_universe(REF_SPEC))
    assert report.partial is False
    assert report.iterations_run == 1
    assert report.tree.iteration == 1
    # only depth-0 nodes were expanded; deeper nodes exist solely as pending
    # children or as scored enrichment variants attached during iteration 0
    assert all(n.depth <= 2 for n in report.tree.nodes.values())
    assert all(n.status == "pending" for n in report.tree.nodes.values()
               if n.depth == 2)


def test_empty_frontier_stops_before_max_depth():
    # lone background root: no children can ever classify, so after the
    # enrichment attempt at iteration 0 nothing is pending
    cfg = small_cfg(group_threshold=7)
    suite = build_universe(noiseless_spec(max_tokens=2))
    report = run_search([Description("t03")], 0, cfg, suite)
    assert report.partial is False
    assert report.iterations_run == 1
    assert not report.tree.frontier
    assert len(report.candidates) == 1          # the scored zero-hit root
    assert report.best_description.text == "t03"
    assert report.best_objective.relevance == 0.0


# ---------------------------------------------------------------------------
# patience


def relevance_chain(rels, cfg, pending_tail=True):
    tree = SearchTree(cfg)
    root = tree.add_root(Description("d0"))
    tree.mark_scored(root.id, rels[0])
    pid = root.id
    for i, rel in enumerate(rels[1:], start=1):
        node = tree.add_child(pid, Description(f"d{i}"), status="scored",
                              relevance=rel)
        pid = node.id
    if pending_tail:
        tree.add_child(pid, Description(f"d{len(rels)}"), status="pending")
    tree.iteration = len(rels)
    tree.validate()
    return tree


def test_patience_stops_after_two_stalled_iterations():
    cfg = small_cfg(max_depth=6)
    stalled = relevance_chain([Relevance(8, 16), Relevance(8, 16), Relevance(8, 16)], cfg)
    assert search_is_complete(stalled)


def test_patience_counts_exact_fraction_equality_as_stall():
    cfg = small_cfg(max_depth=6)
    stalled = relevance_chain([Relevance(2, 4), Relevance(8, 16), Relevance(4, 8)], cfg)
    assert search_is_complete(stalled)


def test_single_stall_is_within_patience():
    cfg = small_cfg(max_depth=6)
    tree = relevance_chain([Relevance(8, 16), Relevance(12, 16), Relevance(12, 16)], cfg)
    assert not search_is_complete(tree)


def test_improving_chain_keeps_searching():
    cfg = small_cfg(max_depth=6)
    tree = relevance_chain([Relevance(8, 16), Relevance(12, 16), Relevance(14, 16)], cfg)
    assert not search_is_complete(tree)


def test_patience_stop_still_produces_full_report():
    cfg = small_cfg(max_depth=6)
    tree = relevance_chain([Relevance(8, 16), Relevance(8, 16), Relevance(8, 16)], cfg)
    report = resume_search(tree, cfg, build_universe(noiseless_spec()), 0)
    assert report.partial is False
    assert report.best_description is not None
    # the pending tail was never expanded
    assert any(n.status == "pending" for n in report.tree.nodes.values())


# ---------------------------------------------------------------------------
# interruption and resume


def test_budget_exhaustion_mid_iteration_is_partial_and_resumable():
    interrupted = run_reference(budgets={"classify": 200})
    assert interrupted.partial is True
    assert interrupted.best_description is None
    assert interrupted.best_objective is None
    assert interrupted.candidates == ()
    assert interrupted.tree.iteration == 0      # died inside iteration 0
    interrupted.tree.validate()                 # rolled back to a node boundary
    assert not search_is_complete(interrupted.tree)

    blob = serialize_tree(interrupted.tree)
    resumed = resume_search(deserialize_tree(blob), small_cfg(),
                            build_universe(REF_SPEC), 0)
    assert resumed.partial is False
    assert serialize_tree(resumed.tree) == serialize_tree(run_reference().tree)
    assert resumed.best_description.text == REF_BEST


def test_budget_exhaustion_during_final_selection_is_partial():
    # 400 classifications cover the whole loop but not the final evaluation
    interrupted = run_reference(budgets={"classify": 400})
    assert interrupted.partial is True
    assert interrupted.tree.iteration == REF_ITERATIONS
    assert search_is_complete(interrupted.tree)
    resumed = resume_search(deserialize_tree(serialize_tree(interrupted.tree)),
                            small_cfg(), build_universe(REF_SPEC), 0)
    assert resumed.partial is False
    assert serialize_tree(resumed.tree) == serialize_tree(run_reference().tree)


def test_pause_at_iteration_boundary_then_resume_matches():
    paused = run_reference(pause=1)
    assert paused.partial is True
    assert paused.tree.iteration == 1
    paused.tree.validate()
    resumed = resume_search(deserialize_tree(serialize_tree(paused.tree)),
                            small_cfg(), build_universe(REF_SPEC), 0)
    assert resumed.partial is False
    assert serialize_tree(resumed.tree) == serialize_tree(run_reference().tree)
    assert resumed.best_description.text == REF_BEST


def test_resume_completed_tree_only_rereports():
    done = run_reference()
    blob = serialize_tree(done.tree)
    again = resume_search(deserialize_tree(blob), small_cfg(),
                          build_universe(REF_SPEC), 0)
    assert again.partial is False
    assert serialize_tree(again.tree) == blob
    assert again.best_description == done.best_description
    assert again.candidates == done.candidates


def test_resume_rejects_config_mismatch():
    done = run_reference()
    other = small_cfg(lambda_=0.5)
    with pytest.raises(ConfigMismatch):
        resume_search(deserialize_tree(serialize_tree(done.tree)), other,
                      build_universe(REF_SPEC), 0)


# ---------------------------------------------------------------------------
# final tie handling


def test_final_ties_are_grouped_to_one_representative():
    # zero noise and no penalty weight: many perfect candidates tie at 1.0;
    # the winner must come out of the grouping step, deterministically
    cfg = small_cfg(lambda_=0.0)
    suite = build_universe(noiseless_spec(accept_threshold=0.65))
    report = run_search(single_tokens(), 0, cfg, suite)
    assert report.partial is False
    assert report.best_objective.value == pytest.approx(1.0, abs=1e-12)
    tied = [c for c in report.candidates
            if report.best_objective.value - c.objective.value <= FINAL_TIE_TOLERANCE]
    assert len({c.description.text for c in tied}) > 1
    # measured once and pinned: grouping elects this representative, which is
    # not simply the top-ranked candidate's text
    assert report.candidates[0].description.text == "t00 t01 t04"
    assert report.best_description.text == "t01 t04 t07"
    # the elected text is itself a perfect-relevance candidate
    winners = {c.description.text for c in tied}
    assert report.best_description.text in winners


def test_winner_without_ties_is_the_top_candidate():
    report = run_reference()
    tied = [c for c in report.candidates
            if report.best_objective.value - c.objective.value <= FINAL_TIE_TOLERANCE]
    texts = {c.description.text for c in tied}
    if len(texts) == 1:
        assert report.best_description == report.candidates[0].description
    else:
        # the reference world does tie (duplicate texts), but every tied
        # candidate shares one text, so grouping cannot change the winner
        assert texts == {report.best_description.text}


# ---------------------------------------------------------------------------
# randomized whole-search invariants


@settings(max_examples=8, deadline=None,
          suppress_health_check=[HealthCheck.too_slow])
@given(universe_seed=st.integers(min_value=0, max_value=10_000),
       run_seed=st.integers(min_value=0, max_value=10_000),
       target=st.integers(min_value=0, max_value=1))
def test_random_worlds_keep_tree_invariants(universe_seed, run_seed, target):
    spec = generate_universe_spec(universe_seed, n_classes=2, tokens_per_class=2,
                                  vocab_size=8, dim=16, max_tokens=3,
                                  sigma_min=0.05, sigma_max=0.35,
                                  accept_threshold=0.65)
    cfg = small_cfg(run_seed=run_seed, m_samples_per_node=8, n_final_samples=8,
                    max_depth=2, generality_schedule=(1.0, 0.0))
    initial = [Description(f"t0{i}") for i in range(4)]
    report = run_search(initial, target, cfg, build_universe(spec))
    report.tree.validate()
    blob = serialize_tree(report.tree)
    assert relevance_path_violations(blob) == []
    assert duplicate_text_leaf_violations(blob) == []
    keys = [(-c.objective.value, c.node_id) for c in report.candidates]
    assert keys == sorted(keys)
    if report.candidates:
        assert report.best_objective == report.candidates[0].objective
    # byte-for-byte reproducible
    second = run_search(initial, target, cfg, build_universe(spec))
    assert serialize_tree(second.tree) == blob
    assert second.to_dict() == report.to_dict()
