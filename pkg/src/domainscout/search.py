"""Breadth-first description refinement.

One iteration scores every pending node at the current depth (m decoded
samples each), prunes children that fail to beat their parent, enriches
shallow dead ends with extra attributes, extracts captions from correctly
classified samples, condenses verbose captions, and groups oversized child
batches. The loop stops at the depth cap, on an empty frontier, or after a
configured number of iterations without a strict best-relevance improvement.

Determinism contract: every oracle call is keyed by (run_seed, canonical
description text, sample index, purpose). Nothing depends on wall clock,
iteration counters, or node ids, so an interrupted run resumed from its
serialized tree converges to byte-identical final state.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import (
    BudgetExceeded, ConfigMismatch, InvalidInput, NoOpError,
)
from .objective import (
    ObjectiveValue, RelevanceEstimate, estimate_relevance, objective_value,
)
from .oracles import ORACLE_KINDS, OracleSuite
from .types import (
    ClassLabel, Config, Description, Purpose, Relevance, SearchTree,
    seed_stream, text_key,
)

logger = logging.getLogger("domainscout.search")

FINAL_TIE_TOLERANCE = 1e-9


# ---------------------------------------------------------------------------
# Report


@dataclass(frozen=True)
class Candidate:
    node_id: int
    description: Description
    objective: ObjectiveValue

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "description": self.description.text,
            "objective": self.objective.to_dict(),
        }


@dataclass(frozen=True)
class SearchReport:
    best_description: Optional[Description]
    best_objective: Optional[ObjectiveValue]
    tree: SearchTree
    iterations_run: int
    budget_spent: dict[str, int]
    candidates: tuple[Candidate, ...]
    partial: bool = False

    def to_dict(self) -> dict:
        return {
            "best_description": None if self.best_description is None else self.best_description.text,
            "best_objective": None if self.best_objective is None else self.best_objective.to_dict(),
            "iterations_run": self.iterations_run,
            "budget_spent": dict(self.budget_spent),
            "candidates": [c.to_dict() for c in self.candidates],
            "partial": self.partial,
            "config_digest": self.tree.config.digest(),
        }


# ---------------------------------------------------------------------------
# Individual steps


def init_tree(initial_descriptions: Sequence[Description], cfg: Config) -> SearchTree:
    """One pending depth-0 root per distinct initial description. The forest
    hangs under an implicit super-root that is never materialized or scored."""
    if not initial_descriptions:
        raise InvalidInput("need at least one initial description")
    tree = SearchTree(cfg)
    seen: set[str] = set()
    for desc in initial_descriptions:
        if desc.text not in seen:
            seen.add(desc.text)
            tree.add_root(desc)
    return tree


def _node_probe_seeds(cfg: Config, description: Description) -> list[int]:
    return seed_stream(cfg.run_seed, text_key(description.text),
                       cfg.m_samples_per_node, Purpose.RELEVANCE)


def expand_node(tree: SearchTree, node_id: int, target_class: ClassLabel,
                cfg: Config, suite: OracleSuite,
                generality_level: Optional[float] = None) -> RelevanceEstimate:
    """Score a pending node with m decoded samples.

    The generality level defaults to the schedule entry for the node's depth,
    which is the iteration that expands it. On a budget failure nothing is
    recorded: the node stays pending and the tree remains valid for resume.
    """
    node = tree.node(node_id)
    if node.status != "pending":
        raise NoOpError(f"node {node_id} already has status {node.status!r}")
    g = cfg.generality_for_iteration(node.depth) if generality_level is None else generality_level
    est = estimate_relevance(node.description, target_class, cfg.m_samples_per_node,
                             g, suite, _node_probe_seeds(cfg, node.description))
    tree.mark_scored(node_id, est.relevance)
    return est


def prune_check(tree: SearchTree, node_id: int) -> bool:
    """Keep a scored child only if it strictly beats its parent.

    A child that merely equals its parent is terminated — with one carve-out:
    when both are perfect, the child is marked saturated. Saturated nodes are
    never expanded further but stay eligible for final selection.
    """
    node = tree.node(node_id)
    if node.relevance is None:
        raise InvalidInput(f"node {node_id} is not scored yet")
    if node.is_root:
        raise InvalidInput("roots are never pruned")
    parent = tree.node(node.parent_id)
    if parent.relevance is None:
        raise InvalidInput(f"parent of node {node_id} is not scored")
    if node.relevance.exceeds(parent.relevance):
        return True
    if node.relevance.equals(parent.relevance) and node.relevance.is_perfect:
        node.status = "saturated"
        return True
    node.status = "terminated"
    return False


def _enrich_scored(tree: SearchTree, node_id: int, target_class: ClassLabel,
                   cfg: Config, suite: OracleSuite,
                   generality_level: float) -> list[tuple[int, Optional[RelevanceEstimate]]]:
    """Attach enrichment variants that classify at least once as scored
    children. Returns (child_id, estimate) pairs; the estimate is None when
    the variant's score was copied from an existing node with the same text."""
    node = tree.node(node_id)
    variants = suite.enricher.enrich(node.description, cfg.group_threshold)
    out: list[tuple[int, Optional[RelevanceEstimate]]] = []
    seen = {node.description.text}
    for variant in variants:
        if variant.text in seen:
            continue
        seen.add(variant.text)
        owner = tree.text_owner(variant.text)
        if owner is not None:
            if owner.relevance.k >= 1:
                child = tree.add_child(node_id, variant, status="scored",
                                       relevance=owner.relevance)
                out.append((child.id, None))
            continue
        est = estimate_relevance(variant, target_class, cfg.m_samples_per_node,
                                 generality_level, suite, _node_probe_seeds(cfg, variant))
        if est.k >= 1:
            child = tree.add_child(node_id, variant, status="scored",
                                   relevance=est.relevance)
            out.append((child.id, est))
        else:
            logger.debug("enrichment variant %r of node %d discarded (k=0)",
                         variant.text, node_id)
    return out


def maybe_enrich(tree: SearchTree, node_id: int, target_class: ClassLabel,
                 cfg: Config, suite: OracleSuite,
                 generality_level: Optional[float] = None) -> list[int]:
    """Enrich a scored dead end (k = 0) at shallow depth; no-op otherwise."""
    node = tree.node(node_id)
    if node.relevance is None:
        raise InvalidInput(f"node {node_id} is not scored yet")
    if node.relevance.k != 0 or node.depth > cfg.enrich_depth_limit:
        return []
    g = cfg.generality_for_iteration(node.depth) if generality_level is None else generality_level
    return [child_id for child_id, _ in
            _enrich_scored(tree, node_id, target_class, cfg, suite, g)]


def extract_child_descriptions(correct_samples: Sequence, suite: OracleSuite) -> list[Description]:
    """Caption every correctly classified sample; deduplicate by canonical
    text, keeping first occurrences in sample order."""
    captions: list[Description] = []
    seen: set[str] = set()
    for sample in correct_samples:
        cap = suite.image_encoder.caption(sample)
        if cap.text not in seen:
            seen.add(cap.text)
            captions.append(cap)
    return captions


def summarize_and_select(description: Description, target_class: ClassLabel,
                         cfg: Config, suite: OracleSuite,
                         generality_level: Optional[float] = None) -> Description:
    """Condense a verbose description.

    Below the verbosity threshold the input passes through untouched.
    Otherwise the summarizer proposes variants, each (and the original) is
    probed with m samples, and the highest-relevance text wins; ties prefer
    fewer words, then lexicographically smaller text.
    """
    if description.word_count <= cfg.verbosity_threshold:
        return description
    g = cfg.final_generality if generality_level is None else generality_level
    variants = suite.summarizer.summarize(description, cfg.l_summaries,
                                          cfg.verbosity_threshold)
    pool = [description]
    seen = {description.text}
    for v in variants:
        if v.text not in seen:
            seen.add(v.text)
            pool.append(v)
    best: Optional[tuple[int, int, str]] = None
    best_desc = description
    for cand in pool:
        est = estimate_relevance(cand, target_class, cfg.m_samples_per_node,
                                 g, suite, _node_probe_seeds(cfg, cand))
        rank = (-est.k, cand.word_count, cand.text)
        if best is None or rank < best:
            best, best_desc = rank, cand
    return best_desc


def group_if_needed(descriptions: Sequence[Description], cfg: Config,
                    suite: OracleSuite) -> list[Description]:
    """Collapse an oversized batch of descriptions to a few representatives."""
    batch = list(descriptions)
    if len(batch) > cfg.group_threshold:
        return list(suite.grouper.group(batch, cfg.group_target))
    return batch


# ---------------------------------------------------------------------------
# The iteration loop


def _spawn_children(tree: SearchTree, parent_id: int, correct_samples: Sequence,
                    target_class: ClassLabel, cfg: Config, suite: OracleSuite,
                    generality_level: float) -> None:
    """Caption -> condense -> group -> attach pending children.

    Children are attached even when their text duplicates an ancestor's;
    the duplicate is detected at expansion time and short-circuited to the
    existing node's score, so no budget is re-spent on it.
    """
    if not correct_samples:
        return
    captions = extract_child_descriptions(correct_samples, suite)
    refined: list[Description] = []
    seen: set[str] = set()
    for cap in captions:
        condensed = summarize_and_select(cap, target_class, cfg, suite,
                                         generality_level=generality_level)
        if condensed.text not in seen:
            seen.add(condensed.text)
            refined.append(condensed)
    for child in group_if_needed(refined, cfg, suite):
        if child.text in {tree.node(cid).description.text
                          for cid in tree.node(parent_id).child_ids}:
            continue
        tree.add_child(parent_id, child, status="pending")


def _process_pending(tree: SearchTree, node_id: int, target_class: ClassLabel,
                     cfg: Config, suite: OracleSuite, generality_level: float) -> None:
    """Full handling of one pending node within its iteration."""
    node = tree.node(node_id)
    owner = tree.text_owner(node.description.text)
    if owner is not None:
        # same text already scored elsewhere: copy the score, spend nothing,
        # and keep the node as a leaf — its would-be subtree already exists
        # under the owning node
        tree.mark_scored(node_id, owner.relevance)
        if not node.is_root:
            prune_check(tree, node_id)
        return
    est = expand_node(tree, node_id, target_class, cfg, suite,
                      generality_level=generality_level)
    if not node.is_root:
        if not prune_check(tree, node_id):
            return
        if node.status == "saturated":
            return
    if est.k == 0:
        if node.depth <= cfg.enrich_depth_limit:
            for child_id, child_est in _enrich_scored(tree, node_id, target_class,
                                                      cfg, suite, generality_level):
                if child_est is not None:
                    _spawn_children(tree, child_id, child_est.correct_samples,
                                    target_class, cfg, suite, generality_level)
        return
    _spawn_children(tree, node_id, est.correct_samples, target_class, cfg,
                    suite, generality_level)


def _best_relevance_by_depth(tree: SearchTree) -> dict[int, Relevance]:
    best: dict[int, Relevance] = {}
    for node in tree.nodes.values():
        if node.relevance is not None:
            cur = best.get(node.depth)
            if cur is None or node.relevance.exceeds(cur):
                best[node.depth] = node.relevance
    return best


def _patience_exhausted(tree: SearchTree, cfg: Config) -> bool:
    """True when the last `no_improvement_patience` completed iterations all
    failed to strictly improve the best recorded relevance.

    Iteration t is credited with the nodes at depth t, so the streak is a
    pure function of the persisted tree and survives resume.
    """
    completed = tree.iteration
    if completed == 0:
        return False
    best_at = _best_relevance_by_depth(tree)
    streak = 0
    for depth in range(completed - 1, -1, -1):
        rel = best_at.get(depth)
        prior: Optional[Relevance] = None
        for shallower in range(depth):
            p = best_at.get(shallower)
            if p is not None and (prior is None or p.exceeds(prior)):
                prior = p
        improved = rel is not None and (prior is None or rel.exceeds(prior))
        if improved:
            break
        streak += 1
    return streak >= cfg.no_improvement_patience


def search_is_complete(tree: SearchTree) -> bool:
    """Would another iteration run? Derived entirely from the tree."""
    cfg = tree.config
    return (tree.iteration >= cfg.max_depth or not tree.frontier
            or _patience_exhausted(tree, cfg))


def _budget_delta(before: dict[str, int], after: dict[str, int]) -> dict[str, int]:
    return {kind: after.get(kind, 0) - before.get(kind, 0) for kind in ORACLE_KINDS}


def _partial_report(tree: SearchTree, spent_before: dict[str, int],
                    suite: OracleSuite) -> SearchReport:
    return SearchReport(
        best_description=None, best_objective=None, tree=tree,
        iterations_run=tree.iteration,
        budget_spent=_budget_delta(spent_before, suite.call_budget.snapshot()),
        candidates=(), partial=True,
    )


def _finalize(tree: SearchTree, target_class: ClassLabel, cfg: Config,
              suite: OracleSuite, spent_before: dict[str, int]) -> SearchReport:
    nodes = [tree.nodes[nid] for nid in sorted(tree.nodes)
             if tree.nodes[nid].status in ("scored", "saturated")]
    if not nodes:
        return _partial_report(tree, spent_before, suite)
    value_by_text: dict[str, ObjectiveValue] = {}
    for node in nodes:
        txt = node.description.text
        if txt not in value_by_text:
            value_by_text[txt] = objective_value(node.description, target_class,
                                                 cfg, suite)
    candidates = tuple(sorted(
        (Candidate(node_id=n.id, description=n.description,
                   objective=value_by_text[n.description.text]) for n in nodes),
        key=lambda c: (-c.objective.value, c.node_id),
    ))
    top = candidates[0]
    tied_texts: list[str] = []
    for cand in candidates:
        if top.objective.value - cand.objective.value <= FINAL_TIE_TOLERANCE \
                and cand.description.text not in tied_texts:
            tied_texts.append(cand.description.text)
    best_description = top.description
    if len(tied_texts) > 1:
        reps = suite.grouper.group([Description(t) for t in tied_texts],
                                   cfg.group_target)
        if reps:
            best_description = summarize_and_select(reps[0], target_class, cfg, suite)
    return SearchReport(
        best_description=best_description, best_objective=top.objective,
        tree=tree, iterations_run=tree.iteration,
        budget_spent=_budget_delta(spent_before, suite.call_budget.snapshot()),
        candidates=candidates, partial=False,
    )


def _run_loop(tree: SearchTree, target_class: ClassLabel, cfg: Config,
              suite: OracleSuite,
              pause_after_iteration: Optional[int] = None) -> SearchReport:
    spent_before = suite.call_budget.snapshot()
    while True:
        t = tree.iteration
        if t >= cfg.max_depth or not tree.frontier or _patience_exhausted(tree, cfg):
            break
        g = cfg.generality_for_iteration(t)
        for node_id in sorted(tree.pending_at_depth(t)):
            # processing a node is transactional: on budget exhaustion the
            # iteration's partial work on this node is rolled back, leaving
            # the node pending and the tree consistent for resume
            snapshot = copy.deepcopy(tree)
            try:
                _process_pending(tree, node_id, target_class, cfg, suite, g)
            except BudgetExceeded:
                return _partial_report(snapshot, spent_before, suite)
        tree.iteration = t + 1
        if pause_after_iteration is not None and tree.iteration >= pause_after_iteration:
            return _partial_report(tree, spent_before, suite)
    try:
        return _finalize(tree, target_class, cfg, suite, spent_before)
    except BudgetExceeded:
        return _partial_report(tree, spent_before, suite)


def run_search(initial: Sequence[Description], target_class: ClassLabel,
               cfg: Config, suite: OracleSuite,
               pause_after_iteration: Optional[int] = None) -> SearchReport:
    """Search from scratch. `pause_after_iteration` stops cleanly at that
    iteration boundary with a partial report whose tree can be resumed."""
    tree = init_tree(initial, cfg)
    return _run_loop(tree, target_class, cfg, suite,
                     pause_after_iteration=pause_after_iteration)


def resume_search(tree: SearchTree, cfg: Config, suite: OracleSuite,
                  target_class: ClassLabel,
                  pause_after_iteration: Optional[int] = None) -> SearchReport:
    """Continue a persisted search. The tree's embedded config must match the
    one supplied; a completed tree is not expanded, only re-reported."""
    if tree.config.digest() != cfg.digest():
        raise ConfigMismatch(
            f"tree was built with config {tree.config.digest()}, got {cfg.digest()}")
    return _run_loop(tree, target_class, cfg, suite,
                     pause_after_iteration=pause_after_iteration)
