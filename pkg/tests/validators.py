"""Independent validators that work on serialized tree JSON directly.

These deliberately avoid the engine's own tree classes: they re-parse the
file with the stdlib and check invariants with exact Fraction arithmetic, so
a bug in the engine's serialization or comparison code cannot hide itself.
"""

from __future__ import annotations

import json
from fractions import Fraction


def relevance_path_violations(tree_text: str) -> list[str]:
    """Check: along surviving edges, child relevance strictly exceeds the
    parent's, except saturated children which may equal a perfect parent.

    Returns human-readable violation strings (empty = invariant holds).
    """
    doc = json.loads(tree_text)
    nodes = {n["id"]: n for n in doc["nodes"]}
    problems: list[str] = []
    for node in doc["nodes"]:
        if node["parent_id"] is None:
            continue
        if node["status"] in ("pending", "terminated"):
            continue  # not scored yet / pruned off every surviving path
        if node["relevance"] is None:
            problems.append(f"node {node['id']}: status {node['status']} without relevance")
            continue
        parent = nodes.get(node["parent_id"])
        if parent is None:
            problems.append(f"node {node['id']}: parent {node['parent_id']} missing")
            continue
        if parent["relevance"] is None:
            problems.append(f"node {node['id']}: surviving child of unscored parent")
            continue
        child_rel = Fraction(node["relevance"]["k"], node["relevance"]["m"])
        parent_rel = Fraction(parent["relevance"]["k"], parent["relevance"]["m"])
        if node["status"] == "saturated":
            if not (child_rel == 1 and parent_rel == 1):
                problems.append(
                    f"node {node['id']}: saturated but relevances are "
                    f"{child_rel} under {parent_rel} (both must be 1)")
        elif not child_rel > parent_rel:
            problems.append(
                f"node {node['id']}: surviving child relevance {child_rel} "
                f"does not exceed parent's {parent_rel}")
    return problems


def duplicate_text_leaf_violations(tree_text: str) -> list[str]:
    """Check: a node whose text already belongs to a lower-id relevance-bearing
    node never grows children of its own."""
    doc = json.loads(tree_text)
    problems: list[str] = []
    first_scored: dict[str, int] = {}
    for node in sorted(doc["nodes"], key=lambda n: n["id"]):
        text = node["description"]
        if text in first_scored and node["relevance"] is not None:
            if node["child_ids"]:
                problems.append(
                    f"node {node['id']}: duplicate of node {first_scored[text]} "
                    f"but has children {node['child_ids']}")
        if node["relevance"] is not None and text not in first_scored:
            first_scored[text] = node["id"]
    return problems
