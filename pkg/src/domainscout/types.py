"""Core value types: descriptions, embeddings, samples, search trees, config.

Everything here is deterministic and serialization-friendly. The canonical
JSON writer below is the single code path used for tree files and config
digests, so byte-equality of two serialized trees is equivalent to structural
equality of the trees.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInput, TreeParseError

U64 = 2**64

# A class label is a plain non-negative int: the index of one of the target
# model's output classes (synthetic targets reserve the highest index for
# the background / reject label).
ClassLabel = int

NODE_STATUSES = ("pending", "scored", "terminated", "saturated")


def canonicalize_text(text: str) -> str:
    """Trim, collapse internal whitespace and lowercase."""
    return " ".join(text.split()).lower()


@dataclass(frozen=True)
class Description:
    """A textual description of image content, stored in canonical form."""

    text: str

    def __post_init__(self):
        if not isinstance(self.text, str):
            raise InvalidInput(f"description text must be str, got {type(self.text).__name__}")
        canonical = canonicalize_text(self.text)
        if not canonical:
            raise InvalidInput("description must be non-empty after canonicalization")
        object.__setattr__(self, "text", canonical)

    @property
    def words(self) -> list[str]:
        return self.text.split()

    @property
    def word_count(self) -> int:
        return len(self.text.split())

    def __str__(self) -> str:
        return self.text


class Embedding:
    """A unit-normalized float64 vector.

    Normalization happens on construction; a zero or non-finite vector is
    rejected rather than silently propagated.
    """

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidInput("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise InvalidInput("embedding contains non-finite values")
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise InvalidInput("embedding has zero norm")
        arr = arr / norm
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return int(self._values.shape[0])

    def cosine(self, other: "Embedding") -> float:
        """Cosine similarity with another embedding (both unit vectors)."""
        if other.dim != self.dim:
            raise InvalidInput(f"dimension mismatch: {self.dim} vs {other.dim}")
        return float(np.clip(np.dot(self._values, other._values), -1.0, 1.0))

    def __repr__(self) -> str:
        return f"Embedding(dim={self.dim})"


@dataclass(frozen=True)
class Sample:
    """One decoded sample: an opaque payload plus its provenance."""

    payload: bytes
    seed: int
    source: Description

    def __post_init__(self):
        if not isinstance(self.payload, (bytes, bytearray)) or len(self.payload) == 0:
            raise InvalidInput("sample payload must be non-empty bytes")
        object.__setattr__(self, "payload", bytes(self.payload))
        _check_u64(self.seed, "sample seed")


@dataclass(frozen=True)
class Relevance:
    """Exact acceptance count for a description: k of m samples classified
    into the target class. Comparisons use integer cross-multiplication so
    they are exact."""

    k: int
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise InvalidInput("relevance m must be >= 1")
        if not 0 <= self.k <= self.m:
            raise InvalidInput("relevance k must satisfy 0 <= k <= m")

    @property
    def value(self) -> float:
        return self.k / self.m

    def exceeds(self, other: "Relevance") -> bool:
        return self.k * other.m > other.k * self.m

    def equals(self, other: "Relevance") -> bool:
        return self.k * other.m == other.k * self.m

    @property
    def is_perfect(self) -> bool:
        return self.k == self.m


# ---------------------------------------------------------------------------
# Seed derivation


class Purpose(str, Enum):
    """Tags separating the deterministic seed streams used for different
    kinds of sampling, so e.g. relevance and generality estimation for the
    same description never share a seed."""

    RELEVANCE = "relevance"
    GENERALITY = "generality"
    FINAL_RELEVANCE = "final-relevance"
    FINAL_GENERALITY = "final-generality"
    CLONE_TRAIN = "clone-train"
    CLONE_HELDOUT = "clone-heldout"


def _check_u64(value: int, name: str) -> None:
    if not isinstance(value, int) or isinstance(value, bool):
        raise InvalidInput(f"{name} must be an int")
    if not 0 <= value < U64:
        raise InvalidInput(f"{name} must be in [0, 2^64)")


def derive_seed(run_seed: int, key: int, sample_index: int, purpose: Purpose) -> int:
    """Derive a 64-bit sample seed from (run seed, stream key, index, purpose).

    Pure and stable: the triple fully determines the output, distinct
    purposes yield disjoint streams, and nothing about process state leaks in.
    """
    _check_u64(run_seed, "run_seed")
    _check_u64(key, "key")
    _check_u64(sample_index, "sample_index")
    if not isinstance(purpose, Purpose):
        raise InvalidInput("purpose must be a Purpose")
    h = hashlib.sha256()
    h.update(b"domainscout-seed-v1|")
    h.update(run_seed.to_bytes(8, "big"))
    h.update(key.to_bytes(8, "big"))
    h.update(sample_index.to_bytes(8, "big"))
    h.update(purpose.value.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


def text_key(text: str) -> int:
    """64-bit stream key for a description text (canonicalized first)."""
    canonical = canonicalize_text(text)
    digest = hashlib.sha256(b"domainscout-text-v1|" + canonical.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def seed_stream(run_seed: int, key: int, count: int, purpose: Purpose) -> list[int]:
    """The first `count` seeds of a stream. Index i is always the same seed."""
    return [derive_seed(run_seed, key, i, purpose) for i in range(count)]


class SeedLedger:
    """Collision check: records every (key, index, purpose) triple and the
    seed it produced; re-deriving the same triple is fine, two distinct
    triples mapping to one seed is an internal error."""

    def __init__(self):
        self._seen: dict[int, tuple[int, int, str]] = {}

    def record(self, seed: int, key: int, index: int, purpose: Purpose) -> None:
        triple = (key, index, purpose.value)
        prior = self._seen.get(seed)
        if prior is not None and prior != triple:
            raise EngineInternalSeedCollision(seed, prior, triple)
        self._seen[seed] = triple


class EngineInternalSeedCollision(Exception):
    def __init__(self, seed, a, b):
        super().__init__(f"seed collision: {seed} derived from both {a} and {b}")


# ---------------------------------------------------------------------------
# Canonical JSON


def _format_real(x: float) -> str:
    if not math.isfinite(x):
        raise InvalidInput("non-finite real cannot be serialized")
    if x == 0.0:
        return "0"
    return format(x, ".9g")


def _write_canonical(value, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, float):
        out.append(_format_real(value))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=True))
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _write_canonical(item, out)
        out.append("]")
    elif isinstance(value, Mapping):
        out.append("{")
        keys = list(value.keys())
        if any(not isinstance(k, str) for k in keys):
            raise InvalidInput("canonical JSON object keys must be strings")
        for i, k in enumerate(sorted(keys)):
            if i:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=True))
            out.append(":")
            _write_canonical(value[k], out)
        out.append("}")
    else:
        raise InvalidInput(f"type {type(value).__name__} is not canonical-JSON serializable")


def canonical_json(value) -> str:
    """Serialize to canonical JSON: sorted keys, reals at 9 significant
    digits, ASCII-only strings, no whitespace. Deterministic by construction."""
    out: list[str] = []
    _write_canonical(value, out)
    return "".join(out)


# ---------------------------------------------------------------------------
# Config


DEFAULT_GENERALITY_SCHEDULE = (1.0, 0.7, 0.4, 0.2, 0.1, 0.0)


@dataclass(frozen=True)
class Config:
    """Search configuration. Frozen; its digest guards resume compatibility."""

    run_seed: int = 0
    m_samples_per_node: int = 32
    lambda_: float = 0.25  # generality-penalty weight in the objective
    n_final_samples: int = 64
    max_depth: int = 6
    enrich_depth_limit: int = 1
    verbosity_threshold: int = 20  # in words
    l_summaries: int = 3
    group_threshold: int = 6
    group_target: int = 3
    generality_schedule: tuple[float, ...] = DEFAULT_GENERALITY_SCHEDULE
    no_improvement_patience: int = 2

    def __post_init__(self):
        _check_u64(self.run_seed, "run_seed")
        for name in ("m_samples_per_node", "n_final_samples", "max_depth",
                     "verbosity_threshold", "l_summaries", "group_threshold",
                     "group_target", "no_improvement_patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise InvalidInput(f"{name} must be a positive integer")
        if not isinstance(self.enrich_depth_limit, int) or self.enrich_depth_limit < 0:
            raise InvalidInput("enrich_depth_limit must be a non-negative integer")
        lam = float(self.lambda_)
        if not math.isfinite(lam) or lam < 0.0:
            raise InvalidInput("lambda_ must be a finite non-negative real")
        object.__setattr__(self, "lambda_", lam)
        sched = tuple(float(g) for g in self.generality_schedule)
        if len(sched) == 0:
            raise InvalidInput("generality_schedule must be non-empty")
        for g in sched:
            if not math.isfinite(g) or not 0.0 <= g <= 1.0:
                raise InvalidInput("generality_schedule entries must lie in [0, 1]")
        if any(b > a for a, b in zip(sched, sched[1:])):
            raise InvalidInput("generality_schedule must be non-increasing")
        object.__setattr__(self, "generality_schedule", sched)

    def generality_for_iteration(self, iteration: int) -> float:
        """Schedule lookup: iteration t uses entry min(t, last)."""
        if iteration < 0:
            raise InvalidInput("iteration must be >= 0")
        idx = min(iteration, len(self.generality_schedule) - 1)
        return self.generality_schedule[idx]

    @property
    def final_generality(self) -> float:
        return self.generality_schedule[-1]

    def to_dict(self) -> dict:
        return {
            "run_seed": self.run_seed,
            "m_samples_per_node": self.m_samples_per_node,
            "lambda": self.lambda_,
            "n_final_samples": self.n_final_samples,
            "max_depth": self.max_depth,
            "enrich_depth_limit": self.enrich_depth_limit,
            "verbosity_threshold": self.verbosity_threshold,
            "l_summaries": self.l_summaries,
            "group_threshold": self.group_threshold,
            "group_target": self.group_target,
            "generality_schedule": list(self.generality_schedule),
            "no_improvement_patience": self.no_improvement_patience,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Config":
        if not isinstance(data, Mapping):
            raise InvalidInput("config must be an object")
        known = {
            "run_seed", "m_samples_per_node", "lambda", "n_final_samples",
            "max_depth", "enrich_depth_limit", "verbosity_threshold",
            "l_summaries", "group_threshold", "group_target",
            "generality_schedule", "no_improvement_patience",
        }
        unknown = set(data) - known
        if unknown:
            raise InvalidInput(f"unknown config field: {sorted(unknown)[0]}")
        kwargs = {k: v for k, v in data.items() if k != "lambda" and k != "generality_schedule"}
        if "lambda" in data:
            kwargs["lambda_"] = data["lambda"]
        if "generality_schedule" in data:
            sched = data["generality_schedule"]
            if not isinstance(sched, (list, tuple)):
                raise InvalidInput("generality_schedule must be a list")
            kwargs["generality_schedule"] = tuple(sched)
        return cls(**kwargs)

    def digest(self) -> str:
        """64-bit hex digest of the canonical config serialization."""
        full = hashlib.sha256(canonical_json(self.to_dict()).encode("ascii")).digest()
        return full[:8].hex()


# ---------------------------------------------------------------------------
# Search tree


@dataclass
class SearchNode:
    id: int
    parent_id: Optional[int]
    depth: int
    description: Description
    relevance: Optional[Relevance] = None
    status: str = "pending"
    child_ids: list[int] = field(default_factory=list)

    @property
    def is_root(self) -> bool:
        return self.parent_id is None


class SearchTree:
    """Mutable search state: a forest of description nodes.

    Multiple initial descriptions become multiple parentless depth-0 roots;
    the conceptual super-root above them is bookkeeping only and is never
    materialized or scored.
    """

    def __init__(self, config: Config):
        self.config = config
        self.nodes: dict[int, SearchNode] = {}
        self.frontier: list[int] = []
        self.iteration: int = 0
        self._next_id: int = 0

    # -- construction -----------------------------------------------------

    def add_root(self, description: Description) -> SearchNode:
        node = SearchNode(id=self._next_id, parent_id=None, depth=0, description=description)
        self._next_id += 1
        self.nodes[node.id] = node
        self.frontier.append(node.id)
        return node

    def add_child(self, parent_id: int, description: Description,
                  status: str = "pending", relevance: Optional[Relevance] = None) -> SearchNode:
        parent = self.node(parent_id)
        if status not in NODE_STATUSES:
            raise InvalidInput(f"unknown node status {status!r}")
        node = SearchNode(
            id=self._next_id, parent_id=parent_id, depth=parent.depth + 1,
            description=description, relevance=relevance, status=status,
        )
        if (status == "pending") != (relevance is None):
            raise InvalidInput("pending nodes must have no relevance; scored nodes must have one")
        self._next_id += 1
        self.nodes[node.id] = node
        parent.child_ids.append(node.id)
        if status == "pending":
            self.frontier.append(node.id)
        return node

    def node(self, node_id: int) -> SearchNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise InvalidInput(f"no node with id {node_id}") from None

    def mark_scored(self, node_id: int, relevance: Relevance) -> None:
        node = self.node(node_id)
        node.relevance = relevance
        node.status = "scored"
        try:
            self.frontier.remove(node_id)
        except ValueError:
            pass

    def roots(self) -> list[SearchNode]:
        return [n for n in self.nodes.values() if n.parent_id is None]

    def pending_at_depth(self, depth: int) -> list[int]:
        return [nid for nid in self.frontier if self.nodes[nid].depth == depth]

    def text_owner(self, text: str) -> Optional[SearchNode]:
        """Lowest-id node with a recorded relevance for this canonical text."""
        canonical = canonicalize_text(text)
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            if node.relevance is not None and node.description.text == canonical:
                return node
        return None

    def max_relevance_above(self, depth_limit: int) -> Optional[Relevance]:
        """Best recorded relevance among nodes at depth < depth_limit."""
        best: Optional[Relevance] = None
        for node in self.nodes.values():
            if node.depth < depth_limit and node.relevance is not None:
                if best is None or node.relevance.exceeds(best):
                    best = node.relevance
        return best

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        """Structural invariant check; raises TreeParseError on violation."""
        pending = set()
        for nid, node in self.nodes.items():
            where = f"nodes[{nid}]"
            if node.id != nid:
                raise TreeParseError(f"{where}.id: does not match its key")
            if node.parent_id is None:
                if node.depth != 0:
                    raise TreeParseError(f"{where}.depth: root must have depth 0")
            else:
                parent = self.nodes.get(node.parent_id)
                if parent is None:
                    raise TreeParseError(f"{where}.parent_id: no such node")
                if node.depth != parent.depth + 1:
                    raise TreeParseError(f"{where}.depth: must be parent depth + 1")
                if nid not in parent.child_ids:
                    raise TreeParseError(f"{where}.parent_id: parent does not list this child")
            for cid in node.child_ids:
                child = self.nodes.get(cid)
                if child is None:
                    raise TreeParseError(f"{where}.child_ids: no node with id {cid}")
                if child.parent_id != nid:
                    raise TreeParseError(f"{where}.child_ids: node {cid} has a different parent")
            if node.status not in NODE_STATUSES:
                raise TreeParseError(f"{where}.status: unknown status {node.status!r}")
            if (node.status == "pending") != (node.relevance is None):
                raise TreeParseError(f"{where}.relevance: must be null iff status is pending")
            if node.status == "pending":
                pending.add(nid)
            if node.status == "saturated":
                if not node.relevance.is_perfect:
                    raise TreeParseError(f"{where}.status: saturated requires k == m")
        if len(set(self.frontier)) != len(self.frontier):
            raise TreeParseError("frontier: contains duplicates")
        if set(self.frontier) != pending:
            raise TreeParseError("frontier: must list exactly the pending node ids")
        if self.iteration < 0:
            raise TreeParseError("iteration: must be >= 0")
        # no pending descendants below terminated nodes
        for nid, node in self.nodes.items():
            if node.status == "terminated":
                stack = list(node.child_ids)
                while stack:
                    cid = stack.pop()
                    child = self.nodes[cid]
                    if child.status == "pending":
                        raise TreeParseError(
                            f"nodes[{nid}]: terminated node has pending descendant {cid}")
                    stack.extend(child.child_ids)


# ---------------------------------------------------------------------------
# Tree serialization


def _node_to_dict(node: SearchNode) -> dict:
    return {
        "id": node.id,
        "parent_id": node.parent_id,
        "depth": node.depth,
        "description": node.description.text,
        "relevance": None if node.relevance is None else {"k": node.relevance.k, "m": node.relevance.m},
        "status": node.status,
        "child_ids": list(node.child_ids),
    }


def serialize_tree(tree: SearchTree) -> str:
    """Canonical single-line JSON for a tree (trailing newline included)."""
    tree.validate()
    doc = {
        "config": tree.config.to_dict(),
        "config_digest": tree.config.digest(),
        "nodes": [_node_to_dict(tree.nodes[nid]) for nid in sorted(tree.nodes)],
        "frontier": list(tree.frontier),
        "iteration": tree.iteration,
    }
    return canonical_json(doc) + "\n"


def _expect(condition: bool, field_name: str, message: str) -> None:
    if not condition:
        raise TreeParseError(f"{field_name}: {message}")


def deserialize_tree(text: str) -> SearchTree:
    """Parse and fully validate a serialized tree.

    Round-trips byte-exactly through serialize_tree; the first offending
    field is named in the error on malformed input.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeParseError(f"document: not valid JSON ({exc.msg} at char {exc.pos})") from None
    _expect(isinstance(doc, dict), "document", "must be a JSON object")
    for required in ("config", "config_digest", "nodes", "frontier", "iteration"):
        _expect(required in doc, required, "missing required field")
    unknown = set(doc) - {"config", "config_digest", "nodes", "frontier", "iteration"}
    if unknown:
        raise TreeParseError(f"{sorted(unknown)[0]}: unknown top-level field")

    try:
        config = Config.from_dict(doc["config"])
    except InvalidInput as exc:
        raise TreeParseError(f"config: {exc}") from None
    _expect(isinstance(doc["config_digest"], str), "config_digest", "must be a string")
    if config.digest() != doc["config_digest"]:
        raise TreeParseError("config_digest: does not match the embedded config")

    _expect(isinstance(doc["nodes"], list), "nodes", "must be a list")
    _expect(isinstance(doc["frontier"], list), "frontier", "must be a list")
    _expect(isinstance(doc["iteration"], int) and not isinstance(doc["iteration"], bool),
            "iteration", "must be an integer")

    tree = SearchTree(config)
    tree.iteration = doc["iteration"]
    max_id = -1
    for i, raw in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        _expect(isinstance(raw, dict), where, "must be an object")
        for key in ("id", "parent_id", "depth", "description", "relevance", "status", "child_ids"):
            _expect(key in raw, f"{where}.{key}", "missing required field")
        extra = set(raw) - {"id", "parent_id", "depth", "description", "relevance", "status", "child_ids"}
        if extra:
            raise TreeParseError(f"{where}.{sorted(extra)[0]}: unknown field")
        _expect(isinstance(raw["id"], int) and not isinstance(raw["id"], bool),
                f"{where}.id", "must be an integer")
        _expect(raw["id"] not in tree.nodes, f"{where}.id", "duplicate node id")
        _expect(raw["parent_id"] is None or isinstance(raw["parent_id"], int),
                f"{where}.parent_id", "must be an integer or null")
        _expect(isinstance(raw["depth"], int) and raw["depth"] >= 0,
                f"{where}.depth", "must be a non-negative integer")
        _expect(isinstance(raw["description"], str), f"{where}.description", "must be a string")
        rel = raw["relevance"]
        relevance = None
        if rel is not None:
            _expect(isinstance(rel, dict) and set(rel) == {"k", "m"},
                    f"{where}.relevance", 'must be null or {"k", "m"}')
            _expect(isinstance(rel["k"], int) and isinstance(rel["m"], int),
                    f"{where}.relevance", "k and m must be integers")
            try:
                relevance = Relevance(k=rel["k"], m=rel["m"])
            except InvalidInput as exc:
                raise TreeParseError(f"{where}.relevance: {exc}") from None
        _expect(raw["status"] in NODE_STATUSES, f"{where}.status", "unknown status")
        _expect(isinstance(raw["child_ids"], list), f"{where}.child_ids", "must be a list")
        try:
            description = Description(raw["description"])
        except InvalidInput as exc:
            raise TreeParseError(f"{where}.description: {exc}") from None
        _expect(description.text == raw["description"], f"{where}.description",
                "must be in canonical form")
        node = SearchNode(
            id=raw["id"], parent_id=raw["parent_id"], depth=raw["depth"],
            description=description, relevance=relevance, status=raw["status"],
            child_ids=list(raw["child_ids"]),
        )
        tree.nodes[node.id] = node
        max_id = max(max_id, node.id)
    for i, nid in enumerate(doc["frontier"]):
        _expect(isinstance(nid, int) and not isinstance(nid, bool),
                f"frontier[{i}]", "must be an integer")
        _expect(nid in tree.nodes, f"frontier[{i}]", "no such node")
    tree.frontier = list(doc["frontier"])
    tree._next_id = max_id + 1
    try:
        tree.validate()
    except TreeParseError:
        raise
    # cycle detection beyond depth rule: depth strictly increases along
    # parent links, so consistency there already excludes cycles.
    return tree


def tree_round_trip_equal(a: SearchTree, b: SearchTree) -> bool:
    return serialize_tree(a) == serialize_tree(b)
