"""Deterministic synthetic universe: a tiny closed world where every oracle
is an exact, seedable pure function, so search results can be verified
against brute-force enumeration.

The world model: a vocabulary of T tokens, each assigned a fixed unit vector
in R^D. A description is a set of tokens; its embedding is the normalized sum
of the token vectors. The decoder completes a description to L tokens with
seeded-uniform unused tokens and perturbs the embedding with seeded Gaussian
noise whose scale grows with the generality level. The target model accepts a
vector into the nearest class centroid when the cosine clears a threshold,
otherwise it emits the background label (index = number of classes).

All sampling here is driven by sha256 counter streams rather than a PRNG
library: keyed initialization is cheap and the byte stream is reproducible
across platforms and library versions.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInput, MalformedSample, UniverseConstructionFailed
from .oracles import BudgetMeter, OracleSuite
from .types import (
    ClassLabel, Description, Embedding, Purpose, Relevance, Sample,
    canonicalize_text, derive_seed,
)


# ---------------------------------------------------------------------------
# Deterministic sampling primitives


def _encode_part(part) -> bytes:
    if isinstance(part, bytes):
        body = part
        tag = b"b"
    elif isinstance(part, str):
        body = part.encode("utf-8")
        tag = b"s"
    elif isinstance(part, int) and not isinstance(part, bool):
        body = str(part).encode("ascii")
        tag = b"i"
    else:
        raise InvalidInput(f"unsupported stream key part type {type(part).__name__}")
    return tag + len(body).to_bytes(4, "big") + body


class HashStream:
    """Counter-based deterministic random stream keyed by a tuple of parts.

    Block i is sha256(prefix || i); blocks are consumed as big-endian u64s.
    """

    def __init__(self, *parts):
        self._prefix = b"domainscout-hs1|" + b"".join(_encode_part(p) for p in parts)
        self._counter = 0
        self._buffer: list[int] = []

    def _refill(self, min_count: int) -> None:
        while len(self._buffer) < min_count:
            digest = hashlib.sha256(self._prefix + self._counter.to_bytes(8, "big")).digest()
            self._counter += 1
            for off in range(0, 32, 8):
                self._buffer.append(int.from_bytes(digest[off:off + 8], "big"))

    def u64(self) -> int:
        self._refill(1)
        return self._buffer.pop(0)

    def u64_array(self, count: int) -> list[int]:
        self._refill(count)
        out = self._buffer[:count]
        del self._buffer[:count]
        return out

    def gaussians(self, count: int) -> np.ndarray:
        """`count` standard normals via Box-Muller on stream uniforms."""
        pairs = (count + 1) // 2
        raw = self.u64_array(2 * pairs)
        u = np.array(raw, dtype=np.float64) / 18446744073709551616.0  # / 2^64
        u1 = (u[0::2] * (1.0 - 1e-16)) + 1e-16  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:count]

    def choose_distinct(self, pool: Sequence, k: int) -> list:
        """Uniformly pick k distinct elements (partial Fisher-Yates)."""
        items = list(pool)
        k = min(k, len(items))
        for i in range(k):
            j = i + self.u64() % (len(items) - i)
            items[i], items[j] = items[j], items[i]
        return items[:k]


# ---------------------------------------------------------------------------
# Specification


def token_name(index: int, vocab_size: int) -> str:
    width = max(2, len(str(vocab_size - 1)))
    return f"t{index:0{width}d}"


@dataclass(frozen=True)
class ClassSpec:
    """One target-model class: the token set that defines its centroid."""

    label: ClassLabel
    required_tokens: tuple[str, ...]

    def __post_init__(self):
        if not isinstance(self.label, int) or self.label < 0:
            raise InvalidInput("class label must be a non-negative integer")
        tokens = tuple(sorted(set(self.required_tokens)))
        if not tokens:
            raise InvalidInput("class required_tokens must be non-empty")
        object.__setattr__(self, "required_tokens", tokens)

    @property
    def description(self) -> Description:
        return Description(" ".join(self.required_tokens))


@dataclass(frozen=True)
class UniverseSpec:
    universe_seed: int
    classes: tuple[ClassSpec, ...]
    vocab_size: int = 24
    dim: int = 32
    max_tokens: int = 4
    sigma_min: float = 0.05
    sigma_max: float = 0.6
    accept_threshold: float = 0.8
    caption_gain: float = 0.01

    def __post_init__(self):
        if not isinstance(self.universe_seed, int) or not 0 <= self.universe_seed < 2**64:
            raise InvalidInput("universe_seed must be in [0, 2^64)")
        if self.vocab_size < 1:
            raise InvalidInput("vocab_size must be >= 1")
        if self.dim < 2:
            raise InvalidInput("dim must be >= 2")
        if not 1 <= self.max_tokens <= self.vocab_size:
            raise InvalidInput("max_tokens must satisfy 1 <= L <= vocab_size")
        if not (0.0 <= self.sigma_min <= self.sigma_max):
            raise InvalidInput("need 0 <= sigma_min <= sigma_max")
        if not -1.0 <= self.accept_threshold <= 1.0:
            raise InvalidInput("accept_threshold must lie in [-1, 1]")
        if self.caption_gain < 0.0:
            raise InvalidInput("caption_gain must be >= 0")
        classes = tuple(self.classes)
        if not classes:
            raise InvalidInput("universe must declare at least one class")
        vocab = {token_name(i, self.vocab_size) for i in range(self.vocab_size)}
        for i, cls in enumerate(classes):
            if cls.label != i:
                raise InvalidInput(f"classes[{i}] label must be {i} (labels are positional)")
            if len(cls.required_tokens) > self.max_tokens:
                raise InvalidInput(f"classes[{i}] has more than max_tokens required tokens")
            for tok in cls.required_tokens:
                if tok not in vocab:
                    raise InvalidInput(f"classes[{i}] token {tok!r} is not in the vocabulary")
        object.__setattr__(self, "classes", classes)

    @property
    def vocab(self) -> list[str]:
        return [token_name(i, self.vocab_size) for i in range(self.vocab_size)]

    @property
    def background_label(self) -> ClassLabel:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {
            "universe_seed": self.universe_seed,
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "max_tokens": self.max_tokens,
            "classes": [
                {"label": c.label, "required_tokens": list(c.required_tokens)}
                for c in self.classes
            ],
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "accept_threshold": self.accept_threshold,
            "caption_gain": self.caption_gain,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "UniverseSpec":
        if not isinstance(data, Mapping):
            raise InvalidInput("universe spec must be an object")
        known = {"universe_seed", "vocab_size", "dim", "max_tokens", "classes",
                 "sigma_min", "sigma_max", "accept_threshold", "caption_gain"}
        unknown = set(data) - known
        if unknown:
            raise InvalidInput(f"unknown universe field: {sorted(unknown)[0]}")
        if "classes" not in data or not isinstance(data["classes"], list):
            raise InvalidInput("universe spec needs a 'classes' list")
        classes = []
        for i, raw in enumerate(data["classes"]):
            if not isinstance(raw, Mapping) or set(raw) != {"label", "required_tokens"}:
                raise InvalidInput(f"classes[{i}] must have exactly 'label' and 'required_tokens'")
            classes.append(ClassSpec(label=raw["label"], required_tokens=tuple(raw["required_tokens"])))
        kwargs = {k: v for k, v in data.items() if k != "classes"}
        return cls(classes=tuple(classes), **kwargs)


def load_universe_spec(path) -> UniverseSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"universe file is not valid JSON: {exc.msg}") from None
    return UniverseSpec.from_dict(data)


# ---------------------------------------------------------------------------
# The world itself


def _token_matrix(universe_seed: int, vocab_size: int, dim: int) -> np.ndarray:
    rows = np.empty((vocab_size, dim), dtype=np.float64)
    for i in range(vocab_size):
        vec = HashStream("token-vector", universe_seed, i).gaussians(dim)
        rows[i] = vec / np.linalg.norm(vec)
    return rows


class Universe:
    """All seven oracles over one synthetic world, sharing a budget meter."""

    def __init__(self, spec: UniverseSpec, meter: Optional[BudgetMeter] = None):
        self.spec = spec
        self.meter = meter if meter is not None else BudgetMeter()
        self._tokens = _token_matrix(spec.universe_seed, spec.vocab_size, spec.dim)
        self._index = {name: i for i, name in enumerate(spec.vocab)}
        self._oov: dict[str, np.ndarray] = {}
        cents = []
        for cls in spec.classes:
            cents.append(self._embed_token_set(cls.required_tokens))
        self._centroids = np.stack(cents)
        for a in range(len(spec.classes)):
            for b in range(a + 1, len(spec.classes)):
                cos = float(np.dot(self._centroids[a], self._centroids[b]))
                if cos >= spec.accept_threshold:
                    raise UniverseConstructionFailed(
                        f"classes {a} and {b} have centroid cosine {cos:.4f} "
                        f">= accept_threshold {spec.accept_threshold}")

    # -- internal geometry --------------------------------------------------

    def _oov_vector(self, token: str) -> np.ndarray:
        vec = self._oov.get(token)
        if vec is None:
            raw = HashStream("oov-vector", self.spec.universe_seed, token).gaussians(self.spec.dim)
            vec = raw / np.linalg.norm(raw)
            self._oov[token] = vec
        return vec

    def _embed_token_set(self, tokens: Iterable[str]) -> np.ndarray:
        total = np.zeros(self.spec.dim, dtype=np.float64)
        ordered = sorted(set(tokens))
        if not ordered:
            raise InvalidInput("cannot embed an empty token set")
        for tok in ordered:
            idx = self._index.get(tok)
            total += self._tokens[idx] if idx is not None else self._oov_vector(tok)
        norm = np.linalg.norm(total)
        if norm == 0.0:
            raise InvalidInput("token set embeds to the zero vector")
        return total / norm

    def _tokens_of(self, description: Description) -> list[str]:
        return sorted(set(description.words))

    def _sigma(self, generality_level: float) -> float:
        g = float(generality_level)
        if not 0.0 <= g <= 1.0:
            raise InvalidInput("generality_level must lie in [0, 1]")
        return self.spec.sigma_min + g * (self.spec.sigma_max - self.spec.sigma_min)

    def _decode_vector(self, description: Description, seed: int, generality_level: float) -> np.ndarray:
        tokens = self._tokens_of(description)
        missing = self.spec.max_tokens - len(tokens)
        if missing > 0:
            pool = [t for t in self.spec.vocab if t not in set(tokens)]
            if pool:
                stream = HashStream("complete", self.spec.universe_seed, seed, description.text)
                tokens = tokens + stream.choose_distinct(pool, missing)
        base = self._embed_token_set(tokens)
        sigma = self._sigma(generality_level)
        # noise direction is a function of the seed alone, so at a fixed seed
        # a higher generality level strictly scales the same perturbation
        eps = HashStream("noise", self.spec.universe_seed, seed).gaussians(self.spec.dim)
        vec = base + sigma * eps / math.sqrt(self.spec.dim)
        norm = np.linalg.norm(vec)
        if norm == 0.0:  # unreachable in practice; keep decode total
            return base
        return vec / norm

    def _payload_vector(self, sample: Sample) -> np.ndarray:
        raw = sample.payload
        if len(raw) != self.spec.dim * 8:
            raise MalformedSample(
                f"payload has {len(raw)} bytes, expected {self.spec.dim * 8}")
        arr = np.frombuffer(raw, dtype="<f8")
        if not np.all(np.isfinite(arr)) or float(np.linalg.norm(arr)) == 0.0:
            raise MalformedSample("payload vector is not a finite non-zero vector")
        return np.asarray(arr, dtype=np.float64)

    # -- Decoder -------------------------------------------------------------

    def decode(self, description: Description, seed: int, generality_level: float) -> Sample:
        self.meter.charge("decode")
        vec = self._decode_vector(description, seed, generality_level)
        return Sample(payload=vec.astype("<f8").tobytes(), seed=seed, source=description)

    # -- TextEmbedder ----------------------------------------------------------

    def embed_text(self, description: Description) -> Embedding:
        self.meter.charge("embed_text")
        return Embedding(self._embed_token_set(description.words))

    # -- ImageEncoder ----------------------------------------------------------

    def embed_image(self, sample: Sample) -> Embedding:
        self.meter.charge("embed_image")
        return Embedding(self._payload_vector(sample))

    def caption(self, sample: Sample) -> Description:
        """Greedy token selection maximizing cosine to the sample vector.

        The first token is always taken (a caption must be non-empty); after
        that, selection stops when the best marginal cosine gain drops below
        the configured threshold or the caption reaches max_tokens.
        """
        self.meter.charge("caption")
        target = self._payload_vector(sample)
        target = target / np.linalg.norm(target)
        chosen: list[int] = []
        current = np.zeros(self.spec.dim, dtype=np.float64)
        current_cos = 0.0
        available = list(range(self.spec.vocab_size))
        while len(chosen) < self.spec.max_tokens and available:
            cands = current[None, :] + self._tokens[available]
            norms = np.linalg.norm(cands, axis=1)
            cosines = (cands @ target) / norms
            best_pos = int(np.argmax(cosines))
            gain = float(cosines[best_pos]) - current_cos
            if chosen and gain < self.spec.caption_gain:
                break
            idx = available.pop(best_pos)
            chosen.append(idx)
            current = current + self._tokens[idx]
            current_cos = float(cosines[best_pos])
        names = sorted(token_name(i, self.spec.vocab_size) for i in chosen)
        return Description(" ".join(names))

    # -- TargetModel -----------------------------------------------------------

    @property
    def num_classes(self) -> int:
        return len(self.spec.classes) + 1  # final index is the background label

    def classify(self, sample: Sample) -> ClassLabel:
        self.meter.charge("classify")
        vec = self._payload_vector(sample)
        vec = vec / np.linalg.norm(vec)
        cosines = self._centroids @ vec
        best = int(np.argmax(cosines))
        if float(cosines[best]) >= self.spec.accept_threshold:
            return best
        return self.spec.background_label

    # -- Summarizer --------------------------------------------------------------

    def summarize(self, description: Description, l_variants: int, max_words: int) -> list[Description]:
        self.meter.charge("summarize")
        if l_variants < 1 or max_words < 1:
            raise InvalidInput("l_variants and max_words must be >= 1")
        tokens = self._tokens_of(description)
        if len(tokens) <= 1:
            return [description]
        size = min(len(tokens) - 1, max_words)
        variants = []
        for combo in itertools.combinations(tokens, size):
            variants.append(Description(" ".join(combo)))
            if len(variants) == l_variants:
                break
        return variants

    # -- Grouper --------------------------------------------------------------

    def group(self, descriptions: Sequence[Description], target_count: int) -> list[Description]:
        self.meter.charge("group")
        if not descriptions:
            raise InvalidInput("group needs at least one description")
        if target_count < 1:
            raise InvalidInput("target_count must be >= 1")
        sets = [set(d.words) for d in descriptions]
        common = set.intersection(*sets)
        if common:
            return [Description(" ".join(sorted(common)))]
        # no shared token: fall back to the embedding medoid
        vectors = [self._embed_token_set(d.words) for d in descriptions]
        best_text = None
        best_score = None
        for i, d in enumerate(descriptions):
            score = sum(float(np.dot(vectors[i], vectors[j]))
                        for j in range(len(descriptions)) if j != i)
            if best_score is None or score > best_score or \
                    (score == best_score and d.text < best_text):
                best_score, best_text = score, d.text
        return [Description(best_text)]

    # -- Enricher --------------------------------------------------------------

    def enrich(self, description: Description, n_variants: int) -> list[Description]:
        self.meter.charge("enrich")
        if n_variants < 0:
            raise InvalidInput("n_variants must be >= 0")
        tokens = self._tokens_of(description)
        used = set(tokens)
        pool = [t for t in self.spec.vocab if t not in used]
        stream = HashStream("enrich", self.spec.universe_seed, description.text)
        picked = stream.choose_distinct(pool, min(n_variants, len(pool)))
        return [Description(" ".join(sorted(tokens + [tok]))) for tok in picked]


def build_universe(spec: UniverseSpec, budgets: Optional[dict[str, int]] = None) -> OracleSuite:
    """Assemble an OracleSuite whose seven oracles all live in one synthetic
    world and share one budget meter."""
    meter = BudgetMeter(budgets)
    world = Universe(spec, meter)
    return OracleSuite(
        decoder=world, text_embedder=world, image_encoder=world, target=world,
        summarizer=world, grouper=world, enricher=world, call_budget=meter,
    )


# ---------------------------------------------------------------------------
# Spec generation


def generate_universe_spec(universe_seed: int, n_classes: int, tokens_per_class: int = 2,
                           vocab_size: int = 24, dim: int = 32, max_tokens: int = 4,
                           sigma_min: float = 0.05, sigma_max: float = 0.6,
                           accept_threshold: float = 0.8, caption_gain: float = 0.01,
                           max_attempts: int = 200) -> UniverseSpec:
    """Sample class token sets (disjoint across classes) and retry until the
    centroid-separation requirement holds."""
    if n_classes * tokens_per_class > vocab_size:
        raise InvalidInput("not enough vocabulary for disjoint class token sets")
    vocab = [token_name(i, vocab_size) for i in range(vocab_size)]
    tokens = _token_matrix(universe_seed, vocab_size, dim)
    for attempt in range(max_attempts):
        stream = HashStream("class-gen", universe_seed, attempt)
        picked = stream.choose_distinct(vocab, n_classes * tokens_per_class)
        classes = []
        cents = []
        for c in range(n_classes):
            chunk = sorted(picked[c * tokens_per_class:(c + 1) * tokens_per_class])
            classes.append(ClassSpec(label=c, required_tokens=tuple(chunk)))
            total = tokens[[vocab.index(t) for t in chunk]].sum(axis=0)
            cents.append(total / np.linalg.norm(total))
        ok = all(
            float(np.dot(cents[a], cents[b])) < accept_threshold
            for a in range(n_classes) for b in range(a + 1, n_classes)
        )
        if ok:
            return UniverseSpec(
                universe_seed=universe_seed, classes=tuple(classes),
                vocab_size=vocab_size, dim=dim, max_tokens=max_tokens,
                sigma_min=sigma_min, sigma_max=sigma_max,
                accept_threshold=accept_threshold, caption_gain=caption_gain,
            )
    raise UniverseConstructionFailed(
        f"no separated class assignment found in {max_attempts} attempts")


# ---------------------------------------------------------------------------
# Brute-force verification


@dataclass(frozen=True)
class ExactObjective:
    description: Description
    relevance: float
    penalty: float
    value: float


@dataclass(frozen=True)
class BruteForceResult:
    best: ExactObjective
    candidates_evaluated: int


def candidate_count(vocab_size: int, max_tokens: int) -> int:
    return sum(math.comb(vocab_size, j) for j in range(1, max_tokens + 1))


def exact_objective(spec: UniverseSpec, description: Description, target_class: ClassLabel,
                    seed_set: Sequence[int], lambda_: float,
                    generality_level: float = 0.0,
                    world: Optional[Universe] = None) -> ExactObjective:
    """Exact objective over an explicit seed set (no estimation error)."""
    if not seed_set:
        raise InvalidInput("seed_set must be non-empty")
    w = world if world is not None else Universe(spec)
    text_emb = w._embed_token_set(description.words)
    hits = 0
    cos_total = 0.0
    for seed in seed_set:
        vec = w._decode_vector(description, seed, generality_level)
        cosines = w._centroids @ vec
        best = int(np.argmax(cosines))
        label = best if float(cosines[best]) >= spec.accept_threshold else spec.background_label
        if label == target_class:
            hits += 1
        cos_total += float(np.dot(vec, text_emb))
    relevance = hits / len(seed_set)
    penalty = cos_total / len(seed_set)
    return ExactObjective(
        description=description, relevance=relevance, penalty=penalty,
        value=relevance - lambda_ * penalty,
    )


def iter_candidates(spec: UniverseSpec):
    """All token subsets of sizes 1..max_tokens, smallest first, lexicographic
    within a size."""
    vocab = spec.vocab
    for size in range(1, spec.max_tokens + 1):
        for combo in itertools.combinations(vocab, size):
            yield Description(" ".join(combo))


def brute_force_optimum(spec: UniverseSpec, target_class: ClassLabel, cfg,
                        seed_set: Sequence[int],
                        max_candidates: Optional[int] = None) -> BruteForceResult:
    """Evaluate the exact objective for every candidate description and return
    the maximum. Ties break toward fewer tokens, then lexicographic text.

    Uses cfg.lambda_ and evaluates at the schedule's final generality level,
    matching what the search engine's final selection measures.
    """
    if not 0 <= target_class < len(spec.classes) + 1:
        raise InvalidInput("target_class out of range")
    total = candidate_count(spec.vocab_size, spec.max_tokens)
    if max_candidates is not None and total > max_candidates:
        raise InvalidInput(
            f"candidate space has {total} descriptions, over the limit of {max_candidates}")
    world = Universe(spec)
    best: Optional[ExactObjective] = None
    best_rank: Optional[tuple] = None
    count = 0
    for cand in iter_candidates(spec):
        result = exact_objective(spec, cand, target_class, seed_set, cfg.lambda_,
                                 cfg.final_generality, world=world)
        count += 1
        rank = (-result.value, cand.word_count, cand.text)
        if best_rank is None or rank < best_rank:
            best, best_rank = result, rank
    return BruteForceResult(best=best, candidates_evaluated=count)


# ---------------------------------------------------------------------------
# Cloning follow-up


def clone_follow_up(spec: UniverseSpec, found_descriptions: Mapping[ClassLabel, Description],
                    n_train: int, suite: OracleSuite,
                    heldout_per_class: int = 64, generality_level: float = 0.0) -> float:
    """Train a nearest-prototype learner on samples generated from the found
    per-class descriptions (labels come from the target model), then report
    label agreement with the target on held-out samples decoded from each
    class's ground-truth token set."""
    if n_train < 1 or heldout_per_class < 1:
        raise InvalidInput("n_train and heldout_per_class must be >= 1")
    if not found_descriptions:
        raise InvalidInput("found_descriptions must be non-empty")

    by_label: dict[ClassLabel, list[np.ndarray]] = {}
    for cls_label in sorted(found_descriptions):
        desc = found_descriptions[cls_label]
        key = hash_key_for_clone(cls_label, desc.text)
        for i in range(n_train):
            seed = derive_seed(spec.universe_seed, key, i, Purpose.CLONE_TRAIN)
            sample = suite.decoder.decode(desc, seed, generality_level)
            vec = suite.image_encoder.embed_image(sample).values
            label = suite.target.classify(sample)
            by_label.setdefault(label, []).append(vec)

    prototypes = {}
    for label, vectors in sorted(by_label.items()):
        mean = np.mean(np.stack(vectors), axis=0)
        norm = np.linalg.norm(mean)
        if norm > 0.0:
            prototypes[label] = mean / norm
    if not prototypes:
        return 0.0
    proto_labels = sorted(prototypes)
    proto_matrix = np.stack([prototypes[l] for l in proto_labels])

    agree = 0
    total = 0
    for cls in spec.classes:
        desc = cls.description
        key = hash_key_for_clone(cls.label, "heldout|" + desc.text)
        for i in range(heldout_per_class):
            seed = derive_seed(spec.universe_seed, key, i, Purpose.CLONE_HELDOUT)
            sample = suite.decoder.decode(desc, seed, generality_level)
            vec = suite.image_encoder.embed_image(sample).values
            truth = suite.target.classify(sample)
            pred = proto_labels[int(np.argmax(proto_matrix @ vec))]
            agree += int(pred == truth)
            total += 1
    return agree / total


def hash_key_for_clone(label: ClassLabel, text: str) -> int:
    digest = hashlib.sha256(f"clone|{label}|{canonicalize_text(text)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
