"""Monte Carlo estimation of the search objective.

The score of a candidate description has two parts: how often decoded samples
land in the target class (relevance), and how tightly the decoded samples
cluster around the description's own embedding (the generality penalty —
descriptions that pin generation down to themselves are too specific to
transfer). The combined value is relevance − lambda * penalty.

Both terms are plain Monte Carlo means over explicit seed streams, so on a
fixed seed set they are exact expectations: re-running any estimate with the
same stream reproduces it bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InvalidInput
from .oracles import OracleSuite
from .types import (
    ClassLabel, Config, Description, Purpose, Relevance, Sample,
    seed_stream, text_key,
)


@dataclass(frozen=True)
class RelevanceEstimate:
    """Outcome of probing one description with m decoded samples."""

    k: int
    m: int
    per_sample_labels: tuple[ClassLabel, ...]
    correct_samples: tuple[Sample, ...] = field(repr=False)

    def __post_init__(self):
        if not 0 <= self.k <= self.m:
            raise InvalidInput("relevance estimate requires 0 <= k <= m")
        if len(self.per_sample_labels) != self.m:
            raise InvalidInput("need exactly one label per sample")
        if len(self.correct_samples) != self.k:
            raise InvalidInput("correct_samples must hold exactly k samples")

    @property
    def value(self) -> float:
        return self.k / self.m

    @property
    def relevance(self) -> Relevance:
        return Relevance(self.k, self.m)


@dataclass(frozen=True)
class GeneralityEstimate:
    mean_cosine: float
    n: int

    def __post_init__(self):
        if not -1.0 <= self.mean_cosine <= 1.0:
            raise InvalidInput("mean cosine must lie in [-1, 1]")
        if self.n < 1:
            raise InvalidInput("generality estimate needs n >= 1")


@dataclass(frozen=True)
class ObjectiveValue:
    relevance: float
    penalty: float
    lambda_: float

    @property
    def value(self) -> float:
        return self.relevance - self.lambda_ * self.penalty

    def to_dict(self) -> dict:
        return {
            "relevance": self.relevance,
            "penalty": self.penalty,
            "lambda": self.lambda_,
            "value": self.value,
        }


def _take_seeds(seeds: Iterable[int], count: int) -> list[int]:
    out = []
    for seed in seeds:
        out.append(seed)
        if len(out) == count:
            return out
    raise InvalidInput(f"seed stream yielded {len(out)} seeds, need {count}")


def estimate_relevance(description: Description, target_class: ClassLabel, m: int,
                       generality_level: float, suite: OracleSuite,
                       seeds: Iterable[int]) -> RelevanceEstimate:
    """Decode m samples of `description` and count target-class hits.

    Samples are decoded and classified in seed order, so k, the label list,
    and the retained correct samples are independent of any execution
    interleaving. Correct samples are kept so caption extraction never has to
    re-decode.
    """
    if m < 1:
        raise InvalidInput("sample count m must be >= 1")
    chosen = _take_seeds(seeds, m)
    labels: list[ClassLabel] = []
    correct: list[Sample] = []
    for seed in chosen:
        sample = suite.decoder.decode(description, seed, generality_level)
        label = suite.target.classify(sample)
        labels.append(label)
        if label == target_class:
            correct.append(sample)
    return RelevanceEstimate(
        k=len(correct), m=m,
        per_sample_labels=tuple(labels), correct_samples=tuple(correct),
    )


def estimate_generality_penalty(description: Description, n: int,
                                generality_level: float, suite: OracleSuite,
                                seeds: Iterable[int]) -> GeneralityEstimate:
    """Mean cosine between the description's text embedding and the
    image-side embeddings of n decoded samples, accumulated in seed order."""
    if n < 1:
        raise InvalidInput("sample count n must be >= 1")
    chosen = _take_seeds(seeds, n)
    anchor = suite.text_embedder.embed_text(description)
    total = 0.0
    for seed in chosen:
        sample = suite.decoder.decode(description, seed, generality_level)
        total += anchor.cosine(suite.image_encoder.embed_image(sample))
    mean = total / n
    # guard against float accumulation drifting a hair past the bounds
    mean = min(1.0, max(-1.0, mean))
    return GeneralityEstimate(mean_cosine=mean, n=n)


def final_relevance_seeds(cfg: Config, description: Description) -> list[int]:
    return seed_stream(cfg.run_seed, text_key(description.text),
                       cfg.n_final_samples, Purpose.FINAL_RELEVANCE)


def final_generality_seeds(cfg: Config, description: Description) -> list[int]:
    return seed_stream(cfg.run_seed, text_key(description.text),
                       cfg.n_final_samples, Purpose.FINAL_GENERALITY)


def objective_value(description: Description, target_class: ClassLabel,
                    cfg: Config, suite: OracleSuite) -> ObjectiveValue:
    """Combined objective at the final generality level.

    The two terms draw from disjoint purpose-tagged seed streams keyed by the
    description's canonical text, so the value of a text is a pure function
    of (config, universe) — the same text always scores identically within a
    run, no matter which node carries it.
    """
    g = cfg.final_generality
    rel = estimate_relevance(description, target_class, cfg.n_final_samples,
                             g, suite, final_relevance_seeds(cfg, description))
    gen = estimate_generality_penalty(description, cfg.n_final_samples,
                                      g, suite, final_generality_seeds(cfg, description))
    return ObjectiveValue(relevance=rel.value, penalty=gen.mean_cosine,
                          lambda_=cfg.lambda_)
