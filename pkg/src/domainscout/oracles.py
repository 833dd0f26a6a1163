"""Oracle interfaces: the six pluggable services the engine talks to, plus
per-oracle call budgets.

Implementations must behave as pure functions of their arguments (and their
construction-time configuration). Every effective call — i.e. one that is not
answered from a persistent response cache — charges the suite's budget meter
for its oracle kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, runtime_checkable

from .errors import BudgetExceeded, InvalidInput
from .types import ClassLabel, Description, Embedding, Sample

ORACLE_KINDS = (
    "decode", "embed_text", "embed_image", "caption",
    "classify", "summarize", "group", "enrich",
)


class BudgetMeter:
    """Per-oracle-kind call counters. A kind with no limit is unlimited.

    Counters never go negative: a call that would cross zero raises
    BudgetExceeded before the call is made.
    """

    def __init__(self, limits: Optional[dict[str, int]] = None):
        limits = dict(limits or {})
        for kind, value in limits.items():
            if kind not in ORACLE_KINDS:
                raise InvalidInput(f"unknown oracle kind {kind!r}")
            if not isinstance(value, int) or value < 0:
                raise InvalidInput(f"budget for {kind!r} must be a non-negative integer")
        self._limits = limits
        self.spent: dict[str, int] = {kind: 0 for kind in ORACLE_KINDS}

    def charge(self, kind: str, amount: int = 1) -> None:
        if kind not in ORACLE_KINDS:
            raise InvalidInput(f"unknown oracle kind {kind!r}")
        limit = self._limits.get(kind)
        if limit is not None and self.spent[kind] + amount > limit:
            raise BudgetExceeded(kind)
        self.spent[kind] += amount

    def remaining(self, kind: str) -> Optional[int]:
        limit = self._limits.get(kind)
        if limit is None:
            return None
        return limit - self.spent[kind]

    def snapshot(self) -> dict[str, int]:
        return dict(self.spent)


@runtime_checkable
class Decoder(Protocol):
    """Turns a description into a sample. `generality_level` in [0, 1] ranges
    from most specific (0) to most general (1)."""

    def decode(self, description: Description, seed: int, generality_level: float) -> Sample: ...


@runtime_checkable
class TextEmbedder(Protocol):
    def embed_text(self, description: Description) -> Embedding: ...


@runtime_checkable
class ImageEncoder(Protocol):
    def embed_image(self, sample: Sample) -> Embedding: ...

    def caption(self, sample: Sample) -> Description: ...


@runtime_checkable
class TargetModel(Protocol):
    """The model under investigation. Hard labels only: no scores, no
    gradients, no metadata beyond the label index."""

    def classify(self, sample: Sample) -> ClassLabel: ...

    @property
    def num_classes(self) -> Optional[int]: ...


@runtime_checkable
class Summarizer(Protocol):
    def summarize(self, description: Description, l_variants: int, max_words: int) -> list[Description]: ...


@runtime_checkable
class Grouper(Protocol):
    def group(self, descriptions: Sequence[Description], target_count: int) -> list[Description]: ...


@runtime_checkable
class Enricher(Protocol):
    def enrich(self, description: Description, n_variants: int) -> list[Description]: ...


@dataclass
class OracleSuite:
    """The bundle of oracle implementations a run operates against, together
    with the shared call-budget meter they charge."""

    decoder: Decoder
    text_embedder: TextEmbedder
    image_encoder: ImageEncoder
    target: TargetModel
    summarizer: Summarizer
    grouper: Grouper
    enricher: Enricher
    call_budget: BudgetMeter = field(default_factory=BudgetMeter)
