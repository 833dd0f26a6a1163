"""Exception types shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(EngineError):
    """A caller-supplied value violates a documented precondition."""


class NoOpError(EngineError):
    """An operation was requested on a node whose state already rules it out
    (e.g. expanding a node that is not pending)."""


class BudgetExceeded(EngineError):
    """An oracle call was requested after its budget counter reached zero.

    The search engine catches this, leaves the tree in a resumable state and
    marks the run partial.
    """

    def __init__(self, oracle_kind: str):
        super().__init__(f"call budget exhausted for oracle '{oracle_kind}'")
        self.oracle_kind = oracle_kind


class OracleUnavailable(EngineError):
    """A remote oracle endpoint could not be reached (after retries)."""


class OracleProtocolError(EngineError):
    """A remote oracle answered, but not in the agreed format."""


class MalformedSample(EngineError):
    """A sample payload could not be decoded by the consumer."""


class ConfigMismatch(EngineError):
    """A resume was attempted with a Config whose digest differs from the
    digest recorded in the serialized tree."""


class TreeParseError(EngineError):
    """A serialized tree failed validation; the message names the first
    offending field."""


class UniverseConstructionFailed(EngineError):
    """Synthetic-universe class sampling could not satisfy the separation
    requirement within the retry allowance."""
