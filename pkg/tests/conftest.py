"""Shared fixtures: fast universes, fixture loading, and in-process services."""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import pytest

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from domainscout.remote import EndpointConfig, ResponseCache, build_remote_suite
from domainscout.universe import UniverseSpec, ClassSpec, build_universe, generate_universe_spec

from mock_llm import MockLlmState, create_mock_llm
from mock_shim import MockShimState, create_mock_shim

FIXTURES_DIR = Path(__file__).resolve().parent.parent / "fixtures" / "shim_protocol"


def load_shim_fixtures() -> list[dict]:
    out = []
    for path in sorted(FIXTURES_DIR.glob("*.json")):
        with open(path, "r", encoding="utf-8") as f:
            out.append(json.load(f))
    assert out, f"no fixtures found under {FIXTURES_DIR}"
    return out


# ---------------------------------------------------------------------------
# Universes


def tiny_spec(universe_seed: int = 5, **overrides) -> UniverseSpec:
    """Small hand-built two-class world; fast enough for unit tests."""
    fields = dict(universe_seed=universe_seed,
                  classes=(ClassSpec(0, ("t01", "t04")), ClassSpec(1, ("t02", "t05"))),
                  vocab_size=8, dim=24, max_tokens=3,
                  sigma_min=0.05, sigma_max=0.35, accept_threshold=0.65)
    fields.update(overrides)
    return UniverseSpec(**fields)


def acceptance_spec(universe_seed: int) -> UniverseSpec:
    """The frozen world family used by the acceptance suite."""
    return generate_universe_spec(universe_seed, n_classes=3, tokens_per_class=2,
                                  vocab_size=12, dim=32, max_tokens=3,
                                  sigma_min=0.05, sigma_max=0.35,
                                  accept_threshold=0.65)


@pytest.fixture
def suite():
    return build_universe(tiny_spec())


# ---------------------------------------------------------------------------
# In-process services


def shim_client(state: MockShimState | None = None) -> tuple[TestClient, MockShimState]:
    st = state if state is not None else MockShimState()
    client = TestClient(create_mock_shim(st), raise_server_exceptions=False)
    return client, st


def llm_client(state: MockLlmState | None = None) -> tuple[TestClient, MockLlmState]:
    st = state if state is not None else MockLlmState()
    client = TestClient(create_mock_llm(st), raise_server_exceptions=False)
    return client, st


def fast_endpoint(**overrides) -> EndpointConfig:
    fields = dict(base_url="http://testserver", timeout=5.0,
                  max_retries=3, backoff=0.01)
    fields.update(overrides)
    return EndpointConfig(**fields)


def remote_suite(tmp_path, budgets=None, llm_state=None, shim_state=None,
                 cache_dir=None, **endpoint_overrides):
    """OracleSuite wired to in-process mock services with a temp cache."""
    llm, llm_st = llm_client(llm_state)
    shim, shim_st = shim_client(shim_state)
    cache = ResponseCache(cache_dir if cache_dir is not None else tmp_path / "cache")
    cfg = fast_endpoint(**endpoint_overrides)
    suite = build_remote_suite(cfg, cfg, budgets=budgets, cache=cache,
                               llm_client=llm, shim_client=shim)
    return suite, llm_st, shim_st
