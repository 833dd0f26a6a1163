"""Network-backed oracle implementations.

Two services stand behind the engine when it is not running against the
synthetic world: an OpenAI-compatible chat endpoint supplies the language
oracles (summarize / group / enrich), and a model shim speaks a small JSON
protocol for decoding, embedding, captioning, and classification.

Purity is enforced by a persistent response cache keyed by (oracle kind,
canonical argument digest): a warm cache answers every repeated call without
touching the network, and only cache misses count against the budget.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

import httpx

from .errors import InvalidInput, OracleProtocolError, OracleUnavailable
from .oracles import BudgetMeter
from .types import (
    ClassLabel, Description, Embedding, Sample, canonical_json,
    canonicalize_text,
)

logger = logging.getLogger("domainscout.remote")

ENV_LLM_API_KEY = "DOMAIN_BRIDGE_LLM_API_KEY"
ENV_CACHE_DIR = "DOMAIN_BRIDGE_CACHE_DIR"

LLM_KINDS = ("summarize", "group", "enrich")
SHIM_KINDS = ("decode", "embed_text", "embed_image", "caption", "classify")

_SYSTEM_PROMPT = ("You are a precise dataset-description assistant. "
                  "Always reply with a JSON array of strings and nothing else.")
_REPAIR_PROMPT = "Reply with ONLY a JSON array of strings."


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    api_key: Optional[str] = None
    model_name: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    max_inflight: int = 4

    def __post_init__(self):
        if not self.base_url:
            raise InvalidInput("endpoint base_url must be non-empty")
        if self.timeout <= 0:
            raise InvalidInput("endpoint timeout must be positive")
        if self.max_retries < 0:
            raise InvalidInput("max_retries must be >= 0")
        if self.backoff <= 0:
            raise InvalidInput("backoff must be positive")
        if self.max_inflight < 1:
            raise InvalidInput("max_inflight must be >= 1")

    def resolved_api_key(self) -> Optional[str]:
        return self.api_key if self.api_key is not None else os.environ.get(ENV_LLM_API_KEY)


def canonical_arg_digest(kind: str, payload: Mapping) -> str:
    body = canonical_json(dict(payload))
    return hashlib.sha256(f"{kind}|{body}".encode("utf-8")).hexdigest()


def generality_to_skip(generality_level: float) -> int:
    """Map the engine's [0, 1] generality level onto the wire's 1..12 layer
    skip: fully general (1.0) means skip 12, fully specific (0.0) means 1."""
    g = float(generality_level)
    if not 0.0 <= g <= 1.0:
        raise InvalidInput("generality_level must lie in [0, 1]")
    return 1 + round(g * 11)


class ResponseCache:
    """File-per-entry response store. Entries are immutable once written;
    writes go through a temp file + atomic replace so concurrent readers
    never observe a torn entry."""

    def __init__(self, root: os.PathLike | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_env(cls) -> Optional["ResponseCache"]:
        path = os.environ.get(ENV_CACHE_DIR)
        return cls(path) if path else None

    def _path(self, kind: str, digest: str) -> Path:
        return self.root / kind / f"{digest}.json"

    def get(self, kind: str, digest: str) -> Optional[bytes]:
        path = self._path(kind, digest)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None

    def put(self, kind: str, digest: str, data: bytes) -> None:
        path = self._path(kind, digest)
        if path.exists():
            return  # immutable: first write wins
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)


def _error_message(response: httpx.Response) -> str:
    try:
        body = response.json()
        err = body.get("error")
        if isinstance(err, Mapping):
            return f"{err.get('code', 'error')}: {err.get('message', '')}"
    except (json.JSONDecodeError, ValueError):
        pass
    return f"HTTP {response.status_code}"


class _HttpCaller:
    """Shared retry/backoff/inflight policy for both endpoints.

    Server errors and transport failures retry with doubling backoff up to
    max_retries; client errors (4xx) fail immediately — retrying a rejected
    request cannot help.
    """

    def __init__(self, cfg: EndpointConfig, client: Optional[httpx.Client] = None):
        self.cfg = cfg
        self._client = client if client is not None else httpx.Client(timeout=cfg.timeout)
        self._gate = threading.Semaphore(cfg.max_inflight)

    def call(self, method: str, url: str, json_body: Optional[Mapping] = None,
             headers: Optional[dict] = None) -> httpx.Response:
        delay = self.cfg.backoff
        last_error: Optional[str] = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                with self._gate:
                    response = self._client.request(method, url, json=json_body,
                                                    headers=headers)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if response.status_code < 400:
                    return response
                if response.status_code < 500:
                    raise OracleUnavailable(
                        f"{url} rejected the request ({_error_message(response)})")
                last_error = _error_message(response)
            if attempt < self.cfg.max_retries:
                time.sleep(delay)
                delay *= 2
        raise OracleUnavailable(f"{url} unreachable after "
                                f"{self.cfg.max_retries + 1} attempts ({last_error})")


# ---------------------------------------------------------------------------
# Chat endpoint (summarize / group / enrich)


def load_prompt_template(kind: str) -> str:
    if kind not in LLM_KINDS:
        raise InvalidInput(f"no prompt template for kind {kind!r}")
    return resources.files("domainscout.prompts").joinpath(f"{kind}.txt").read_text("utf-8")


def prompt_template_digest(kind: str) -> str:
    return hashlib.sha256(load_prompt_template(kind).encode("utf-8")).hexdigest()[:16]


def render_prompt(kind: str, payload: Mapping) -> str:
    template = load_prompt_template(kind)
    fields = dict(payload)
    if "texts" in fields:
        fields["texts"] = canonical_json(list(fields["texts"]))
    try:
        return template.format(**fields)
    except (KeyError, IndexError) as exc:
        raise InvalidInput(f"payload for {kind!r} is missing field {exc}") from None


def _parse_string_array(content: str) -> Optional[list[str]]:
    try:
        parsed = json.loads(content)
    except json.JSONDecodeError:
        return None
    if not isinstance(parsed, list) or not all(isinstance(x, str) for x in parsed):
        return None
    return parsed


class LlmClient:
    """Chat-completion transport with one repair round and result caching."""

    def __init__(self, cfg: EndpointConfig, meter: BudgetMeter,
                 cache: Optional[ResponseCache] = None,
                 client: Optional[httpx.Client] = None):
        self.cfg = cfg
        self.meter = meter
        self.cache = cache
        self._http = _HttpCaller(cfg, client)

    def _chat(self, messages: list[dict], idempotency_key: str) -> str:
        headers = {"X-Idempotency-Key": idempotency_key}
        key = self.cfg.resolved_api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.cfg.model_name, "messages": messages, "temperature": 0}
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        response = self._http.call("POST", url, json_body=body, headers=headers)
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError):
            raise OracleProtocolError(
                "chat response did not contain choices[0].message.content") from None
        if not isinstance(content, str):
            raise OracleProtocolError("chat message content is not a string")
        return content

    def complete(self, kind: str, payload: Mapping) -> list[str]:
        if kind not in LLM_KINDS:
            raise InvalidInput(f"unknown language-oracle kind {kind!r}")
        digest = canonical_arg_digest(kind, payload)
        if self.cache is not None:
            hit = self.cache.get(kind, digest)
            if hit is not None:
                return json.loads(hit.decode("utf-8"))
        self.meter.charge(kind)
        prompt = render_prompt(kind, payload)
        messages = [{"role": "system", "content": _SYSTEM_PROMPT},
                    {"role": "user", "content": prompt}]
        content = self._chat(messages, digest)
        strings = _parse_string_array(content)
        if strings is None:
            repair = messages + [{"role": "assistant", "content": content},
                                 {"role": "user", "content": _REPAIR_PROMPT}]
            content = self._chat(repair, digest)
            strings = _parse_string_array(content)
            if strings is None:
                logger.warning("unparseable %s reply after repair: %r", kind, content)
                raise OracleProtocolError(
                    f"{kind} reply is not a JSON array of strings after one repair round")
        out: list[str] = []
        seen: set[str] = set()
        for raw in strings:
            text = canonicalize_text(raw)
            if text and text not in seen:
                seen.add(text)
                out.append(text)
        if self.cache is not None:
            self.cache.put(kind, digest, canonical_json(out).encode("utf-8"))
        return out


class RemoteSummarizer:
    def __init__(self, llm: LlmClient):
        self._llm = llm

    def summarize(self, description: Description, l_variants: int, max_words: int) -> list[Description]:
        payload = {"text": description.text, "l": l_variants, "max_words": max_words}
        strings = self._llm.complete("summarize", payload)
        return [Description(s) for s in strings[:l_variants]]


class RemoteGrouper:
    def __init__(self, llm: LlmClient):
        self._llm = llm

    def group(self, descriptions: Sequence[Description], target_count: int) -> list[Description]:
        payload = {"texts": [d.text for d in descriptions], "target_count": target_count}
        strings = self._llm.complete("group", payload)
        return [Description(s) for s in strings[:target_count]]


class RemoteEnricher:
    def __init__(self, llm: LlmClient):
        self._llm = llm

    def enrich(self, description: Description, n_variants: int) -> list[Description]:
        payload = {"text": description.text, "n_variants": n_variants}
        strings = self._llm.complete("enrich", payload)
        return [Description(s) for s in strings[:n_variants]]


# ---------------------------------------------------------------------------
# Model shim (decode / embed_text / embed_image / caption / classify)


class ShimClient:
    """Typed client for the model-shim wire protocol; one instance covers the
    decoder, both encoders, and the target model."""

    def __init__(self, cfg: EndpointConfig, meter: BudgetMeter,
                 cache: Optional[ResponseCache] = None,
                 client: Optional[httpx.Client] = None):
        self.cfg = cfg
        self.meter = meter
        self.cache = cache
        self._http = _HttpCaller(cfg, client)
        self._info: Optional[dict] = None

    def _request(self, kind: str, payload: Mapping) -> Mapping:
        digest = canonical_arg_digest(kind, payload)
        if self.cache is not None:
            hit = self.cache.get(kind, digest)
            if hit is not None:
                return json.loads(hit.decode("utf-8"))
        self.meter.charge(kind)
        url = self.cfg.base_url.rstrip("/") + f"/v1/{kind}"
        response = self._http.call("POST", url, json_body=payload,
                                   headers={"X-Idempotency-Key": digest})
        try:
            body = response.json()
        except json.JSONDecodeError:
            raise OracleProtocolError(f"/v1/{kind} returned non-JSON body") from None
        if not isinstance(body, Mapping):
            raise OracleProtocolError(f"/v1/{kind} returned a non-object body")
        if self.cache is not None:
            self.cache.put(kind, digest, canonical_json(_jsonable(body)).encode("utf-8"))
        return body

    def info(self) -> Mapping:
        if self._info is None:
            url = self.cfg.base_url.rstrip("/") + "/v1/info"
            response = self._http.call("GET", url)
            try:
                body = response.json()
            except json.JSONDecodeError:
                raise OracleProtocolError("/v1/info returned non-JSON body") from None
            if not isinstance(body, Mapping) or "dim" not in body:
                raise OracleProtocolError("/v1/info must carry at least a 'dim' field")
            self._info = dict(body)
        return self._info

    # -- Decoder ------------------------------------------------------------

    def decode(self, description: Description, seed: int, generality_level: float) -> Sample:
        payload = {"description": description.text, "seed": seed,
                   "generality_level": generality_to_skip(generality_level)}
        body = self._request("decode", payload)
        image_b64 = body.get("image_b64")
        if not isinstance(image_b64, str) or not image_b64:
            raise OracleProtocolError("decode response missing non-empty 'image_b64'")
        if body.get("seed") != seed:
            raise OracleProtocolError("decode response seed does not echo the request")
        try:
            raw = base64.b64decode(image_b64, validate=True)
        except (ValueError, TypeError):
            raise OracleProtocolError("decode response 'image_b64' is not valid base64") from None
        if not raw:
            raise OracleProtocolError("decode response payload is empty")
        return Sample(payload=raw, seed=seed, source=description)

    # -- TextEmbedder ---------------------------------------------------------

    def embed_text(self, description: Description) -> Embedding:
        body = self._request("embed_text", {"text": description.text})
        return self._parse_embedding(body, "embed_text")

    # -- ImageEncoder ---------------------------------------------------------

    def embed_image(self, sample: Sample) -> Embedding:
        payload = {"image_b64": base64.b64encode(sample.payload).decode("ascii")}
        body = self._request("embed_image", payload)
        return self._parse_embedding(body, "embed_image")

    def caption(self, sample: Sample) -> Description:
        payload = {"image_b64": base64.b64encode(sample.payload).decode("ascii")}
        body = self._request("caption", payload)
        text = body.get("description")
        if not isinstance(text, str) or not canonicalize_text(text):
            raise OracleProtocolError("caption response missing non-empty 'description'")
        return Description(text)

    def _parse_embedding(self, body: Mapping, kind: str) -> Embedding:
        vec = body.get("embedding")
        dim = body.get("dim")
        if not isinstance(vec, list) or not vec:
            raise OracleProtocolError(f"{kind} response missing 'embedding' array")
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in vec):
            raise OracleProtocolError(f"{kind} embedding must contain only numbers")
        if not isinstance(dim, int) or dim != len(vec):
            raise OracleProtocolError(f"{kind} response 'dim' does not match the vector length")
        return Embedding(vec)  # adapter guarantees unit norm

    # -- TargetModel ------------------------------------------------------------

    def classify(self, sample: Sample) -> ClassLabel:
        payload = {"image_b64": base64.b64encode(sample.payload).decode("ascii")}
        body = self._request("classify", payload)
        label = body.get("label")
        if not isinstance(label, int) or isinstance(label, bool):
            raise OracleProtocolError("classify response 'label' must be an integer")
        return label  # any extra fields (scores etc.) are deliberately ignored

    @property
    def num_classes(self) -> Optional[int]:
        value = self.info().get("num_classes")
        return value if isinstance(value, int) else None


def _jsonable(value):
    """Round a parsed JSON structure into plain dict/list types for canonical
    re-serialization."""
    if isinstance(value, Mapping):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


def build_remote_suite(llm_cfg: EndpointConfig, shim_cfg: EndpointConfig,
                       budgets: Optional[dict[str, int]] = None,
                       cache: Optional[ResponseCache] = None,
                       llm_client: Optional[httpx.Client] = None,
                       shim_client: Optional[httpx.Client] = None):
    """Wire the seven oracles to their services behind one budget meter."""
    from .oracles import OracleSuite  # local import to avoid cycle in type checkers

    if cache is None:
        cache = ResponseCache.from_env()
    meter = BudgetMeter(budgets)
    shim = ShimClient(shim_cfg, meter, cache, shim_client)
    llm = LlmClient(llm_cfg, meter, cache, llm_client)
    return OracleSuite(
        decoder=shim, text_embedder=shim, image_encoder=shim, target=shim,
        summarizer=RemoteSummarizer(llm), grouper=RemoteGrouper(llm),
        enricher=RemoteEnricher(llm), call_budget=meter,
    )
