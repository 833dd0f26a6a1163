"""HTTP face of the engine.

The service is stateless: every request carries its full inputs inline — the
run manifest (config, oracle wiring, classes, initial descriptions), and for
resumed investigations the serialized trees themselves. Responses carry the
canonical tree text back out, so the caller owns all persistence. This keeps
the service horizontally trivial and makes the CLI a thin file-shuffling
client.
"""

from __future__ import annotations

import json
from typing import Literal, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from .errors import (
    ConfigMismatch, InvalidInput, OracleProtocolError, OracleUnavailable,
    TreeParseError, UniverseConstructionFailed,
)
from .objective import objective_value
from .oracles import ORACLE_KINDS, OracleSuite
from .remote import (
    EndpointConfig, ResponseCache, build_remote_suite, prompt_template_digest,
)
from .search import (
    SearchReport, resume_search, run_search, search_is_complete,
)
from .types import (
    Config, Description, SearchTree, deserialize_tree, serialize_tree,
)
from .universe import UniverseSpec, build_universe, brute_force_optimum, candidate_count

BRUTE_FORCE_CANDIDATE_LIMIT = 10 ** 6
IMAGENET_PRESET = "imagenet-1000"


def load_preset_descriptions(name: str) -> list[str]:
    if name != IMAGENET_PRESET:
        raise InvalidInput(f"unknown initial-description preset {name!r}")
    from importlib import resources
    text = resources.files("domainscout.data").joinpath("imagenet_1000.txt").read_text("utf-8")
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if len(lines) != 1000:
        raise InvalidInput("bundled imagenet-1000 word list is corrupt")
    return lines


# ---------------------------------------------------------------------------
# Wire models


class EndpointModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    base_url: str
    api_key: Optional[str] = None
    model_name: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    max_inflight: int = 4

    def to_config(self) -> EndpointConfig:
        return EndpointConfig(**self.model_dump())


class ManifestModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: dict = Field(default_factory=dict)
    oracle_mode: Literal["synthetic", "remote"]
    universe: Optional[dict] = None
    llm_endpoint: Optional[EndpointModel] = None
    shim_endpoint: Optional[EndpointModel] = None
    budgets: Optional[dict[str, int]] = None
    cache_dir: Optional[str] = None
    classes: list[int] = Field(min_length=1)
    initial_descriptions: list[str] | str


class InvestigateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    manifest: ManifestModel
    resume_trees: Optional[dict[str, str]] = None


class ClassResult(BaseModel):
    class_label: int
    best_description: Optional[str]
    tree: str
    report: dict
    partial: bool


class InvestigateResponse(BaseModel):
    results: list[ClassResult]
    partial: bool
    config_digest: str
    prompt_digests: Optional[dict[str, str]] = None


class EvaluateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    manifest: ManifestModel
    class_label: int
    description: str


class EvaluateResponse(BaseModel):
    relevance: float
    penalty: float
    lambda_: float = Field(serialization_alias="lambda")
    value: float


class BruteForceRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    universe: dict
    class_label: int
    config: dict = Field(default_factory=dict)
    lambda_override: Optional[float] = Field(default=None, alias="lambda")
    seed_count: int = 64


class BruteForceResponse(BaseModel):
    best_description: str
    relevance: float
    penalty: float
    value: float
    candidates_evaluated: int


class ReportRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    tree: Optional[str] = None
    report: Optional[dict] = None


class ReportResponse(BaseModel):
    text: str
    partial: bool


# ---------------------------------------------------------------------------
# Manifest plumbing


def resolve_initial_descriptions(value: list[str] | str) -> list[Description]:
    if isinstance(value, str):
        names = load_preset_descriptions(value) if value == IMAGENET_PRESET else [value]
    else:
        names = value
    if not names:
        raise InvalidInput("initial_descriptions must be non-empty")
    return [Description(name) for name in names]


def build_suite(manifest: ManifestModel) -> tuple[Config, OracleSuite, Optional[UniverseSpec]]:
    cfg = Config.from_dict(manifest.config)
    if manifest.oracle_mode == "synthetic":
        if manifest.universe is None:
            raise InvalidInput("synthetic mode requires a 'universe' object")
        if manifest.llm_endpoint or manifest.shim_endpoint:
            raise InvalidInput("synthetic mode must not declare endpoints")
        spec = UniverseSpec.from_dict(manifest.universe)
        for label in manifest.classes:
            if not 0 <= label <= spec.background_label:
                raise InvalidInput(f"class {label} out of range for this universe")
        return cfg, build_universe(spec, manifest.budgets), spec
    if manifest.universe is not None:
        raise InvalidInput("remote mode must not embed a universe")
    if manifest.llm_endpoint is None or manifest.shim_endpoint is None:
        raise InvalidInput("remote mode requires 'llm_endpoint' and 'shim_endpoint'")
    for label in manifest.classes:
        if label < 0:
            raise InvalidInput("class labels must be non-negative")
    cache = ResponseCache(manifest.cache_dir) if manifest.cache_dir else ResponseCache.from_env()
    suite = build_remote_suite(manifest.llm_endpoint.to_config(),
                               manifest.shim_endpoint.to_config(),
                               budgets=manifest.budgets, cache=cache)
    return cfg, suite, None


# ---------------------------------------------------------------------------
# Report rendering


def _progression_lines(tree: SearchTree) -> list[str]:
    by_depth: dict[int, tuple[int, float]] = {}
    for node in tree.nodes.values():
        if node.relevance is not None:
            count, best = by_depth.get(node.depth, (0, -1.0))
            by_depth[node.depth] = (count + 1, max(best, node.relevance.value))
    return [f"  depth {d}: {by_depth[d][0]} scored, best relevance {by_depth[d][1]:.4f}"
            for d in sorted(by_depth)]


def _frequency_lines(tree: SearchTree, limit: int = 10) -> list[str]:
    counts: dict[str, int] = {}
    for node in tree.nodes.values():
        counts[node.description.text] = counts.get(node.description.text, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:limit]
    return [f"  {count:4d}x {text}" for text, count in ranked]


def render_report_text(tree: Optional[SearchTree], report: Optional[dict]) -> tuple[str, bool]:
    if tree is None and report is None:
        raise InvalidInput("report rendering needs a tree or a report object")
    partial = False
    if report is not None:
        partial = bool(report.get("partial"))
    if tree is not None:
        partial = partial or not search_is_complete(tree)
    lines: list[str] = []
    title = "investigation report"
    if partial:
        title += "  [PARTIAL]"
    lines.append(title)
    if tree is not None:
        lines.append(f"config digest: {tree.config.digest()}")
        lines.append(f"iterations completed: {tree.iteration}")
        lines.append(f"nodes: {len(tree.nodes)} ({len(tree.frontier)} pending)")
    if report is not None and report.get("best_description") is not None:
        obj = report.get("best_objective") or {}
        lines.append(f"best description: {report['best_description']!r} "
                     f"(value {obj.get('value', float('nan')):.6f})")
    if report is not None and report.get("candidates"):
        lines.append("")
        lines.append("ranked candidates:")
        lines.append("  rank      value  relevance    penalty  node  description")
        for rank, cand in enumerate(report["candidates"], start=1):
            o = cand["objective"]
            lines.append(f"  {rank:4d} {o['value']:10.6f} {o['relevance']:10.6f} "
                         f"{o['penalty']:10.6f}  {cand['node_id']:4d}  {cand['description']}")
    if tree is not None:
        lines.append("")
        lines.append("relevance progression by depth:")
        lines.extend(_progression_lines(tree))
        lines.append("")
        lines.append("most frequent node descriptions:")
        lines.extend(_frequency_lines(tree))
    if report is not None and report.get("budget_spent"):
        lines.append("")
        lines.append("oracle calls spent:")
        spent = report["budget_spent"]
        for kind in ORACLE_KINDS:
            if spent.get(kind):
                lines.append(f"  {kind}: {spent[kind]}")
    return "\n".join(lines) + "\n", partial


# ---------------------------------------------------------------------------
# Application


def create_app() -> FastAPI:
    app = FastAPI(title="domainscout", docs_url=None, redoc_url=None)

    def _error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=status,
                            content={"error": {"code": code, "message": message}})

    @app.exception_handler(InvalidInput)
    @app.exception_handler(TreeParseError)
    @app.exception_handler(ConfigMismatch)
    @app.exception_handler(UniverseConstructionFailed)
    async def _bad_request(request: Request, exc: Exception):
        return _error(400, type(exc).__name__, str(exc))

    @app.exception_handler(OracleUnavailable)
    async def _unavailable(request: Request, exc: Exception):
        return _error(502, "OracleUnavailable", str(exc))

    @app.exception_handler(OracleProtocolError)
    async def _protocol(request: Request, exc: Exception):
        return _error(502, "OracleProtocolError", str(exc))

    @app.get("/health")
    async def health():
        return {"status": "ok"}

    @app.post("/v1/investigations", response_model=InvestigateResponse)
    async def investigate(req: InvestigateRequest) -> InvestigateResponse:
        cfg, suite, _spec = build_suite(req.manifest)
        initial = resolve_initial_descriptions(req.manifest.initial_descriptions)
        resume_trees = req.resume_trees or {}
        results: list[ClassResult] = []
        for label in req.manifest.classes:
            stored = resume_trees.get(str(label))
            if stored is not None:
                tree = deserialize_tree(stored)
                report: SearchReport = resume_search(tree, cfg, suite, label)
            else:
                report = run_search(initial, label, cfg, suite)
            results.append(ClassResult(
                class_label=label,
                best_description=None if report.best_description is None
                else report.best_description.text,
                tree=serialize_tree(report.tree),
                report=report.to_dict(),
                partial=report.partial,
            ))
        digests = None
        if req.manifest.oracle_mode == "remote":
            digests = {kind: prompt_template_digest(kind)
                       for kind in ("summarize", "group", "enrich")}
        return InvestigateResponse(
            results=results, partial=any(r.partial for r in results),
            config_digest=cfg.digest(), prompt_digests=digests,
        )

    @app.post("/v1/evaluate", response_model=EvaluateResponse, response_model_by_alias=True)
    async def evaluate(req: EvaluateRequest) -> EvaluateResponse:
        cfg, suite, spec = build_suite(req.manifest)
        if spec is not None and not 0 <= req.class_label <= spec.background_label:
            raise InvalidInput(f"class {req.class_label} out of range for this universe")
        value = objective_value(Description(req.description), req.class_label, cfg, suite)
        return EvaluateResponse(relevance=value.relevance, penalty=value.penalty,
                                lambda_=value.lambda_, value=value.value)

    @app.post("/v1/brute-force", response_model=BruteForceResponse)
    async def brute_force(req: BruteForceRequest) -> BruteForceResponse:
        spec = UniverseSpec.from_dict(req.universe)
        cfg_fields = dict(req.config)
        if req.lambda_override is not None:
            cfg_fields["lambda"] = req.lambda_override
        cfg = Config.from_dict(cfg_fields)
        total = candidate_count(spec.vocab_size, spec.max_tokens)
        if total > BRUTE_FORCE_CANDIDATE_LIMIT:
            raise InvalidInput(
                f"universe has {total} candidate descriptions, over the "
                f"{BRUTE_FORCE_CANDIDATE_LIMIT} enumeration limit")
        if req.seed_count < 1:
            raise InvalidInput("seed_count must be >= 1")
        if not 0 <= req.class_label <= spec.background_label:
            raise InvalidInput(f"class {req.class_label} out of range for this universe")
        result = brute_force_optimum(spec, req.class_label, cfg,
                                     list(range(req.seed_count)))
        best = result.best
        return BruteForceResponse(
            best_description=best.description.text, relevance=best.relevance,
            penalty=best.penalty, value=best.value,
            candidates_evaluated=result.candidates_evaluated,
        )

    @app.post("/v1/report", response_model=ReportResponse)
    async def report(req: ReportRequest) -> ReportResponse:
        tree = deserialize_tree(req.tree) if req.tree is not None else None
        if req.tree is None and req.report is None:
            raise InvalidInput("provide 'tree' and/or 'report'")
        text, partial = render_report_text(tree, req.report)
        return ReportResponse(text=text, partial=partial)

    return app


app = create_app()
