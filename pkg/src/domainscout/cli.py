"""Command-line client.

All commands talk to the HTTP service — by default an in-process instance,
or a live one when --server is given — so the CLI contains no engine logic.
It resolves file references in the manifest, ships everything inline, and
writes the response artifacts to disk byte-stably.

Exit codes: 0 success, 2 usage/validation, 3 partial (budget exhausted),
4 oracle or service unavailable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3
EXIT_UNAVAILABLE = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Transport


class ServiceClient:
    """POSTs to either a live server or an in-process app instance."""

    def __init__(self, server: Optional[str] = None):
        if server:
            import httpx
            self._client = httpx.Client(base_url=server.rstrip("/"), timeout=None)
        else:
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # host testclient shim warns on import
                from fastapi.testclient import TestClient
            from .service import create_app
            self._client = TestClient(create_app(), raise_server_exceptions=False)

    def post(self, path: str, payload: dict) -> tuple[int, Any]:
        try:
            resp = self._client.post(path, json=payload)
        except Exception as exc:  # connection refused, DNS, timeout, ...
            raise CliError(f"service unreachable: {exc}", EXIT_UNAVAILABLE)
        try:
            body = resp.json()
        except ValueError:
            body = {"error": {"code": "BadResponse", "message": resp.text[:500]}}
        return resp.status_code, body


def raise_for_error(status: int, body: Any) -> None:
    if status == 200:
        return
    if isinstance(body, dict) and "error" in body:
        err = body["error"]
        message = f"{err.get('code', 'Error')}: {err.get('message', '')}"
    elif isinstance(body, dict) and "detail" in body:
        message = f"validation: {json.dumps(body['detail'])[:500]}"
    else:
        message = f"HTTP {status}"
    if status in (400, 422):
        raise CliError(message, EXIT_VALIDATION)
    if status in (502, 503, 504):
        raise CliError(message, EXIT_UNAVAILABLE)
    raise CliError(message, EXIT_VALIDATION)


# ---------------------------------------------------------------------------
# File helpers


def load_json_file(path: Path, what: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(f"{what} not found: {path}")
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {what} {path}: {exc}")


def load_manifest(path: Path) -> dict:
    """Load a run manifest, inlining any file references (resolved relative
    to the manifest's own directory) so the request is self-contained."""
    raw = load_json_file(path, "manifest")
    if not isinstance(raw, dict):
        raise CliError(f"manifest {path} must be a JSON object")
    base = path.parent
    for ref, inline in (("universe_file", "universe"),
                        ("llm_endpoint_file", "llm_endpoint"),
                        ("shim_endpoint_file", "shim_endpoint")):
        if ref in raw:
            if inline in raw:
                raise CliError(f"manifest has both {ref!r} and {inline!r}")
            raw[inline] = load_json_file(base / raw.pop(ref), ref)
    return raw


def write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# Commands


def cmd_investigate(args: argparse.Namespace) -> int:
    manifest = load_manifest(Path(args.manifest))
    out_dir = Path(args.out)
    payload: dict[str, Any] = {"manifest": manifest}
    if args.resume:
        classes = manifest.get("classes")
        if not isinstance(classes, list):
            raise CliError("manifest 'classes' must be a list")
        resumable = {}
        for label in classes:
            tree_path = out_dir / f"class_{label}.tree.json"
            if tree_path.exists():
                resumable[str(label)] = tree_path.read_text("utf-8")
        if resumable:
            payload["resume_trees"] = resumable
    status, body = ServiceClient(args.server).post("/v1/investigations", payload)
    raise_for_error(status, body)

    out_dir.mkdir(parents=True, exist_ok=True)
    summary_classes: dict[str, Optional[str]] = {}
    for result in body["results"]:
        label = result["class_label"]
        write_text(out_dir / f"class_{label}.tree.json", result["tree"])
        write_text(out_dir / f"class_{label}.report.json", dump_json(result["report"]))
        summary_classes[str(label)] = result["best_description"]
    summary: dict[str, Any] = {
        "classes": summary_classes,
        "partial": body["partial"],
        "config_digest": body["config_digest"],
    }
    if body.get("prompt_digests"):
        summary["prompt_digests"] = body["prompt_digests"]
    write_text(out_dir / "summary.json", dump_json(summary))
    for label, best in summary_classes.items():
        state = "partial, no selection" if best is None else best
        print(f"class {label}: {state}")
    if body["partial"]:
        print("run is PARTIAL (budget exhausted); re-run with --resume after "
              "raising budgets", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = load_manifest(Path(args.manifest))
    payload = {"manifest": manifest, "class_label": args.class_label,
               "description": args.description}
    status, body = ServiceClient(args.server).post("/v1/evaluate", payload)
    raise_for_error(status, body)
    print(dump_json(body), end="")
    return EXIT_OK


def cmd_brute_force(args: argparse.Namespace) -> int:
    universe = load_json_file(Path(args.universe), "universe file")
    payload: dict[str, Any] = {"universe": universe, "class_label": args.class_label}
    if args.lambda_ is not None:
        payload["lambda"] = args.lambda_
    if args.config is not None:
        payload["config"] = load_json_file(Path(args.config), "config file")
    if args.seed_count is not None:
        payload["seed_count"] = args.seed_count
    status, body = ServiceClient(args.server).post("/v1/brute-force", payload)
    raise_for_error(status, body)
    print(dump_json(body), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    tree_path = Path(args.tree)
    loaded = load_json_file(tree_path, "tree file")
    payload: dict[str, Any] = {}
    if isinstance(loaded, dict) and "nodes" in loaded:
        payload["tree"] = json.dumps(loaded)
        # investigate writes the report next to the tree; fold it in if present
        name = tree_path.name
        if name.endswith(".tree.json"):
            sibling = tree_path.with_name(name[:-len(".tree.json")] + ".report.json")
            if sibling.exists():
                payload["report"] = load_json_file(sibling, "report file")
    elif isinstance(loaded, dict) and "candidates" in loaded:
        payload["report"] = loaded
    else:
        raise CliError(f"{tree_path} is neither a tree nor a report file")
    status, body = ServiceClient(args.server).post("/v1/report", payload)
    raise_for_error(status, body)
    print(body["text"], end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domainscout",
        description="Infer what image domain a black-box classifier was trained on.")
    parser.add_argument("--server", default=None,
                        help="URL of a running service (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("investigate", help="run the search for each class in a manifest")
    p.add_argument("--manifest", required=True, help="run manifest JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", action="store_true",
                   help="resume from tree files already in the output directory")
    p.set_defaults(func=cmd_investigate)

    p = sub.add_parser("evaluate", help="score one description against one class")
    p.add_argument("--manifest", required=True)
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--description", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("brute-force",
                       help="exact argmax over every candidate description")
    p.add_argument("--universe", required=True, help="universe spec JSON file")
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p.add_argument("--config", default=None, help="search config JSON file")
    p.add_argument("--seed-count", type=int, default=None)
    p.set_defaults(func=cmd_brute_force)

    p = sub.add_parser("report", help="render a tree/report file as text")
    p.add_argument("--tree", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
