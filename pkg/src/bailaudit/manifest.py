"""Run manifests: provenance sidecars for every artifact-producing command.

A manifest records the command line, content hashes of every
configuration input (templates, lexicons, parser rules, backend
descriptor), seeds, timestamps, and stage counts.  The manifest id is a
content hash over everything except the timestamps, so re-running a
stage with identical inputs yields the same id.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_manifest(
    artifact_path: str | Path,
    command: str,
    argv: list[str],
    config_hashes: dict[str, str] | None = None,
    backend: dict | None = None,
    seeds: dict[str, int] | None = None,
    counts: dict[str, int] | None = None,
    extra: dict | None = None,
) -> str:
    """Write ``<artifact>.manifest.json`` and return the manifest id."""
    body = {
        "command": command,
        "argv": argv,
        "artifact": str(artifact_path),
        "config_hashes": config_hashes or {},
        "backend": backend,
        "seeds": seeds or {},
        "counts": counts or {},
    }
    if extra:
        body.update(extra)
    manifest_id = hashlib.sha256(
        json.dumps(body, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()[:16]
    body["manifest_id"] = manifest_id
    body["created_at"] = datetime.now(timezone.utc).isoformat()
    manifest_path(artifact_path).write_text(
        json.dumps(body, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    return manifest_id


def manifest_path(artifact_path: str | Path) -> Path:
    path = Path(artifact_path)
    return path.with_name(path.name + ".manifest.json")


def read_manifest_id(artifact_path: str | Path) -> str | None:
    """Manifest id for an artifact, or None when no sidecar exists."""
    path = manifest_path(artifact_path)
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8")).get("manifest_id")
    except (OSError, json.JSONDecodeError):
        return None


def read_manifest(artifact_path: str | Path) -> dict | None:
    path = manifest_path(artifact_path)
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
