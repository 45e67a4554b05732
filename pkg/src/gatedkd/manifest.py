"""Experiment manifest: a content-addressed index of every artifact a run
produced, plus hashes of the configs that produced them.

The manifest is the re-run contract: given the same configs (verified by
hash) the recorded artifacts should reproduce bit for bit. Updates merge —
each pipeline stage adds its own entries — and land via write-then-rename
so a crashed command never leaves a torn file. No timestamps anywhere;
rewriting identical state yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os

from gatedkd.errors import ValidationError

FORMAT_VERSION = 1


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(payload: dict) -> str:
    """Hash of the canonical (sorted, compact) JSON form of a config."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def load_manifest(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not a valid manifest: {exc}") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"{path} has unsupported manifest version {payload.get('format_version')!r}")
    return payload


def update_manifest(path: str, experiment: str, artifacts: dict[str, str],
                    configs: dict[str, dict] | None = None) -> dict:
    """Merge new artifact/config entries into the manifest at ``path``.

    ``artifacts`` maps entry names to file paths (hashed here, stored
    relative to the manifest's directory when possible). ``configs`` maps
    names to JSON-able payloads, stored with their canonical hash.
    """
    if os.path.exists(path):
        manifest = load_manifest(path)
    else:
        manifest = {"format_version": FORMAT_VERSION, "experiment": experiment,
                    "artifacts": {}, "configs": {}}
    manifest["experiment"] = experiment
    base = os.path.dirname(os.path.abspath(path))
    for name, artifact_path in artifacts.items():
        full = os.path.abspath(artifact_path)
        try:
            stored = os.path.relpath(full, base)
        except ValueError:  # different drive on some platforms
            stored = full
        manifest["artifacts"][name] = {"path": stored, "sha256": file_sha256(artifact_path)}
    for name, payload in (configs or {}).items():
        manifest["configs"][name] = {"hash": config_hash(payload), "values": payload}

    os.makedirs(base, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
    return manifest


def verify_manifest(path: str) -> dict[str, bool]:
    """Re-hash every recorded artifact; True where the file still matches."""
    manifest = load_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    for name, entry in manifest["artifacts"].items():
        full = entry["path"]
        if not os.path.isabs(full):
            full = os.path.join(base, full)
        try:
            out[name] = file_sha256(full) == entry["sha256"]
        except OSError:
            out[name] = False
    return out
