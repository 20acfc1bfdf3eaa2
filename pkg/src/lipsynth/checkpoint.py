"""Versioned checkpoint container: a zip archive with a JSON index and one
torch-serialized payload per entry, each checksummed."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile

import torch

from .errors import CheckpointIntegrityError, CheckpointVersionError

CONTAINER_VERSION = 1


def save_checkpoint(entries, path, metadata=None):
    """Write a container. entries: dict name -> picklable payload."""
    index = {"version": CONTAINER_VERSION, "metadata": metadata or {}, "entries": {}}
    blobs = {}
    for name, payload in entries.items():
        buf = io.BytesIO()
        torch.save(payload, buf)
        blob = buf.getvalue()
        fname = f"entries/{name}.pt"
        index["entries"][name] = {
            "file": fname,
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        blobs[fname] = blob
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("index.json", json.dumps(index, indent=1))
        for fname, blob in blobs.items():
            zf.writestr(fname, blob)


def load_checkpoint(path, expected_entries=None):
    """Read a container back; validates version and per-entry checksums."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, FileNotFoundError, OSError) as e:
        raise CheckpointIntegrityError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        try:
            index = json.loads(zf.read("index.json"))
        except KeyError:
            raise CheckpointIntegrityError(f"checkpoint {path} has no index.json") from None
        if index.get("version") != CONTAINER_VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {index.get('version')} unsupported "
                f"(want {CONTAINER_VERSION})"
            )
        entries = {}
        for name, info in index["entries"].items():
            try:
                blob = zf.read(info["file"])
            except (KeyError, zipfile.BadZipFile) as e:
                raise CheckpointIntegrityError(
                    f"entry {name} missing or unreadable in {path}"
                ) from e
            if hashlib.sha256(blob).hexdigest() != info["sha256"]:
                raise CheckpointIntegrityError(f"checksum mismatch for entry {name}")
            entries[name] = torch.load(io.BytesIO(blob), weights_only=False)
        if expected_entries:
            missing = set(expected_entries) - set(entries)
            if missing:
                raise CheckpointIntegrityError(f"missing entries: {sorted(missing)}")
        return entries, index.get("metadata", {})
