"""Run directories: atomic writes, metrics log, checkpoints and manifest.

Layout of a run directory::

    config.snapshot      canonical key = value config
    metrics.jsonl        one JSON object per iteration
    checkpoint-<i>.bin   network + optimizer state
    manifest.json        sha256 and size of every file above, plus final eval
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

from ..nn import checkpoint_bytes, load_checkpoint_bytes

HASH_ALGORITHM = "sha256"
MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class IntegrityError(RuntimeError):
    pass


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class MetricsWriter:
    """Append-only JSONL; each record goes out in a single write and is fsynced."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.touch(exist_ok=True)

    def append(self, record: dict) -> None:
        line = (json.dumps(record, sort_keys=True, allow_nan=False) + "\n").encode()
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)
        try:
            os.write(fd, line)
            os.fsync(fd)
        finally:
            os.close(fd)


def read_metrics(path: str | Path) -> list[dict]:
    """Parse complete lines; a trailing line without newline (a torn write) is ignored."""
    text = Path(path).read_text()
    lines = text.split("\n")
    return [json.loads(line) for line in lines[:-1] if line.strip()]


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def write_config(self, snapshot: str) -> None:
        atomic_write(self.root / "config.snapshot", snapshot.encode())

    def metrics(self) -> MetricsWriter:
        return MetricsWriter(self.root / "metrics.jsonl")

    def save_checkpoint(self, name: str, net, opt, extra: dict | None = None) -> Path:
        path = self.root / name
        atomic_write(path, checkpoint_bytes(net, opt, extra))
        return path

    def write_manifest(self, extra: dict | None = None) -> dict:
        files = {}
        for p in sorted(self.root.iterdir()):
            if p.is_file() and p.name != MANIFEST and not p.name.startswith("."):
                files[p.name] = {"sha256": file_hash(p), "bytes": p.stat().st_size}
        manifest = {"manifest_version": MANIFEST_VERSION, "hash_algorithm": HASH_ALGORITHM, "files": files}
        manifest.update(extra or {})
        atomic_write(self.root / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        return manifest

    def read_manifest(self) -> dict:
        path = self.root / MANIFEST
        if not path.is_file():
            raise FileNotFoundError(f"no manifest in {self.root}")
        return json.loads(path.read_text())

    def verify(self, name: str) -> bytes:
        """Read ``name`` and check it against the manifest hash."""
        entry = self.read_manifest()["files"].get(name)
        if entry is None:
            raise IntegrityError(f"{name} is not listed in the manifest")
        data = (self.root / name).read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"hash mismatch for {name}")
        return data

    def load_checkpoint(self, name: str):
        return load_checkpoint_bytes(self.verify(name))
