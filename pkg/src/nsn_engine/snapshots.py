"""
Snapshot manifests for pseudo-label and training-bundle directories.

A snapshot.json lists every file under the directory with its sha256 and a digest over
the whole listing. Once written the directory is treated as immutable; verify_snapshot
detects any later change.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

from nsn_engine.schema_versions import SNAPSHOT_SCHEMA_VERSION

SNAPSHOT_FILE = "snapshot.json"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str | Path, exclude: tuple[str, ...] = (SNAPSHOT_FILE,)) -> dict[str, str]:
    base = Path(root)
    return {
        p.relative_to(base).as_posix(): sha256_file(p)
        for p in sorted(base.rglob("*"))
        if p.is_file() and p.relative_to(base).as_posix() not in exclude
    }


def tree_digest(files: dict[str, str]) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(f"{name}\0{files[name]}\n".encode("utf-8"))
    return h.hexdigest()


def write_snapshot(root: str | Path, **meta: Any) -> Path:
    base = Path(root)
    files = hash_tree(base)
    manifest = {
        "schema_version": SNAPSHOT_SCHEMA_VERSION,
        **meta,
        "files": files,
        "digest": tree_digest(files),
    }
    path = base / SNAPSHOT_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_snapshot(root: str | Path) -> dict[str, Any] | None:
    path = Path(root) / SNAPSHOT_FILE
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def verify_snapshot(root: str | Path) -> bool:
    snap = read_snapshot(root)
    if snap is None:
        return False
    return tree_digest(hash_tree(root)) == snap.get("digest")


def artifact_digest(path: str | Path) -> str | None:
    """sha256 of a file, tree digest of a directory, None when the path does not exist."""
    p = Path(path)
    if p.is_file():
        return sha256_file(p)
    if p.is_dir():
        return tree_digest(hash_tree(p))
    return None


def snapshot_matches(root: str | Path, **expected: Any) -> bool:
    """Intact snapshot whose recorded meta equals `expected` on every given key."""
    snap = read_snapshot(root)
    if snap is None or tree_digest(hash_tree(root)) != snap.get("digest"):
        return False
    return all(snap.get(k) == v for k, v in expected.items())
