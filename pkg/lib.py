"""Artifact directory and hashing utilities."""

from hashlib import sha256
import json
from pathlib import Path
from shutil import rmtree
from typing import Any

from gridleak.log import log


# Characters of the SHA-256 digest used in directory names
HASH_LENGTH = 12


def canonical_json(value: Any) -> str:
    """Serialize with sorted keys and no whitespace."""
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=True
    )


def config_hash(value: Any, *upstream: str) -> str:
    """
    Short SHA-256 of a configuration section.

    Hashes of the stages it depends on are folded in, so editing an
    upstream section changes every downstream hash.
    """
    digest = sha256(canonical_json(value).encode("utf-8"))
    for parent in upstream:
        digest.update(b"\0")
        digest.update(parent.encode("utf-8"))
    return digest.hexdigest()[:HASH_LENGTH]


def stage_dir(out: Path, stage_hash: str, stage: str) -> Path:
    """``<out>/<stage_hash>/<stage>``."""
    return out / stage_hash / stage


def rm_path(path: Path) -> None:
    """Delete a file or directory tree."""
    if path.exists():
        log.info("Deleting existing %s", path)
        if path.is_dir():
            rmtree(path)
        else:
            path.unlink()
