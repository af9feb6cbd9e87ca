import hashlib
import json
from pathlib import Path
from typing import Any


def canonical_json(obj: Any, indent: int | None = None) -> str:
    """Stable JSON text: sorted keys, no ASCII escaping, fixed separators."""
    if indent is None:
        return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=indent)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def derive_seed(seed: int, key: str) -> int:
    """A per-item seed that depends only on the run seed and the item key."""
    return int(sha256_text(f"{seed}:{key}")[:16], 16)


def safe_filename(key: str) -> str:
    cleaned = "".join(c if c.isalnum() or c in "-_." else "_" for c in key)
    if cleaned == key and key not in ("", ".", ".."):
        return key
    # suffix keeps distinct keys distinct after cleaning
    return f"{cleaned}-{sha256_text(key)[:8]}"
