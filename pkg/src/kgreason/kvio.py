"""Flat `key = value` files: configs and run manifests."""

from __future__ import annotations

from pathlib import Path


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse a flat key-value file. Blank lines and `#` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_kv(path: str | Path, mapping: dict[str, object]) -> None:
    lines = [f"{k} = {v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
