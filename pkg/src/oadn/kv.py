"""Plain ``key=value`` text files (manifests, config files, audit records)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping


class KVError(ValueError):
    pass


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped.

    Later keys override earlier ones.  Values are returned as stripped strings.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise KVError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise KVError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise KVError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    return parse_kv(text, str(path))


def format_kv(values: Mapping[str, object]) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return "none" if v is None else str(v)


def write_kv(path: str | Path, values: Mapping[str, object]) -> Path:
    path = Path(path)
    path.write_text(format_kv(values))
    return path
