"""Pinned CSV dialect with a manifest block.

Every file starts with ``#``-prefixed manifest lines echoing the resolved
configuration and a sha256 hash of it, followed by a header row and data
rows.  Floats are written with ``repr`` so files are bit-exact.
"""
from __future__ import annotations

import hashlib
import os
from typing import Iterable, Mapping, Sequence


def format_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    try:
        import numpy as np
        if isinstance(v, np.floating):
            return repr(float(v))
        if isinstance(v, np.integer):
            return str(int(v))
        if isinstance(v, np.bool_):
            return "1" if bool(v) else "0"
    except ImportError:  # pragma: no cover
        pass
    return str(v)


def manifest_text(manifest: Mapping[str, object]) -> str:
    """Canonical ``key = value`` text of a manifest (sorted keys)."""
    return "".join(f"{k} = {format_value(manifest[k])}\n" for k in sorted(manifest))


def content_hash(manifest: Mapping[str, object]) -> str:
    return hashlib.sha256(manifest_text(manifest).encode("utf-8")).hexdigest()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[object]],
              manifest: Mapping[str, object]) -> str:
    """Write a CSV file with manifest block; returns the path."""
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    lines = [f"# {line}" for line in manifest_text(manifest).splitlines()]
    lines.append(f"# content_sha256 = {content_hash(manifest)}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_csv(path: str):
    """Return ``(manifest, header, rows)`` with rows as lists of strings."""
    manifest = {}
    header = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if " = " in body:
                    k, v = body.split(" = ", 1)
                    manifest[k] = v
                continue
            if header is None:
                header = line.split(",")
            else:
                rows.append(line.split(","))
    return manifest, header, rows
