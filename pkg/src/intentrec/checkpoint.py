"""Exact-roundtrip tensor checkpoints.

Line-based text format with a versioned header: `meta <key> <value>` lines, then
per tensor a `tensor <name> <dim0> <dim1> ...` line followed by one line of
row-major values in C float hex (lossless for float64).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError

HEADER = "intentrec-tensors v1"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [HEADER]
    for key in sorted(meta or {}):
        value = str((meta or {})[key])
        if any(c in key for c in " \n") or "\n" in value:
            raise ValidationError(f"illegal meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValidationError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        dims = " ".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {dims}".rstrip())
        lines.append(" ".join(float.hex(float(x)) for x in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != HEADER:
        raise ValidationError(f"{path}: not a {HEADER!r} checkpoint")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
            i += 1
        elif kind == "tensor":
            parts = rest.split()
            name, shape = parts[0], tuple(int(d) for d in parts[1:])
            if i + 1 >= len(lines):
                raise ValidationError(f"{path}: truncated tensor {name!r}")
            raw = lines[i + 1].split()
            values = np.array([float.fromhex(tok) for tok in raw], dtype=np.float64)
            size = int(np.prod(shape)) if shape else 1
            if values.size != size:
                raise ValidationError(
                    f"{path}: tensor {name!r} expected {size} values, got {values.size}"
                )
            tensors[name] = values.reshape(shape)
            i += 2
        else:
            raise ValidationError(f"{path}:{i + 1}: unrecognized line {line!r}")
    return tensors, meta
