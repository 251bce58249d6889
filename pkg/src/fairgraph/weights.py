"""Versioned plain-text weight files shared by the GCN and the denoiser.

Layout::

    fairgraph-weights v1
    kind <model kind>
    meta <key> <value>          (zero or more)
    array <name> <dim> <dim>... (one per tensor, row-major values follow)
    <one line per leading-axis slice, values as shortest round-trip reprs>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "fairgraph-weights v1"


class WeightFileError(ValueError):
    pass


def save_weights(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    lines = [MAGIC, f"kind {kind}"]
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {value}")
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        lines.append(f"array {name} " + " ".join(str(d) for d in a.shape))
        rows = a.reshape(a.shape[0] if a.ndim else 1, -1)
        lines += [" ".join(repr(float(x)) for x in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def load_weights(path) -> tuple[str, dict, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise WeightFileError(f"{path}: not a {MAGIC!r} file")
    if not lines[1].startswith("kind "):
        raise WeightFileError(f"{path}:2: missing kind line")
    kind = lines[1].split(maxsplit=1)[1]
    meta, arrays = {}, {}
    pos = 2
    while pos < len(lines):
        parts = lines[pos].split()
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            pos += 1
        elif parts[0] == "array":
            name, shape = parts[1], tuple(int(d) for d in parts[2:])
            n_rows = shape[0] if shape else 1
            vals = []
            for row in lines[pos + 1:pos + 1 + n_rows]:
                vals.extend(float(x) for x in row.split())
            if len(vals) != int(np.prod(shape)):
                raise WeightFileError(f"{path}:{pos + 1}: array {name} has {len(vals)} values for shape {shape}")
            arrays[name] = np.asarray(vals, dtype=np.float64).reshape(shape)
            pos += 1 + n_rows
        else:
            raise WeightFileError(f"{path}:{pos + 1}: unexpected line {lines[pos][:40]!r}")
    return kind, arrays, meta
