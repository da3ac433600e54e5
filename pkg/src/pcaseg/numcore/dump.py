"""Plain-text tensor dump: a ``shape:`` header followed by row-major values.

Values are written with ``repr`` so a dump/load round trip is bit-exact.
"""

from __future__ import annotations

from typing import IO, List

import numpy as np

from .tensor import Tensor


def dumps(t: Tensor) -> str:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    lines = ["shape: " + " ".join(str(d) for d in arr.shape) if arr.ndim else "shape:"]
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim else arr.reshape(1, 1)
    for row in rows:
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def write_tensor(fh: IO[str], t: Tensor) -> None:
    fh.write(dumps(t))


def read_tensor(fh: IO[str]) -> Tensor:
    header = fh.readline()
    if not header.startswith("shape:"):
        raise ValueError(f"expected 'shape:' header, got {header[:40]!r}")
    shape = tuple(int(tok) for tok in header[len("shape:"):].split())
    n = int(np.prod(shape)) if shape else 1
    values: List[float] = []
    while len(values) < n:
        line = fh.readline()
        if not line:
            raise ValueError(f"truncated tensor: expected {n} values, got {len(values)}")
        values.extend(float(tok) for tok in line.split())
    if len(values) != n:
        raise ValueError(f"tensor body has {len(values)} values, header says {n}")
    return Tensor(np.array(values, dtype=np.float64).reshape(shape))


def loads(text: str) -> Tensor:
    import io

    return read_tensor(io.StringIO(text))
