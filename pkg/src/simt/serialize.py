"""File formats shared by the harness and the CLI.

Matrices go to CSV with 17 significant digits so float64 values survive
a round trip exactly; everything else is plain JSON (Python's json keeps
shortest-roundtrip float encoding, which is also lossless).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .linalg import as_matrix


def matrix_to_csv(m: np.ndarray, path) -> None:
    m = np.asarray(m, dtype=np.float64)
    lines = [",".join(f"{v:.17g}" for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def matrix_from_csv(path) -> np.ndarray:
    text = Path(path).read_text().strip()
    rows = [[float(v) for v in line.split(",")] for line in text.splitlines()]
    return as_matrix(rows, name=str(path))


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
