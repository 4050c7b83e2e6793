"""Periodic grids on T^3, trilinear interpolation as a sparse operator, field files.

Nodes sit at ``(i, j, k) / n`` and are stored row-major, flat index
``(i * n + j) * n + k``.

Field files are little-endian: a UTF-8 text header of ``key = value`` lines
closed by ``end``, then ``ncomp`` row-major float64 grids of ``n^3`` values.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .torus import wrap

MAGIC = "dalab-field 1"
_CORNERS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])


class PeriodicGrid:
    def __init__(self, n: int):
        if int(n) < 2:
            raise ValueError("grid resolution must be >= 2")
        self.n = int(n)

    @property
    def size(self) -> int:
        return self.n**3

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    def nodes(self) -> np.ndarray:
        i = np.arange(self.n) / self.n
        X, Y, Z = np.meshgrid(i, i, i, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def interpolation_matrix(self, points) -> sp.csr_matrix:
        """Sparse ``(len(points), n^3)`` operator of periodic trilinear interpolation."""
        n = self.n
        s = wrap(np.asarray(points, dtype=float)) * n
        base = np.floor(s).astype(np.int64)
        t = s - base
        rows = np.repeat(np.arange(s.shape[0]), 8)
        idx = (base[:, None, :] + _CORNERS[None]) % n  # (m, 8, 3)
        cols = ((idx[..., 0] * n + idx[..., 1]) * n + idx[..., 2]).ravel()
        w = np.where(_CORNERS[None] == 1, t[:, None, :], 1.0 - t[:, None, :]).prod(axis=2)
        return sp.csr_matrix((w.ravel(), (rows, cols)), shape=(s.shape[0], self.size))

    def interpolate(self, values, points) -> np.ndarray:
        """Interpolate node values of shape ``(n^3,)`` or ``(n^3, c)`` at ``points``."""
        return self.interpolation_matrix(points) @ np.asarray(values)


def write_field(path, header: dict, grids: np.ndarray) -> None:
    """Write ``grids`` of shape ``(ncomp, n^3)``; ``header`` values are JSON-encoded."""
    grids = np.ascontiguousarray(grids, dtype="<f8")
    if grids.ndim != 2:
        raise ValueError("grids must have shape (ncomp, n^3)")
    n = round(grids.shape[1] ** (1 / 3))
    if n**3 != grids.shape[1]:
        raise ValueError("grid length is not a cube")
    lines = [MAGIC, f"resolution = {n}", f"ncomp = {grids.shape[0]}"]
    for key, val in header.items():
        if key in ("resolution", "ncomp"):
            continue
        lines.append(f"{key} = {json.dumps(val, sort_keys=True)}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(grids.tobytes())


def read_field(path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    header = {}
    pos = 0
    first = True
    while True:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("utf-8")
        pos = end + 1
        if first:
            if line != MAGIC:
                raise ValueError(f"not a field file: {path}")
            first = False
            continue
        if line == "end":
            break
        key, _, val = line.partition(" = ")
        header[key] = json.loads(val)
    n, ncomp = int(header["resolution"]), int(header["ncomp"])
    grids = np.frombuffer(data[pos:], dtype="<f8")
    if grids.size != ncomp * n**3:
        raise ValueError(f"field payload has {grids.size} values, expected {ncomp * n**3}")
    return header, grids.reshape(ncomp, n**3).copy()
