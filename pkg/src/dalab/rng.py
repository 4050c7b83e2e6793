"""Counter-based random streams keyed by ``(seed, stage tag, sample index)``.

Sample ``i`` of a stream always reads Philox block ``i`` (four 64-bit words),
so any partition of the index range over workers reproduces the same
numbers bit for bit.
"""
from __future__ import annotations

import hashlib

import numpy as np

_U53 = 2.0**-53


def stream_key(seed: int, tag: str) -> np.ndarray:
    digest = hashlib.sha256(f"{int(seed)}:{tag}".encode()).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def uniforms(seed: int, tag: str, start: int, count: int, dim: int = 3) -> np.ndarray:
    """``count`` rows of ``dim <= 4`` uniforms in [0, 1) for indices ``start .. start+count-1``."""
    if not 1 <= dim <= 4:
        raise ValueError("at most four uniforms per sample index")
    if count <= 0:
        return np.empty((0, dim))
    bitgen = np.random.Philox(key=stream_key(seed, tag), counter=int(start))
    raw = bitgen.random_raw(4 * count).reshape(count, 4)[:, :dim]
    return (raw >> np.uint64(11)).astype(np.float64) * _U53


def torus_samples(seed: int, tag: str, count: int, start: int = 0) -> np.ndarray:
    """Uniform (Lebesgue) points on T^3."""
    return uniforms(seed, tag, start, count, 3)


def generator(seed: int, tag: str) -> np.random.Generator:
    """Sequential generator for bookkeeping draws that are not per-sample."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, tag)))
