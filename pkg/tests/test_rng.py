import numpy as np
import pytest
from hypothesis import given, strategies as st

from dalab.parallel import WORKERS_ENV, chunk_bounds, chunked_map, concat, default_workers
from dalab.rng import generator, stream_key, torus_samples, uniforms


def test_streams_are_keyed():
    a = uniforms(1, "x", 0, 100)
    assert np.array_equal(a, uniforms(1, "x", 0, 100))
    assert not np.array_equal(a, uniforms(2, "x", 0, 100))
    assert not np.array_equal(a, uniforms(1, "y", 0, 100))
    assert np.all((a >= 0) & (a < 1))
    assert stream_key(3, "t").dtype == np.uint64 and stream_key(3, "t").shape == (2,)


@given(st.integers(0, 500), st.integers(1, 200), st.integers(1, 4))
def test_any_slice_matches_the_full_stream(start, count, dim):
    full = uniforms(9, "slice", 0, 800, dim)
    assert np.array_equal(uniforms(9, "slice", start, count, dim), full[start : start + count])


def test_uniform_moments():
    u = torus_samples(0, "moments", 200_000)
    assert np.allclose(u.mean(axis=0), 0.5, atol=3e-3)
    assert np.allclose(u.var(axis=0), 1 / 12, atol=2e-3)
    assert abs(np.corrcoef(u.T)[0, 1]) < 0.01


def test_uniform_edge_cases():
    assert uniforms(0, "e", 5, 0).shape == (0, 3)
    with pytest.raises(ValueError):
        uniforms(0, "e", 0, 3, dim=5)


def test_generator_reproducible():
    assert generator(4, "g").integers(0, 10**9) == generator(4, "g").integers(0, 10**9)


def _chunk_sum(a, b, seed):
    return torus_samples(seed, "sum", b - a, a).sum(axis=0, keepdims=True)


def test_chunked_map_independent_of_workers():
    one = concat(chunked_map(_chunk_sum, 1000, 128, (5,), workers=1))
    two = concat(chunked_map(_chunk_sum, 1000, 128, (5,), workers=2))
    assert np.array_equal(one, two)
    assert one.shape == (8, 3)


def test_chunk_bounds():
    assert chunk_bounds(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert chunk_bounds(0, 4) == []
    assert concat([]).shape == (0,)


def test_default_workers(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert default_workers() == 3
    for bad in ("0", "many"):
        monkeypatch.setenv(WORKERS_ENV, bad)
        with pytest.raises(ValueError):
            default_workers()
    monkeypatch.delenv(WORKERS_ENV)
    assert default_workers() >= 1
