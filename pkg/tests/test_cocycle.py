import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dalab.cocycle import (
    ExponentEstimate,
    exponent_inequality_report,
    exponents_batch,
    finite_time_exponents,
    gram_schmidt,
    volume_average_exponents,
)
from dalab.errors import SplittingMismatch
from dalab.maps import DAMap
from dalab.torus import A0

# logs of |eigenvalues| of A0 from the mpmath oracle (tests/oracles.py)
ORACLE_EXPONENTS = np.array([-1.1777252115233594, -0.441448620566066, 1.6191738320894253])

unit = st.floats(0.0, 1.0, exclude_max=True)


def test_gram_schmidt_reconstructs(rng):
    M = rng.normal(size=(50, 3, 3))
    Q, r = gram_schmidt(M)
    assert np.allclose(np.swapaxes(Q, 1, 2) @ Q, np.eye(3), atol=1e-12)
    R = np.swapaxes(Q, 1, 2) @ M
    assert np.allclose(np.abs(np.diagonal(R, axis1=1, axis2=2)), r, rtol=1e-10)
    assert np.allclose(np.tril(R, -1), 0, atol=1e-10)


@given(st.tuples(unit, unit, unit), st.integers(1, 300))
def test_linear_exponents_exact(x, n):
    e = finite_time_exponents(DAMap(A0), x, n)
    assert np.abs(e.as_array() - ORACLE_EXPONENTS).max() <= 1e-10


def test_linear_inverse_negates(f0):
    e = finite_time_exponents(f0.inverse, [0.3, 0.1, 0.7], 500)
    assert np.allclose(e.as_array(), -ORACLE_EXPONENTS[::-1], atol=1e-10)


def test_rejects_empty_orbit(f0):
    with pytest.raises(ValueError):
        finite_time_exponents(f0, [0, 0, 0], 0)


def test_linear_refinement_is_constant(f0):
    x = [0.2, 0.4, 0.6]
    a = finite_time_exponents(f0, x, 1000).as_array()
    b = finite_time_exponents(f0, x, 2000).as_array()
    assert np.abs(a - b).max() <= 1e-12


def test_same_orbit_agreement(f05):
    x = np.array([0.1234, 0.2345, 0.3456])
    y = f05.orbit(x, 7)[-1]
    a = finite_time_exponents(f05, x, 10_000).as_array()
    b = finite_time_exponents(f05, y, 10_000).as_array()
    assert np.abs(a - b).max() <= 1e-3


def test_zero_sum_and_sorted(f05):
    x = np.random.default_rng(3).random((20, 3))
    ex = exponents_batch(f05, x, 10_000)
    assert np.all(np.diff(ex, axis=1) >= 0)
    assert np.abs(ex.sum(axis=1)).max() <= 1e-3
    lin = exponents_batch(DAMap(A0), x, 10_000)
    assert np.abs(lin.sum(axis=1)).max() <= 1e-6


def test_inverse_symmetry_backward_orbit(f05):
    x = np.array([0.31, 0.17, 0.83])
    n = 2000
    fwd = finite_time_exponents(f05, x, n, burn_in=0).as_array()
    # the backward orbit of f^n(x) under f^-1 retraces the same points
    end = f05.orbit(x, n)[-1]
    bwd = finite_time_exponents(f05.inverse, end, n, burn_in=0).as_array()
    assert np.abs(bwd + fwd[::-1]).max() <= 20.0 / n


def test_volume_average_linear(f0):
    est = volume_average_exponents(f0, 16, 200, seed=1)
    assert np.abs(est.mean - ORACLE_EXPONENTS).max() <= 1e-10
    assert np.all(est.stderr <= 1e-10) and np.all(est.stderr >= 0)


def test_volume_average_reproducible_and_worker_independent(f05):
    a = volume_average_exponents(f05, 40, 300, seed=9, workers=1, chunk_size=7)
    b = volume_average_exponents(f05, 40, 300, seed=9, workers=3, chunk_size=13)
    assert np.array_equal(a.per_sample, b.per_sample)
    c = volume_average_exponents(f05, 40, 300, seed=10, workers=1)
    assert not np.array_equal(a.per_sample, c.per_sample)


def test_volume_average_needs_two_samples(f0):
    with pytest.raises(ValueError):
        volume_average_exponents(f0, 1, 10)


def test_report_linear_holds(f0):
    est = volume_average_exponents(f0, 8, 100)
    rep = exponent_inequality_report(f0, f0.linear, est)
    assert rep.passed
    assert [r.relation for r in rep.rows] == ["<=", ">=", ">="]
    assert rep.rows[2].conditional


def test_report_small_shear(f05):
    est = volume_average_exponents(f05, 100, 2000, seed=2)
    rep = exponent_inequality_report(f05, f05.linear, est)
    assert rep.passed, rep.as_dict()


def test_report_flags_forced_violation(f0):
    lam = np.array(f0.linear.exponents)
    bad = lam + np.array([0.0, 0.0, 1.0])
    est = ExponentEstimate(bad, np.zeros(3), 10, 100, 0, 0.0)
    rep = exponent_inequality_report(f0, f0.linear, est)
    assert not rep.passed
    assert not rep.rows[0].passed and rep.rows[1].passed


def test_report_rejects_mismatched_case(f0):
    other = f0.inverse.linear
    est = volume_average_exponents(f0, 4, 10)
    with pytest.raises(SplittingMismatch):
        exponent_inequality_report(f0, other, est)
