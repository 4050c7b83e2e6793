from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dalab.errors import ComplexEigenvalues, IncompleteData, NoConvergence, PeriodTooLarge
from dalab.maps import DAMap, Shear, TorusMap
from dalab.periodic import (
    PeriodicOrbit,
    continue_periodic_orbit,
    continue_periodic_orbits,
    cycle_exponents,
    default_max_period,
    linear_orbits,
    linear_periodic_points,
    linear_periodic_points_exact,
    periodic_count,
    periodic_data,
    periodic_data_constancy,
    write_periodic_csv,
)
from dalab.torus import A0, analyze_linear, torus_distance

from conftest import shear_map
from oracles import fixed_count_smith, fixed_points_bruteforce

# |det(A0^n - I)| for n = 1..5, Smith normal form oracle
ORACLE_COUNTS = [1, 13, 91, 533, 2911]
ORACLE_EXPONENTS = np.array([-1.1777252115233594, -0.441448620566066, 1.6191738320894253])


@pytest.fixture(scope="module")
def A():
    return analyze_linear(A0)


def test_counts_match_smith(A):
    assert [periodic_count(A, n) for n in range(1, 6)] == ORACLE_COUNTS
    assert [fixed_count_smith(A0, n) for n in range(1, 6)] == ORACLE_COUNTS


@pytest.mark.parametrize("n", [1, 2, 3])
def test_enumeration_matches_bruteforce(A, n):
    ours = {tuple(p) for p in linear_periodic_points_exact(A, n)}
    brute = {tuple(Fraction(c) for c in p) for p in fixed_points_bruteforce(A0, n)}
    assert ours == brute
    assert len(ours) == ORACLE_COUNTS[n - 1]


def test_origin_only_fixed_point(A):
    assert linear_periodic_points(A, 1).tolist() == [[0.0, 0.0, 0.0]]
    for n in range(1, 5):
        assert (0, 0, 0) in {tuple(p) for p in linear_periodic_points_exact(A, n)}


def test_points_are_periodic(A):
    for n in range(1, 5):
        P = linear_periodic_points(A, n)
        img = P.copy()
        for _ in range(n):
            img = img @ np.array(A0, float).T
        assert torus_distance(img, P).max() <= 1e-9


def test_cap(A):
    with pytest.raises(PeriodTooLarge):
        linear_periodic_points(A, 5, cap=1000)
    # |det(A0^6 - I)| = 15379 <= 20000 < 79808 = |det(A0^7 - I)|
    assert default_max_period(A) == 6
    assert default_max_period(A, cap=600) == 4


def test_orbit_partition(A):
    # points of period dividing 4 = orbits of minimal period 1, 2 and 4
    total = sum(d * len(linear_orbits(A, d)) for d in (1, 2, 4))
    assert total == ORACLE_COUNTS[3]
    for orb in linear_orbits(A, 3):
        assert len(orb) == 3 and orb[0] == min(orb)


def test_continuation_identity_at_zero(f0, A):
    for p in linear_periodic_points_exact(A, 2):
        orb = continue_periodic_orbit(f0, A, p, 2)
        assert np.array_equal(orb.point, np.array([float(c) for c in p]))
        assert orb.residual <= 1e-10


def test_fixed_point_small_shear(f01, A):
    orb = continue_periodic_orbit(f01, A, (Fraction(0),) * 3, 1)
    assert orb.residual <= 1e-10
    assert torus_distance(orb.point, np.zeros(3)) <= 0.05
    # independent check: a fine grid scan around the origin has its
    # smallest displacement at the same point
    g = np.linspace(-0.02, 0.02, 41)
    X = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    d = torus_distance(f01.apply(X), X)
    assert np.linalg.norm(X[d.argmin()] - np.where(orb.point > 0.5, orb.point - 1, orb.point)) <= 0.002


def test_small_shear_keeps_all_orbits(f01, A):
    for n in (1, 2, 3):
        reps = [o[0] for o in linear_orbits(A, n)]
        orbits = continue_periodic_orbits(f01, A, reps, n)
        assert all(o is not None for o in orbits)
        assert all(o.residual <= 1e-10 for o in orbits)
        assert all(o.minimal_period == n for o in orbits)


def test_large_amplitude_reports_lost():
    f = DAMap(A0, [Shear(0, (0, 1, 1), 3.0)])
    p = (Fraction(6, 13), Fraction(12, 13), Fraction(4, 13))
    with pytest.raises(NoConvergence):
        continue_periodic_orbit(f, f.linear, p, 2)


def test_rejects_non_periodic_seed(f0, A):
    with pytest.raises(ValueError):
        continue_periodic_orbit(f0, A, (Fraction(1, 7), Fraction(0), Fraction(0)), 2)


def test_linear_data_exact(f0, A):
    for n in (1, 2, 3):
        for o in linear_orbits(A, n):
            d = periodic_data(f0, continue_periodic_orbit(f0, A, o[0], n))
            assert np.abs(d.exponents - ORACLE_EXPONENTS).max() <= 1e-10


def test_data_zero_sum_and_orbit_independence(f05, A):
    for o in linear_orbits(A, 3)[:10]:
        orb = continue_periodic_orbit(f05, A, o[0], 3)
        d = periodic_data(f05, orb)
        assert abs(d.exponent_sum) <= 1e-8
        J = f05.derivative(orb.points)
        det = np.prod(np.linalg.det(J))
        assert abs(det - 1) <= 1e-8
        # start the cycle product at another point of the same orbit
        rolled = np.roll(J, -1, axis=0)
        e = cycle_exponents(rolled[None])[0] / 3
        assert np.abs(np.sort(e) - d.exponents).max() <= 1e-10


def test_cycle_exponents_against_eig():
    rng = np.random.default_rng(4)
    J = np.eye(3) + 0.3 * rng.normal(size=(5, 2, 3, 3))
    ours = np.sort(cycle_exponents(J), axis=1)
    for b in range(5):
        ev = np.linalg.eigvals(J[b, 1] @ J[b, 0])
        if np.all(np.abs(ev.imag) < 1e-12):
            assert np.allclose(ours[b], np.sort(np.log(np.abs(ev))), atol=1e-10)


class _Rotating(TorusMap):
    linear = analyze_linear(A0)

    def derivative(self, x):
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        return np.broadcast_to(rot, (len(np.atleast_2d(x)), 3, 3))


def test_complex_eigenvalues_reported():
    orb = PeriodicOrbit(1, np.zeros(3), (0, 0, 0), 0.0, 1, points=np.zeros((1, 3)))
    with pytest.raises(ComplexEigenvalues):
        periodic_data(_Rotating(), orb)


def test_fixed_point_exponents_converge_with_eps(A):
    errs = []
    for eps in (0.04, 0.02, 0.01, 0.005):
        f = shear_map(eps)
        d = periodic_data(f, continue_periodic_orbit(f, A, (Fraction(0),) * 3, 1))
        errs.append(np.abs(d.exponents - ORACLE_EXPONENTS).max())
    assert all(a > b for a, b in zip(errs, errs[1:]))
    # first order in eps
    assert all(1.8 <= a / b <= 2.2 for a, b in zip(errs, errs[1:]))


def test_constancy_linear(f0):
    v = periodic_data_constancy(f0, max_period=4)
    assert v.verdicts == ("CONSTANT",) * 3
    assert v.predicted_absolute_continuity and v.predicted_c1_rigidity
    assert np.all(v.spreads <= 1e-10)


def test_constancy_shear_variable(f05):
    v = periodic_data_constancy(f05, max_period=3)
    assert "VARIABLE" in v.verdicts
    assert not v.predicted_c1_rigidity
    assert v.orbit_count == 1 + 6 + 30


def test_constancy_needs_every_orbit():
    f = DAMap(A0, [Shear(0, (0, 1, 1), 3.0)])
    with pytest.raises(IncompleteData):
        periodic_data_constancy(f, max_period=2)


def test_csv(tmp_path, f05):
    v = periodic_data_constancy(f05, max_period=2)
    path = tmp_path / "p.csv"
    write_periodic_csv(path, v.data)
    lines = path.read_text().splitlines()
    assert lines[0] == "period,x,y,z,lambda_low,lambda_mid,lambda_high,residual"
    assert len(lines) == 1 + v.orbit_count


@given(st.integers(1, 4))
def test_count_identity_property(n):
    A = analyze_linear(A0)
    assert len(linear_periodic_points(A, n)) == periodic_count(A, n) == fixed_count_smith(A0, n)
