import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dalab.errors import CertificationFailed
from dalab.maps import DAMap, InverseMap, Shear, Twist, inv3, inv3_transpose, verify_partial_hyperbolicity
from dalab.rng import torus_samples
from dalab.torus import A0, min_displacement

from conftest import shear_map

unit = st.floats(0.0, 1.0, exclude_max=True)
point = st.tuples(unit, unit, unit)


def twist_map(theta=0.3):
    lin = DAMap(A0).linear
    return DAMap(A0, [Twist(lin.eigenvectors, (1, 2), np.array([0.3, 0.4, 0.5]), 0.2, theta)])


def test_apply_examples(f0):
    assert f0.apply([0.0, 0.0, 0.0]).tolist() == [0.0, 0.0, 0.0]
    assert f0.apply([0.5, 0.5, 0.5]) == pytest.approx([0.0, 0.5, 0.5], abs=1e-15)


def test_shear_hand_evaluation():
    # first coordinate moved by 0.05 sin(2 pi 0.25) = 0.05; A0 (0.05, 0.25, 0) = (0.65, 0.6, 0.3)
    f = DAMap(A0, [Shear(0, (0, 1, 0), 0.05)])
    assert f.apply([0.0, 0.25, 0.0]) == pytest.approx([0.65, 0.6, 0.3], abs=1e-15)


def test_shear_rejects_target_frequency():
    with pytest.raises(ValueError):
        Shear(1, (0, 1, 0), 0.05)


def test_linear_derivative_constant(f0, rng):
    J = f0.derivative(rng.random((5, 3)))
    assert np.array_equal(J, np.broadcast_to(np.array(A0, float), (5, 3, 3)))


def test_shear_jacobian_unit_triangular(rng):
    s = Shear(0, (0, 1, 1), 0.3)
    J = s.jacobian(rng.random((100, 3)))
    assert np.all(J[:, 0, 0] == 1) and np.all(J[:, 1, 1] == 1) and np.all(J[:, 2, 2] == 1)
    assert np.all(J[:, 1:, :] == np.eye(3)[1:])
    assert np.all(np.linalg.det(J) == pytest.approx(1.0, abs=1e-15))


@pytest.mark.parametrize("make", [lambda: shear_map(0.05), lambda: twist_map(0.3)])
def test_derivative_matches_central_differences(make):
    f = make()
    x = torus_samples(3, "fd", 200)
    h = 1e-6
    J = f.derivative(x)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (f.apply_lift(x + e) - f.apply_lift(x - e)) / (2 * h)
        assert np.abs(fd - J[:, :, j]).max() <= 1e-6


def test_twist_unit_jacobian_and_support():
    f = twist_map(0.4)
    x = torus_samples(0, "twist-det", 100_000)
    dets = np.linalg.det(f.derivative(x))
    assert np.abs(dets - 1).max() <= 1e-12
    far = x[np.linalg.norm(min_displacement(np.array([0.3, 0.4, 0.5]), x), axis=1) > 0.2]
    assert np.allclose(f.apply_lift(far), far @ np.array(A0, float).T, atol=0)


@pytest.mark.parametrize("make", [lambda: shear_map(0.05), lambda: twist_map(0.3)])
def test_round_trip(make):
    f = make()
    y = torus_samples(1, "roundtrip", 10_000)
    x = f.invert(y)
    assert np.abs(min_displacement(f.apply(x), y)).max() <= 1e-10
    assert np.abs(min_displacement(f.invert(f.apply(y)), y)).max() <= 1e-10


def test_closed_form_inverse_agrees_with_newton(f05):
    y = torus_samples(2, "newton", 2000)
    assert np.abs(min_displacement(f05.invert(y), f05.invert_newton(y))).max() <= 1e-12


def test_linear_inverse_exact(f0):
    y = np.array([[0.125, 0.25, 0.5]])
    inv = np.array(f0.linear.inverse_matrix, float)
    assert np.array_equal(f0.invert_lift(y), y @ inv.T)


def test_zero_twist_is_linear(f0, rng):
    f = twist_map(0.0)
    y = rng.random((50, 3))
    assert np.allclose(f.invert(y), f0.invert(y), atol=1e-15)


@given(point, st.tuples(*[st.integers(-3, 3)] * 3))
def test_lift_homotopy_class(x, z):
    f = shear_map(0.05)
    x, z = np.array(x), np.array(z, float)
    assert np.allclose(f.apply_lift(x + z), f.apply_lift(x) + np.array(A0) @ z, atol=1e-12)


def test_inverse_map_roles(f05):
    g = InverseMap(f05)
    x = torus_samples(4, "inv", 50)
    assert np.allclose(g.apply_lift(f05.apply_lift(x)), x, atol=1e-12)
    assert np.allclose(g.derivative(f05.apply(x)) @ f05.derivative(x), np.eye(3), atol=1e-11)
    assert g.linear.case == "two_expanding"


def test_inv3_helpers(rng):
    M = rng.normal(size=(20, 3, 3))
    assert np.allclose(inv3(M), np.linalg.inv(M), rtol=1e-9, atol=1e-9)
    assert np.allclose(inv3_transpose(M), np.swapaxes(np.linalg.inv(M), -1, -2), rtol=1e-9, atol=1e-9)


def test_certificate_linear(f0):
    cert = verify_partial_hyperbolicity(f0)
    assert cert.verified and cert.case == "two_contracting"
    for lab, exp in zip(f0.linear.labels, f0.linear.exponents):
        assert np.allclose(cert.rates[lab], exp, atol=1e-10)


def test_certificate_small_shear(f01, f0):
    cert = verify_partial_hyperbolicity(f01)
    assert cert.verified
    for lab, exp in zip(f0.linear.labels, f0.linear.exponents):
        assert np.all(np.abs(np.asarray(cert.rates[lab]) - exp) <= 0.1)


def test_certificate_large_shear_fails():
    with pytest.raises(CertificationFailed):
        verify_partial_hyperbolicity(shear_map(10.0))
    assert not verify_partial_hyperbolicity(shear_map(10.0), raise_on_failure=False).verified
