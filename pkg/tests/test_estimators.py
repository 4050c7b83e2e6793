import numpy as np
import pytest
from sklearn.base import clone

from dalab.disintegration import atomic_fixture, cascade_fixture
from dalab.estimators import DisintegrationClassifier, InvariantBundles, LyapunovSpectrum, SemiConjugacy, check_points
from dalab.torus import A0, analyze_linear

LIN = analyze_linear(A0)
PTS = np.array([[0.1, 0.2, 0.3], [0.7, 0.5, 0.05]])


def test_params_roundtrip(f05):
    est = LyapunovSpectrum(f05, n=50, samples=4)
    assert est.get_params()["n"] == 50
    c = clone(est)
    assert c.get_params()["samples"] == 4 and c.f.perturbations == f05.perturbations


def test_lyapunov_linear(f0):
    est = LyapunovSpectrum(f0, n=200).fit(PTS)
    assert np.allclose(est.mean_, np.log(np.abs(LIN.eigenvalues)), atol=1e-10)
    assert est.transform(PTS).shape == (2, 3)
    volume = LyapunovSpectrum(f0, n=100, samples=3, seed=1, workers=1).fit()
    assert volume.exponents_.shape == (3, 3)


def test_unfitted_and_bad_input(f0):
    with pytest.raises(Exception):
        LyapunovSpectrum(f0).transform(PTS)
    with pytest.raises(ValueError):
        check_points(np.zeros((3, 2)))
    with pytest.raises(TypeError):
        LyapunovSpectrum(A0).fit(PTS)


def test_semiconjugacy_linear(f0):
    sc = SemiConjugacy(f0, resolution=8).fit()
    assert np.allclose(sc.transform(PTS), PTS, atol=1e-12)
    assert sc.score(PTS) >= -1e-12


def test_bundles_linear(f0):
    ib = InvariantBundles(f0, resolution=8).fit()
    v = ib.transform(PTS)
    assert v.shape == (2, 3, 3)
    for j in range(3):
        e = LIN.eigenvectors[:, j]
        assert np.allclose(np.abs(v[:, j] @ e), 1.0, atol=1e-10)


def test_classifier():
    clf = DisintegrationClassifier().fit()
    out = clf.predict([atomic_fixture(), cascade_fixture()])
    assert list(out) == ["ATOMIC_LIKE", "SINGULAR_CONTINUOUS_LIKE"]
    assert set(out) <= set(clf.classes_)
    with pytest.raises(ValueError):
        DisintegrationClassifier(levels=(8,)).fit()
