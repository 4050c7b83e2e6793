"""scikit-learn style wrappers: configure, ``fit`` once, then ``transform`` points.

The map is a constructor parameter rather than training data, so ``fit``
takes optional sample points (or nothing) and learns the grid objects.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cocycle import BURN_IN, exponents_batch, volume_average_exponents
from .conjugacy import conjugacy_residual, solve_semiconjugacy
from .disintegration import ConditionalEstimate, Thresholds, classify_disintegration
from .foliation import DEFAULT_REFINE, compute_bundle
from .maps import TorusMap


def check_points(X) -> np.ndarray:
    """Validate an ``(m, 3)`` array of torus points."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 3:
        raise ValueError(f"expected points with 3 coordinates, got {X.shape[1]}")
    return X


def check_map(f) -> TorusMap:
    if not isinstance(f, TorusMap):
        raise TypeError(f"expected a TorusMap, got {type(f).__name__}")
    return f


class LyapunovSpectrum(TransformerMixin, BaseEstimator):
    """Finite-time exponents of ``f``; ``fit`` averages them over ``X`` or over Lebesgue samples."""

    def __init__(self, f=None, n=10_000, burn_in=BURN_IN, samples=1000, seed=0, workers=None):
        self.f = f
        self.n = n
        self.burn_in = burn_in
        self.samples = samples
        self.seed = seed
        self.workers = workers

    def fit(self, X=None, y=None):
        f = check_map(self.f)
        if X is None:
            est = volume_average_exponents(f, self.samples, self.n, self.seed, self.burn_in, self.workers)
            vals = est.per_sample
        else:
            vals = exponents_batch(f, check_points(X), self.n, self.burn_in)
        self.exponents_ = vals
        self.mean_ = vals.mean(axis=0)
        self.stderr_ = vals.std(axis=0, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.full(3, np.nan)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return exponents_batch(check_map(self.f), check_points(X), self.n, self.burn_in)


class SemiConjugacy(TransformerMixin, BaseEstimator):
    """Grid solution of ``A o H = H o f``; ``transform`` evaluates ``H``."""

    def __init__(self, f=None, resolution=64, tol=1e-12, max_iters=1000, refine=30):
        self.f = f
        self.resolution = resolution
        self.tol = tol
        self.max_iters = max_iters
        self.refine = refine

    def fit(self, X=None, y=None):
        f = check_map(self.f)
        self.field_ = solve_semiconjugacy(f, f.linear, self.resolution, self.tol, self.max_iters)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "field_")
        return self.field_.H(check_points(X), self.f, self.refine)

    def score(self, X=None, y=None):
        """Negative sup residual at random points (larger is better)."""
        check_is_fitted(self, "field_")
        n = 10_000 if X is None else len(check_points(X))
        return -conjugacy_residual(self.field_, self.f, samples=n, refine=self.refine).sup


class InvariantBundles(TransformerMixin, BaseEstimator):
    """The three invariant line fields; ``transform`` returns ``(m, 3, 3)`` unit vectors (low, mid, high)."""

    def __init__(self, f=None, resolution=32, tol=1e-10, max_iters=300, refine=DEFAULT_REFINE):
        self.f = f
        self.resolution = resolution
        self.tol = tol
        self.max_iters = max_iters
        self.refine = refine

    def fit(self, X=None, y=None):
        f = check_map(self.f)
        self.bundles_ = {
            lab: compute_bundle(f, lab, self.resolution, self.tol, self.max_iters, residual_samples=0)
            for lab in f.linear.labels
        }
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "bundles_")
        X = check_points(X)
        return np.stack([self.bundles_[lab].evaluate(X, self.f, self.refine) for lab in self.f.linear.labels], axis=1)


class DisintegrationClassifier(ClassifierMixin, BaseEstimator):
    """Verdict per conditional-measure estimate.

    Nothing is learned; ``fit`` only validates the levels and records the
    verdict vocabulary so the object behaves like a fitted classifier.
    """

    def __init__(self, levels=(8, 16, 32, 64), alpha=0.05, atom=0.5):
        self.levels = levels
        self.alpha = alpha
        self.atom = atom

    def fit(self, X=None, y=None):
        if len(self.levels) < 2:
            raise ValueError("need at least two refinement levels")
        self.classes_ = np.array(["ATOMIC_LIKE", "INCONCLUSIVE", "LEBESGUE_LIKE", "SINGULAR_CONTINUOUS_LIKE"])
        return self

    def predict(self, X):
        """``X`` is a list of :class:`ConditionalEstimate` objects or ``{bins: (masses, counts)}`` mappings."""
        check_is_fitted(self, "classes_")
        th = Thresholds(self.alpha, self.atom)
        out = []
        for item in X:
            if isinstance(item, ConditionalEstimate):
                rep = classify_disintegration(item, self.levels, th)
            else:
                rep = classify_disintegration(item, thresholds=th)
            out.append(rep.verdict)
        return np.array(out)
