"""Independent reference computations used to freeze expected values.

None of these import the package under test.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import mpmath
import numpy as np
import sympy

A0 = [[3, 2, 1], [2, 2, 1], [1, 1, 1]]


def eigen_oracle(M, dps: int = 50):
    """Eigenvalues (sorted by modulus) and exponents from 50-digit root finding."""
    mpmath.mp.dps = dps
    cp = sympy.Matrix(M).charpoly().all_coeffs()
    roots = mpmath.polyroots([int(c) for c in cp], maxsteps=200, extraprec=200)
    roots = sorted((mpmath.re(r) for r in roots), key=abs)
    return [float(r) for r in roots], [float(mpmath.log(abs(r))) for r in roots]


def eigenvector_oracle(M, mu):
    """Unit null vector of ``M - mu I``, first nonzero component positive."""
    mpmath.mp.dps = 50
    A = mpmath.matrix(M) - mpmath.mpf(mu) * mpmath.eye(3)
    # cross product of two rows spans the kernel of a rank-2 matrix
    r0 = [A[0, j] for j in range(3)]
    r1 = [A[1, j] for j in range(3)]
    v = [r0[1] * r1[2] - r0[2] * r1[1], r0[2] * r1[0] - r0[0] * r1[2], r0[0] * r1[1] - r0[1] * r1[0]]
    n = mpmath.sqrt(sum(c * c for c in v))
    v = [c / n for c in v]
    first = next(c for c in v if abs(c) > 1e-30)
    return np.array([float(c if first > 0 else -c) for c in v])


def int_matpow(M, n):
    return [[int(v) for v in row] for row in (sympy.Matrix(M) ** n).tolist()]


def fixed_count_smith(M, n) -> int:
    """``|Z^3 / (M^n - I) Z^3|`` from the Smith normal form."""
    from sympy.matrices.normalforms import smith_normal_form

    B = sympy.Matrix(M) ** n - sympy.eye(3)
    S = smith_normal_form(B, domain=sympy.ZZ)
    return abs(int(S[0, 0] * S[1, 1] * S[2, 2]))


def fixed_points_bruteforce(M, n):
    """All ``x in (1/d) Z^3 / Z^3`` with ``(M^n - I) x`` integral, by exhaustive scan."""
    B = np.array(int_matpow(M, n), dtype=np.int64) - np.eye(3, dtype=np.int64)
    d = abs(int(round(np.linalg.det(B))))
    out = []
    g = np.arange(d, dtype=np.int64)
    for a in range(d):
        # every (a, j, k) is visited; the first congruence prunes before the other two are tested
        r0 = (a * B[0, 0] + g[:, None] * B[0, 1] + g[None, :] * B[0, 2]) % d
        J, K = np.nonzero(r0 == 0)
        P = np.stack([np.full(J.size, a), J, K], axis=1)
        ok = np.all((P @ B[1:].T) % d == 0, axis=1)
        out.extend(tuple(Fraction(int(c), d) for c in p) for p in P[ok])
    return out


def wrap_exact(v):
    """Reduction mod 1 of dyadic floats in exact arithmetic, rounded once."""
    out = []
    for c in v:
        q = Fraction(c) % 1
        r = float(q)
        out.append(0.0 if r == 1.0 else r)
    return out


def min_displacement_bruteforce(p, q):
    best = None
    for z in itertools.product((-1, 0, 1), repeat=3):
        d = np.asarray(q) % 1 - np.asarray(p) % 1 + np.array(z)
        if best is None or np.linalg.norm(d) < np.linalg.norm(best):
            best = d
    return best


def cascade_oracle(depth: int, p: float = 0.7):
    """Exact masses of the binary cascade and its KS distance / max bin at every level.

    The cascade splits the mass of every dyadic interval in proportion
    ``(p, 1 - p)``; masses are computed with Fractions.
    """
    P = Fraction(p).limit_denominator(1000)
    masses = [Fraction(1)]
    levels = {}
    for lv in range(1, depth + 1):
        masses = [m * w for m in masses for w in (P, 1 - P)]
        nb = len(masses)
        cdf, ks = Fraction(0), Fraction(0)
        for i, m in enumerate(masses):
            cdf += m
            ks = max(ks, abs(cdf - Fraction(i + 1, nb)))
        levels[nb] = {"ks": float(ks), "max_bin": float(max(masses)), "masses": [float(m) for m in masses]}
    return levels


def kolmogorov_cdf(x: float, terms: int = 100) -> float:
    """``P(K <= x) = 1 - 2 sum_k (-1)^(k-1) exp(-2 k^2 x^2)`` (series form)."""
    return 1.0 - 2.0 * sum((-1) ** (k - 1) * math.exp(-2.0 * k * k * x * x) for k in range(1, terms + 1))


def ks_critical_oracle(alpha: float, n: int, cells: int = 1) -> float:
    """Asymptotic Kolmogorov critical value with a Bonferroni split over cells, by bisection."""
    target = 1.0 - alpha / cells
    lo, hi = 0.3, 5.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if kolmogorov_cdf(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) / math.sqrt(n)
