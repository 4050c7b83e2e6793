"""Geometry of the flat 3-torus and hyperbolic integer matrices.

Points are plain float arrays of shape ``(3,)`` or ``(N, 3)`` with
coordinates in ``[0, 1)``; lifts are unconstrained float arrays of the same
shapes.  Integer matrix arithmetic is done on Python ints so determinants
and characteristic polynomials are exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import NotHyperbolic, NotSplit, NotUnimodular

WRAP_TOL = 1e-15
EIG_RESIDUAL_TOL = 1e-12

IntMatrix = tuple[tuple[int, int, int], tuple[int, int, int], tuple[int, int, int]]


# ---------------------------------------------------------------------------
# points and displacements


def rows_times(x: np.ndarray, M) -> np.ndarray:
    """``x @ M.T`` for an ``(N, 3)`` batch, written out so each row rounds the
    same way whatever the batch size (BLAS switches kernels at ``N = 1``)."""
    M = np.asarray(M, dtype=float)
    return x[:, 0:1] * M[:, 0] + x[:, 1:2] * M[:, 1] + x[:, 2:3] * M[:, 2]


def rows_dot(x: np.ndarray, v) -> np.ndarray:
    """``x @ v`` for an ``(N, 3)`` batch and a 3-vector, batch-size invariant."""
    v = np.asarray(v, dtype=float)
    return x[:, 0] * v[0] + x[:, 1] * v[1] + x[:, 2] * v[2]


def wrap(v) -> np.ndarray:
    """Reduce a lift (or batch of lifts) into the fundamental domain [0, 1)^3.

    Values within ``WRAP_TOL`` of 1 after reduction are clamped to 0, so a
    tiny negative input maps to the origin rather than to ``1 - ulp``.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("wrap: non-finite coordinates")
    out = np.mod(v, 1.0)
    out[out >= 1.0 - WRAP_TOL] = 0.0
    return out


def min_displacement(p, q) -> np.ndarray:
    """Representative of ``q - p`` with every component in [-0.5, 0.5)."""
    d = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
    return d - np.floor(d + 0.5)


def torus_distance(p, q) -> np.ndarray:
    return np.linalg.norm(min_displacement(p, q), axis=-1)


# ---------------------------------------------------------------------------
# exact integer matrices


def as_int_matrix(m) -> IntMatrix:
    """Validate and freeze a 3x3 integer matrix (nested sequence or array)."""
    arr = np.asarray(m)
    if arr.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {arr.shape}")
    rows = []
    for row in arr.tolist():
        out = []
        for x in row:
            if isinstance(x, float) and not float(x).is_integer():
                raise ValueError(f"non-integer matrix entry {x!r}")
            out.append(int(x))
        rows.append(tuple(out))
    return tuple(rows)  # type: ignore[return-value]


def int_matmul(a: IntMatrix, b: IntMatrix) -> IntMatrix:
    return tuple(
        tuple(sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3)) for i in range(3)
    )  # type: ignore[return-value]


def int_identity() -> IntMatrix:
    return ((1, 0, 0), (0, 1, 0), (0, 0, 1))


def int_matpow(a: IntMatrix, n: int) -> IntMatrix:
    if n < 0:
        raise ValueError("negative power; invert first")
    result, base = int_identity(), a
    while n:
        if n & 1:
            result = int_matmul(result, base)
        base = int_matmul(base, base)
        n >>= 1
    return result


def int_sub(a: IntMatrix, b: IntMatrix) -> IntMatrix:
    return tuple(tuple(a[i][j] - b[i][j] for j in range(3)) for i in range(3))  # type: ignore


def int_det(a: Sequence[Sequence[int]]) -> int:
    return (
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    )


def int_adjugate(a: IntMatrix) -> IntMatrix:
    def minor(i, j):
        rows = [r for k, r in enumerate(a) if k != i]
        cols = [[x for l, x in enumerate(r) if l != j] for r in rows]
        return cols[0][0] * cols[1][1] - cols[0][1] * cols[1][0]

    return tuple(
        tuple((-1) ** (i + j) * minor(j, i) for j in range(3)) for i in range(3)
    )  # type: ignore[return-value]


def int_inverse(a: IntMatrix) -> IntMatrix:
    """Inverse of a unimodular integer matrix, exact."""
    d = int_det(a)
    if abs(d) != 1:
        raise NotUnimodular(f"det = {d}; integer inverse requires |det| = 1")
    adj = int_adjugate(a)
    return tuple(tuple(d * x for x in row) for row in adj)  # type: ignore[return-value]


def rational_solve(a: IntMatrix, b: Sequence[int]) -> tuple[Fraction, Fraction, Fraction]:
    """Exact solution of ``a x = b`` for a nonsingular integer matrix."""
    d = int_det(a)
    if d == 0:
        raise ZeroDivisionError("singular integer matrix")
    adj = int_adjugate(a)
    return tuple(Fraction(sum(adj[i][k] * b[k] for k in range(3)), d) for i in range(3))  # type: ignore


def charpoly(a: IntMatrix) -> tuple[int, int, int, int]:
    """Coefficients ``(1, c2, c1, c0)`` of det(xI - a), highest degree first."""
    tr = a[0][0] + a[1][1] + a[2][2]
    minors = (
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
        + a[0][0] * a[2][2] - a[0][2] * a[2][0]
        + a[1][1] * a[2][2] - a[1][2] * a[2][1]
    )
    return (1, -tr, minors, -int_det(a))


def cubic_discriminant(coeffs: Sequence[int]) -> int:
    a, b, c, d = coeffs
    return 18 * a * b * c * d - 4 * b**3 * d + b**2 * c**2 - 4 * a * c**3 - 27 * a**2 * d**2


def _poly_sign(coeffs, x: float) -> int:
    xq = Fraction(x)
    val = Fraction(0)
    for c in coeffs:
        val = val * xq + c
    return (val > 0) - (val < 0)


def _bisect_root(coeffs, lo: float, hi: float) -> float:
    """Bisection with exact sign evaluation, run to floating-point resolution."""
    slo = _poly_sign(coeffs, lo)
    if slo == 0:
        return lo
    if _poly_sign(coeffs, hi) == 0:
        return hi
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        s = _poly_sign(coeffs, mid)
        if s == 0:
            return mid
        if s == slo:
            lo = mid
        else:
            hi = mid
    return lo if abs(_poly_value(coeffs, lo)) <= abs(_poly_value(coeffs, hi)) else hi


def _poly_value(coeffs, x: float) -> Fraction:
    xq = Fraction(x)
    val = Fraction(0)
    for c in coeffs:
        val = val * xq + c
    return val


def real_cubic_roots(coeffs: Sequence[int]) -> np.ndarray:
    """Three distinct real roots of an integer monic cubic, ascending.

    Requires a positive discriminant.  Roots are bracketed by the critical
    points of the cubic and refined by sign-change bisection.
    """
    a, b, c, d = coeffs
    disc = cubic_discriminant(coeffs)
    if disc <= 0:
        raise NotSplit("cubic does not have three distinct real roots")
    bound = 1.0 + max(abs(b), abs(c), abs(d)) / abs(a)
    # critical points of 3a x^2 + 2b x + c
    q = 4 * b * b - 12 * a * c
    r = np.sqrt(float(q))
    x1 = (-2 * b - r) / (6 * a)
    x2 = (-2 * b + r) / (6 * a)
    brackets = [(-bound - 1.0, x1), (x1, x2), (x2, bound + 1.0)]
    return np.array([_bisect_root(coeffs, lo, hi) for lo, hi in brackets])


def _null_vector(m: np.ndarray) -> np.ndarray:
    rows = m
    cands = [np.cross(rows[i], rows[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
    v = max(cands, key=np.linalg.norm)
    return v / np.linalg.norm(v)


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    for x in v:
        if abs(x) > 1e-12:
            return v if x > 0 else -v
    return v


# ---------------------------------------------------------------------------
# linear Anosov automorphisms


@dataclass(frozen=True)
class LinearAnosov:
    """Eigen-analysis of a hyperbolic matrix in SL(3, Z)^{+-}.

    ``eigenvalues`` are sorted by increasing modulus and ``eigenvectors``
    stores the matching unit vectors as columns.  ``case`` is
    ``"two_contracting"`` (splitting ss + ws + u) or ``"two_expanding"``
    (splitting s + wu + uu).
    """

    matrix: IntMatrix
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    exponents: np.ndarray
    case: str
    charpoly: tuple[int, int, int, int]
    det: int
    _dual: np.ndarray = field(repr=False, compare=False)

    @property
    def labels(self) -> tuple[str, str, str]:
        return ("ss", "ws", "u") if self.case == "two_contracting" else ("s", "wu", "uu")

    @property
    def float_matrix(self) -> np.ndarray:
        return np.array(self.matrix, dtype=float)

    @property
    def inverse_matrix(self) -> IntMatrix:
        return int_inverse(self.matrix)

    @property
    def dual_basis(self) -> np.ndarray:
        """Rows are the covectors dual to the eigenvector columns."""
        return self._dual

    @property
    def center_eigenvalue(self) -> float:
        return float(self.eigenvalues[1])

    def eigen_coordinates(self, v) -> np.ndarray:
        """Components of ``v`` (last axis) in the eigenbasis."""
        return np.asarray(v, dtype=float) @ self._dual.T

    def from_eigen_coordinates(self, c) -> np.ndarray:
        return np.asarray(c, dtype=float) @ self.eigenvectors.T

    def inverse(self) -> "LinearAnosov":
        return analyze_linear(self.inverse_matrix)


def analyze_linear(m) -> LinearAnosov:
    """Validate a 3x3 integer matrix as a hyperbolic automorphism with real split spectrum.

    Raises
    ------
    NotUnimodular
        ``|det m| != 1``, so ``m`` does not define a torus automorphism.
    NotHyperbolic
        an eigenvalue of modulus one (``+1`` or ``-1`` is a root of the
        characteristic polynomial).
    NotSplit
        a complex pair or a repeated root, so the three one-dimensional
        bundles of the partially hyperbolic splitting do not exist.
    """
    mat = as_int_matrix(m)
    det = int_det(mat)
    if abs(det) != 1:
        raise NotUnimodular(f"|det| = {abs(det)} != 1: not an automorphism of T^3")
    coeffs = charpoly(mat)
    # With |det| = 1 every modulus-one eigenvalue forces a real root at +-1.
    if _poly_value(coeffs, 1.0) == 0 or _poly_value(coeffs, -1.0) == 0:
        raise NotHyperbolic("eigenvalue of modulus 1: no uniform contraction/expansion")
    disc = cubic_discriminant(coeffs)
    if disc < 0:
        raise NotSplit("complex eigenvalue pair: no real one-dimensional splitting")
    if disc == 0:
        raise NotSplit("repeated eigenvalue: splitting not one-dimensional")
    roots = real_cubic_roots(coeffs)
    order = np.argsort(np.abs(roots))
    eig = roots[order]
    a = np.array(mat, dtype=float)
    vecs = np.empty((3, 3))
    for i, mu in enumerate(eig):
        v = _null_vector(a - mu * np.eye(3))
        vecs[:, i] = _sign_normalize(v)
    resid = np.linalg.norm(a @ vecs - vecs * eig, axis=0)
    if np.any(resid > EIG_RESIDUAL_TOL * max(1.0, np.abs(eig).max())):
        raise NotSplit(f"eigenvector residual too large: {resid}")
    exps = np.log(np.abs(eig))
    ncontract = int(np.sum(np.abs(eig) < 1.0))
    case = "two_contracting" if ncontract == 2 else "two_expanding"
    dual = np.linalg.inv(vecs)
    for arr in (eig, vecs, exps, dual):
        arr.setflags(write=False)
    return LinearAnosov(
        matrix=mat,
        eigenvalues=eig,
        eigenvectors=vecs,
        exponents=exps,
        case=case,
        charpoly=coeffs,
        det=det,
        _dual=dual,
    )


A0: IntMatrix = ((3, 2, 1), (2, 2, 1), (1, 1, 1))
