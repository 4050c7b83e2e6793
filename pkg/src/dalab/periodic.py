"""Periodic orbits: exact enumeration for A, Newton continuation to f, periodic data.

Period-``n`` points of ``A`` are the solutions of ``(A^n - I) x in Z^3``, i.e.
the group ``B^{-1} Z^3 / Z^3`` with ``B = A^n - I``.  Coset representatives
come from the lower-triangular Hermite form of the lattice ``B Z^3``, so the
enumeration is exact in rational arithmetic and its size is ``|det B|``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

import numpy as np

from .cocycle import gram_schmidt
from .errors import ComplexEigenvalues, IncompleteData, NoConvergence, PeriodTooLarge
from .maps import TorusMap
from .parallel import chunked_map
from .torus import (
    LinearAnosov,
    int_det,
    int_identity,
    int_matpow,
    int_sub,
    rational_solve,
    torus_distance,
    wrap,
)

DEFAULT_COUNT_CAP = 20000
RESIDUAL_TOL = 1e-10


def _ext_gcd(a: int, b: int) -> tuple[int, int, int]:
    if b == 0:
        return (abs(a), 1 if a >= 0 else -1, 0)
    g, x, y = _ext_gcd(b, a % b)
    return g, y, x - (a // b) * y


def lattice_hermite(B) -> list[list[int]]:
    """Lower-triangular basis (columns) of the lattice generated by the columns of ``B``."""
    H = [list(row) for row in B]
    n = 3
    for i in range(n):
        # clear row i to the right of the diagonal with unimodular column moves
        for j in range(i + 1, n):
            a, b = H[i][i], H[i][j]
            if b == 0:
                continue
            g, s, t = _ext_gcd(a, b)
            u, v = a // g, b // g
            for r in range(n):
                ci, cj = H[r][i], H[r][j]
                H[r][i] = s * ci + t * cj
                H[r][j] = -v * ci + u * cj
        if H[i][i] < 0:
            for r in range(n):
                H[r][i] = -H[r][i]
        if H[i][i] == 0:
            raise ZeroDivisionError("degenerate lattice: A^n - I is singular")
    return H


def periodic_count(A: LinearAnosov, n: int) -> int:
    """``|det(A^n - I)|``: the number of points of period dividing ``n``."""
    B = int_sub(int_matpow(A.matrix, n), int_identity())
    return abs(int_det(B))


def default_max_period(A: LinearAnosov, cap: int = DEFAULT_COUNT_CAP) -> int:
    n = 1
    while periodic_count(A, n + 1) <= cap:
        n += 1
    return n


def _frac_mod1(q: Fraction) -> Fraction:
    return q - (q.numerator // q.denominator)


def linear_periodic_points_exact(A: LinearAnosov, n: int, cap: int = DEFAULT_COUNT_CAP):
    """All ``x`` in [0,1)^3 with ``A^n x = x`` mod Z^3, as exact rational triples (sorted)."""
    if n < 1:
        raise ValueError("period must be >= 1")
    B = int_sub(int_matpow(A.matrix, n), int_identity())
    count = abs(int_det(B))
    if count > cap:
        raise PeriodTooLarge(f"{count} points of period {n} exceed the cap {cap}")
    H = lattice_hermite(B)
    diag = [H[i][i] for i in range(3)]
    pts = set()
    for z in product(*(range(d) for d in diag)):
        x = rational_solve(B, z)
        pts.add(tuple(_frac_mod1(c) for c in x))
    if len(pts) != count:  # pragma: no cover - guarded by construction
        raise ArithmeticError(f"enumerated {len(pts)} points, expected {count}")
    return sorted(pts)


def linear_periodic_points(A: LinearAnosov, n: int, cap: int = DEFAULT_COUNT_CAP) -> np.ndarray:
    """Float representatives, shape ``(|det(A^n - I)|, 3)``, in lexicographic order."""
    exact = linear_periodic_points_exact(A, n, cap)
    return np.array([[float(c) for c in p] for p in exact]).reshape(-1, 3)


def _apply_exact(A: LinearAnosov, p):
    return tuple(_frac_mod1(sum(A.matrix[i][k] * p[k] for k in range(3))) for i in range(3))


def minimal_period(A: LinearAnosov, p, n: int) -> int:
    q = p
    for d in range(1, n + 1):
        q = _apply_exact(A, q)
        if q == p and n % d == 0:
            return d
    return n


def linear_orbits(A: LinearAnosov, n: int, cap: int = DEFAULT_COUNT_CAP) -> list[tuple]:
    """Orbits of minimal period exactly ``n``, each as its list of exact points.

    The first point of each orbit is its lexicographically smallest member;
    orbits are sorted by that representative.
    """
    pts = linear_periodic_points_exact(A, n, cap)
    seen = set()
    orbits = []
    for p in pts:
        if p in seen:
            continue
        orb = [p]
        q = _apply_exact(A, p)
        while q != p:
            orb.append(q)
            q = _apply_exact(A, q)
        seen.update(orb)
        if len(orb) != n:
            continue
        k = orb.index(min(orb))
        orbits.append(tuple(orb[k:] + orb[:k]))
    orbits.sort(key=lambda o: o[0])
    return orbits


# ---------------------------------------------------------------------------
# continuation


@dataclass(frozen=True)
class PeriodicOrbit:
    period: int
    point: np.ndarray
    translation: tuple[int, int, int]
    residual: float
    minimal_period: int
    linear_point: tuple = field(default=None, compare=False)
    points: np.ndarray = field(default=None, compare=False, repr=False)
    return_residual: float = field(default=float("nan"), compare=False)


def _translation(A: LinearAnosov, p, n: int) -> tuple[int, int, int]:
    An = int_matpow(A.matrix, n)
    m = [sum(An[i][k] * p[k] for k in range(3)) - p[i] for i in range(3)]
    if not all(c.denominator == 1 for c in m):
        raise ValueError(f"{p} is not a periodic point of A with period {n}")
    return tuple(int(c) for c in m)


def continue_periodic_orbits(
    f: TorusMap,
    A: LinearAnosov,
    points_exact,
    n: int,
    tol: float = 1e-13,
    max_iter: int = 40,
) -> list:
    """Newton continuation of many A-periodic points at once.

    Multiple shooting on the lift: the unknowns are the ``n`` orbit points
    and the equations ``f~(x_j) - m_j - x_{j+1} = 0`` (indices mod ``n``), with
    integer jumps ``m_j = A p_j - p_{j+1}`` taken from the linear orbit.  This
    keeps the Jacobian conditioned like ``Df`` rather than ``Df^n``.  Entries of
    the result are :class:`PeriodicOrbit` or ``None`` where Newton failed.
    """
    orbits = []
    for p in points_exact:
        orb = [tuple(p)]
        for _ in range(n - 1):
            orb.append(_apply_exact(A, orb[-1]))
        orbits.append(orb)
    B = len(orbits)
    if B == 0:
        return []
    P = np.array([[[float(c) for c in q] for q in orb] for orb in orbits])  # (B, n, 3)
    Amat = A.float_matrix
    # m_j = A p_j - p_{j+1}, exact integers
    Mj = np.rint(P @ Amat.T - np.roll(P, -1, axis=1))
    M = np.array([_translation(A, p, n) for p in points_exact], dtype=float)
    X = P.copy()
    eye = np.eye(3)

    def residual(X):
        Y = f.apply_lift(X.reshape(-1, 3)).reshape(X.shape)
        return Y - Mj - np.roll(X, -1, axis=1)

    rn = np.full(B, np.inf)
    for _ in range(max_iter):
        R = residual(X)
        rn = np.abs(R).reshape(B, -1).max(axis=1)
        active = np.flatnonzero(rn > tol)
        if active.size == 0:
            break
        Xa = X[active]
        D = f.derivative(Xa.reshape(-1, 3)).reshape(active.size, n, 3, 3)
        J = np.zeros((active.size, 3 * n, 3 * n))
        for j in range(n):
            k = (j + 1) % n
            J[:, 3 * j : 3 * j + 3, 3 * j : 3 * j + 3] += D[:, j]
            J[:, 3 * j : 3 * j + 3, 3 * k : 3 * k + 3] -= eye
        try:
            step = np.linalg.solve(J, -R[active].reshape(active.size, -1, 1))[..., 0]
        except np.linalg.LinAlgError:
            break
        X[active] = Xa + step.reshape(active.size, n, 3)
        if not np.all(np.isfinite(X)):
            break
    out = []
    for i, p in enumerate(points_exact):
        if not np.isfinite(rn[i]) or rn[i] > RESIDUAL_TOL:
            out.append(None)
            continue
        pts = wrap(X[i])
        # one-step defect around the cycle; f^n from a single point would
        # amplify rounding by the top multiplier
        tdist = float(torus_distance(f.apply(pts), np.roll(pts, -1, axis=0)).max())
        if tdist > RESIDUAL_TOL:
            out.append(None)
            continue
        out.append(
            PeriodicOrbit(
                period=n,
                point=pts[0],
                translation=tuple(int(c) for c in M[i]),
                residual=tdist,
                minimal_period=minimal_period(A, p, n),
                linear_point=tuple(p),
                points=pts,
                return_residual=float(torus_distance(f.iterate_lift(pts[0], n), pts[0])),
            )
        )
    return out


def continue_periodic_orbit(f: TorusMap, A: LinearAnosov, p, n: int) -> PeriodicOrbit:
    """Continue a single A-periodic point ``p`` (exact rationals or floats) to ``f``."""
    if not all(isinstance(c, Fraction) for c in p):
        p = tuple(Fraction(float(c)).limit_denominator(10**9) for c in p)
    (orb,) = continue_periodic_orbits(f, A, [tuple(p)], n)
    if orb is None:
        raise NoConvergence(f"continuation of period-{n} point {p} lost")
    return orb


# ---------------------------------------------------------------------------
# periodic data


@dataclass(frozen=True)
class PeriodicData:
    orbit: PeriodicOrbit
    exponents: np.ndarray  # ascending

    @property
    def exponent_sum(self) -> float:
        return float(np.sum(self.exponents))

    def row(self) -> dict:
        p = self.orbit.point
        return {
            "period": self.orbit.period,
            "x": p[0],
            "y": p[1],
            "z": p[2],
            "lambda_low": self.exponents[0],
            "lambda_mid": self.exponents[1],
            "lambda_high": self.exponents[2],
            "residual": self.orbit.residual,
        }


def cycle_exponents(jacobians: np.ndarray, tol: float = 1e-15, max_cycles: int = 500) -> np.ndarray:
    """Log-moduli of the eigenvalues of ``J_{n-1} ... J_0`` by periodic QR iteration.

    ``jacobians`` has shape ``(B, n, 3, 3)``: ``B`` independent cycles of
    length ``n``.  The frame carried around each cycle converges to the Schur
    basis of its product, after which the per-step R diagonals over one
    cycle multiply to the eigenvalue moduli.  No product is ever formed, so
    the small moduli keep full relative accuracy.  Returns ``(B, 3)`` sums of
    logs (not divided by ``n``), ordered as the Schur diagonal.
    """
    J = np.asarray(jacobians, dtype=float)
    B, n = J.shape[:2]
    Q = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
    prev = None
    for _ in range(max_cycles):
        acc = np.zeros((B, 3))
        for j in range(n):
            Q, r = gram_schmidt(J[:, j] @ Q)
            acc += np.log(r)
        if prev is not None:
            scale = np.maximum(1.0, np.abs(acc).max(axis=1))
            if np.all(np.abs(acc - prev).max(axis=1) <= tol * scale):
                break
        prev = acc
    return acc


def _scaled_products(jacobians: np.ndarray) -> np.ndarray:
    P = np.broadcast_to(np.eye(3), (jacobians.shape[0], 3, 3)).copy()
    for j in range(jacobians.shape[1]):
        P = jacobians[:, j] @ P
        P /= np.linalg.norm(P, axis=(1, 2))[:, None, None]
    return P


def _orbit_jacobians(f: TorusMap, orbit: PeriodicOrbit) -> np.ndarray:
    if orbit.points is not None:
        return f.derivative(orbit.points)
    x = orbit.point[None, :]
    jac = []
    for _ in range(orbit.period):
        jac.append(f.derivative(x)[0])
        x = f.apply(x)
    return np.array(jac)


def periodic_data_batch(f: TorusMap, orbits: list) -> list:
    """:func:`periodic_data` for many orbits of one period; failures come back as exceptions."""
    if not orbits:
        return []
    n = orbits[0].period
    if any(o.period != n for o in orbits):
        raise ValueError("batch must share one period")
    J = np.stack([_orbit_jacobians(f, o) for o in orbits])
    ev = np.linalg.eigvals(_scaled_products(J))
    complex_ = np.any(np.abs(ev.imag) > 1e-9 * np.abs(ev).max(axis=1, keepdims=True), axis=1)
    logs = np.sort(cycle_exponents(J) / n, axis=1)
    out = []
    for i, o in enumerate(orbits):
        if o.residual > RESIDUAL_TOL:
            out.append(NoConvergence(f"orbit residual {o.residual:.2e} above {RESIDUAL_TOL}"))
        elif complex_[i]:
            out.append(ComplexEigenvalues(f"D(f^{n}) has complex eigenvalues at {o.point.tolist()}"))
        else:
            out.append(PeriodicData(orbit=o, exponents=logs[i]))
    return out


def periodic_data(f: TorusMap, orbit: PeriodicOrbit) -> PeriodicData:
    """Per-direction exponents at a periodic orbit: ``log|eig D(f^n)| / n``, ascending."""
    (res,) = periodic_data_batch(f, [orbit])
    if isinstance(res, Exception):
        raise res
    return res


@dataclass
class ConstancyVerdict:
    labels: tuple[str, str, str]
    spreads: np.ndarray
    verdicts: tuple[str, str, str]
    tol: float
    max_period: int
    orbit_count: int
    predicted_absolute_continuity: bool
    predicted_c1_rigidity: bool
    data: list = field(repr=False, default_factory=list)

    def as_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "spreads": [float(s) for s in self.spreads],
            "verdicts": list(self.verdicts),
            "tol": self.tol,
            "max_period": self.max_period,
            "orbit_count": self.orbit_count,
            "predicted_absolute_continuity": self.predicted_absolute_continuity,
            "predicted_c1_rigidity": self.predicted_c1_rigidity,
        }


ORBIT_CHUNK = 256


def _continue_chunk(start, stop, f, n, reps):
    orbits = continue_periodic_orbits(f, f.linear, reps[start:stop], n)
    ok = [o for o in orbits if o is not None]
    data = iter(periodic_data_batch(f, ok))
    return [next(data) if o is not None else None for o in orbits]


def collect_periodic_data(
    f: TorusMap, max_period: int, cap: int = DEFAULT_COUNT_CAP, workers: int | None = None
):
    """Continue every orbit of minimal period <= ``max_period``.

    Returns ``(data, lost)``; ``lost`` lists ``(period, representative, reason)``.
    Results are ordered by period, then by lexicographic linear representative.
    """
    A = f.linear
    data, lost = [], []
    for n in range(1, max_period + 1):
        reps = [o[0] for o in linear_orbits(A, n, cap)]
        if not reps:
            continue
        chunks = chunked_map(_continue_chunk, len(reps), ORBIT_CHUNK, (f, n, reps), workers)
        for rep, res in zip(reps, (r for c in chunks for r in c)):
            if isinstance(res, PeriodicData):
                data.append(res)
            else:
                lost.append((n, rep, "no convergence" if res is None else str(res)))
    return data, lost


def write_periodic_csv(path, data: list) -> None:
    cols = ["period", "x", "y", "z", "lambda_low", "lambda_mid", "lambda_high", "residual"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for d in data:
            row = d.row()
            w.writerow([row["period"]] + [repr(float(row[c])) for c in cols[1:]])


def periodic_data_constancy(
    f: TorusMap,
    max_period: int | None = None,
    tol: float = 1e-6,
    cap: int = DEFAULT_COUNT_CAP,
    workers: int | None = None,
) -> ConstancyVerdict:
    """Spread of periodic exponents per direction and the two derived predictions.

    Absolute continuity of the center foliation is predicted when the
    extremal exponent on the side of the one-dimensional strong bundle is
    constant (strong-stable in the two-contracting case, strong-unstable
    otherwise); C^1 conjugacy to the linear part when all three are constant.
    """
    A = f.linear
    if max_period is None:
        max_period = default_max_period(A, cap)
    data, lost = collect_periodic_data(f, max_period, cap, workers)
    if lost:
        raise IncompleteData(f"{len(lost)} orbit(s) lost during continuation, first {lost[0]}")
    ex = np.array([d.exponents for d in data])
    spreads = ex.max(axis=0) - ex.min(axis=0)
    verdicts = tuple("CONSTANT" if s <= tol else "VARIABLE" for s in spreads)
    strong = 0 if A.case == "two_contracting" else 2
    return ConstancyVerdict(
        labels=A.labels,
        spreads=spreads,
        verdicts=verdicts,
        tol=tol,
        max_period=max_period,
        orbit_count=len(data),
        predicted_absolute_continuity=verdicts[strong] == "CONSTANT",
        predicted_c1_rigidity=all(v == "CONSTANT" for v in verdicts),
        data=data,
    )
