"""Lyapunov exponents of the derivative cocycle.

Finite-time exponents come from carrying an orthonormal frame along the
orbit and re-orthonormalizing after every step (Benettin's scheme); the
logarithms of the diagonal stretch factors are accumulated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SplittingMismatch
from .maps import TorusMap
from .parallel import chunked_map, concat
from .rng import torus_samples
from .torus import LinearAnosov

BURN_IN = 100
SAMPLE_TAG = "exponents"


def gram_schmidt(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column Gram-Schmidt of a stack of 3x3 matrices.

    Returns the orthonormal frames and the (positive) diagonal of R.
    """
    a0 = M[:, :, 0]
    r00 = np.sqrt(np.einsum("ni,ni->n", a0, a0))
    q0 = a0 / r00[:, None]
    a1 = M[:, :, 1]
    a1 = a1 - np.einsum("ni,ni->n", q0, a1)[:, None] * q0
    r11 = np.sqrt(np.einsum("ni,ni->n", a1, a1))
    q1 = a1 / r11[:, None]
    a2 = M[:, :, 2]
    a2 = a2 - np.einsum("ni,ni->n", q0, a2)[:, None] * q0
    a2 = a2 - np.einsum("ni,ni->n", q1, a2)[:, None] * q1
    r22 = np.sqrt(np.einsum("ni,ni->n", a2, a2))
    q2 = a2 / r22[:, None]
    return np.stack([q0, q1, q2], axis=2), np.stack([r00, r11, r22], axis=1)


@dataclass(frozen=True)
class ExponentTriple:
    low: float
    mid: float
    high: float
    n: int
    base_point: tuple[float, float, float]

    def as_array(self) -> np.ndarray:
        return np.array([self.low, self.mid, self.high])

    @property
    def zero_sum(self) -> float:
        return self.low + self.mid + self.high


def exponents_batch(f: TorusMap, x, n: int, burn_in: int = BURN_IN) -> np.ndarray:
    """Finite-time exponents for a batch of base points, shape ``(N, 3)``, ascending."""
    if n < 1:
        raise ValueError("orbit length must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Q = np.broadcast_to(np.eye(3), (x.shape[0], 3, 3)).copy()
    for _ in range(burn_in):
        Q, _ = gram_schmidt(f.derivative(x) @ Q)
        x = f.apply(x)
    acc = np.zeros((x.shape[0], 3))
    for _ in range(n):
        Q, r = gram_schmidt(f.derivative(x) @ Q)
        acc += np.log(r)
        x = f.apply(x)
    return np.sort(acc / n, axis=1)


def finite_time_exponents(f: TorusMap, x, n: int, burn_in: int = BURN_IN) -> ExponentTriple:
    x = np.asarray(x, dtype=float)
    lo, mid, hi = exponents_batch(f, x[None, :], n, burn_in)[0]
    return ExponentTriple(float(lo), float(mid), float(hi), int(n), tuple(float(v) for v in x))


@dataclass
class ExponentEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    samples: int
    n: int
    seed: int
    zero_sum_residual: float
    per_sample: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        return {
            "seed": self.seed,
            "samples": self.samples,
            "n": self.n,
            "mean_low": self.mean[0],
            "mean_mid": self.mean[1],
            "mean_high": self.mean[2],
            "stderr_low": self.stderr[0],
            "stderr_mid": self.stderr[1],
            "stderr_high": self.stderr[2],
            "zero_sum_residual": self.zero_sum_residual,
        }


def _exponent_chunk(start, stop, f, n, burn_in, seed):
    x = torus_samples(seed, SAMPLE_TAG, stop - start, start=start)
    return exponents_batch(f, x, n, burn_in)


def volume_average_exponents(
    f: TorusMap,
    samples: int,
    n: int,
    seed: int = 0,
    burn_in: int = BURN_IN,
    workers: int | None = None,
    chunk_size: int = 250,
) -> ExponentEstimate:
    """Lebesgue average of the finite-time exponents with per-component standard errors."""
    if samples < 2:
        raise ValueError("need at least two samples for a standard error")
    vals = concat(
        chunked_map(_exponent_chunk, samples, chunk_size, (f, n, burn_in, seed), workers)
    )
    mean = vals.mean(axis=0)
    stderr = vals.std(axis=0, ddof=1) / np.sqrt(samples)
    zero_sum = float(np.max(np.abs(vals.sum(axis=1))))
    return ExponentEstimate(mean, stderr, samples, n, seed, zero_sum, vals)


@dataclass
class InequalityRow:
    name: str
    estimate: float
    bound: float
    stderr: float
    relation: str  # "<=" or ">="
    passed: bool
    conditional: bool = False


@dataclass
class InequalityReport:
    rows: list
    zero_sum_residual: float
    zero_sum_tol: float
    zero_sum_passed: bool

    @property
    def passed(self) -> bool:
        return self.zero_sum_passed and all(r.passed for r in self.rows if not r.conditional)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "zero_sum_residual": self.zero_sum_residual,
            "zero_sum_passed": self.zero_sum_passed,
            "rows": [r.__dict__ for r in self.rows],
        }


def exponent_inequality_report(
    f: TorusMap,
    A: LinearAnosov,
    estimate: ExponentEstimate,
    sigmas: float = 3.0,
    zero_sum_tol: float = 1e-3,
    certificate=None,
) -> InequalityReport:
    """Check the volume-averaged exponents against the linear ones.

    Top exponent: average <= linear.  Bottom exponent: average >= linear.
    The weak-stable comparison ``mid >= linear mid`` is added only in the
    two-contracting case and marked conditional: it presumes an absolutely
    continuous weak-stable foliation, which is not verified here.
    """
    case = certificate.case if certificate is not None else f.linear.case
    if case != A.case or f.linear.case != A.case:
        raise SplittingMismatch(f"map splitting {case!r} differs from linear {A.case!r}")
    m, s = estimate.mean, estimate.stderr
    lam = A.exponents
    lab = A.labels
    rows = [
        InequalityRow(
            f"avg lambda_{lab[2]} <= lambda_{lab[2]}(A)",
            float(m[2]), float(lam[2]), float(s[2]), "<=",
            bool(m[2] <= lam[2] + sigmas * s[2] + 1e-12),
        ),
        InequalityRow(
            f"avg lambda_{lab[0]} >= lambda_{lab[0]}(A)",
            float(m[0]), float(lam[0]), float(s[0]), ">=",
            bool(m[0] >= lam[0] - sigmas * s[0] - 1e-12),
        ),
    ]
    if A.case == "two_contracting":
        rows.append(
            InequalityRow(
                "avg lambda_ws >= lambda_ws(A)",
                float(m[1]), float(lam[1]), float(s[1]), ">=",
                bool(m[1] >= lam[1] - sigmas * s[1] - 1e-12),
                conditional=True,
            )
        )
    zs = float(estimate.zero_sum_residual)
    return InequalityReport(rows, zs, zero_sum_tol, zs <= zero_sum_tol)
