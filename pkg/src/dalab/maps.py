"""Derived-from-Anosov maps ``f = A o phi_k o ... o phi_1`` on T^3.

The perturbation primitives are exactly volume preserving:

* :class:`Shear` moves one coordinate by ``eps * sin(2 pi n.x)`` where the
  frequency vector has a zero in that coordinate, so the Jacobian is
  unipotent.
* :class:`Twist` rotates points inside a ball about an axis by an angle that
  depends only on the squared radius, which the rotation preserves.

Both have closed-form inverses, so ``invert`` is exact; a damped Newton
solver on the lift is kept as an independent route.

All evaluation methods are vectorised over a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CertificationFailed, NoConvergence
from .torus import LinearAnosov, analyze_linear, min_displacement, rows_dot, rows_times, wrap

TWO_PI = 2.0 * np.pi


def _batch(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def _unbatch(out, single):
    return out[0] if single else out


# ---------------------------------------------------------------------------
# perturbation primitives


@dataclass(frozen=True)
class Shear:
    """``x_target += amplitude * sin(2 pi (freq . x))`` with ``freq[target] == 0``."""

    target: int
    freq: tuple[int, int, int]
    amplitude: float

    def __post_init__(self):
        if self.target not in (0, 1, 2):
            raise ValueError("shear target must be 0, 1 or 2")
        freq = tuple(int(k) for k in self.freq)
        if len(freq) != 3:
            raise ValueError("shear frequency needs three integers")
        if freq[self.target] != 0:
            raise ValueError("shear frequency must vanish on the target coordinate")
        object.__setattr__(self, "freq", freq)
        object.__setattr__(self, "amplitude", float(self.amplitude))

    kind = "shear"

    def displacement(self, x: np.ndarray) -> np.ndarray:
        phase = TWO_PI * rows_dot(x, self.freq)
        d = np.zeros_like(x)
        d[:, self.target] = self.amplitude * np.sin(phase)
        return d

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x + self.displacement(x)

    def backward(self, y: np.ndarray) -> np.ndarray:
        # the phase does not involve the moved coordinate
        return y - self.displacement(y)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        n = np.array(self.freq, dtype=float)
        phase = TWO_PI * rows_dot(x, n)
        J = np.broadcast_to(np.eye(3), (x.shape[0], 3, 3)).copy()
        J[:, self.target, :] += (self.amplitude * TWO_PI * np.cos(phase))[:, None] * n
        return J

    def sup_displacement(self) -> float:
        return abs(self.amplitude)


def _bump(s):
    """C^2 profile: 1 at s = 0, vanishing to second order at s = 1."""
    out = np.zeros_like(s)
    inside = s < 1.0
    out[inside] = (1.0 - s[inside]) ** 3
    return out


def _bump_prime(s):
    out = np.zeros_like(s)
    inside = s < 1.0
    out[inside] = -3.0 * (1.0 - s[inside]) ** 2
    return out


def inv3_transpose(M: np.ndarray) -> np.ndarray:
    """``inv(M).T`` for a batch of 3x3 matrices (cofactors over the determinant)."""
    a, b, c = M[..., 0, 0], M[..., 0, 1], M[..., 0, 2]
    d, e, f = M[..., 1, 0], M[..., 1, 1], M[..., 1, 2]
    g, h, i = M[..., 2, 0], M[..., 2, 1], M[..., 2, 2]
    C = np.empty_like(M)
    C[..., 0, 0] = e * i - f * h
    C[..., 0, 1] = f * g - d * i
    C[..., 0, 2] = d * h - e * g
    C[..., 1, 0] = c * h - b * i
    C[..., 1, 1] = a * i - c * g
    C[..., 1, 2] = b * g - a * h
    C[..., 2, 0] = b * f - c * e
    C[..., 2, 1] = c * d - a * f
    C[..., 2, 2] = a * e - b * d
    det = a * C[..., 0, 0] + b * C[..., 0, 1] + c * C[..., 0, 2]
    C /= det[..., None, None]
    return C


def inv3(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(inv3_transpose(M), -1, -2)


def orthonormal_frame(vectors) -> np.ndarray:
    """Gram-Schmidt on the given columns; a missing third column is completed by a cross product."""
    v = np.asarray(vectors, dtype=float)
    if v.shape == (3, 2):
        v = np.column_stack([v, np.cross(v[:, 0], v[:, 1])])
    q, r = np.linalg.qr(v)
    q = q * np.sign(np.diag(r))
    return q


@dataclass(frozen=True)
class Twist:
    """Rotation by ``theta(|y|^2)`` in the plane ``(frame[:, a], frame[:, b])`` about ``center``.

    ``y`` are coordinates in the orthonormal ``frame`` relative to the nearest
    lift of ``center``; the angle is ``theta_max * bump(|y|^2 / radius^2)``
    and the map is the identity outside the ball of the given radius.
    """

    frame: np.ndarray
    plane: tuple[int, int]
    center: np.ndarray
    radius: float
    theta_max: float

    kind = "twist"

    def __post_init__(self):
        frame = orthonormal_frame(self.frame)
        a, b = (int(i) for i in self.plane)
        if a == b or not {a, b} <= {0, 1, 2}:
            raise ValueError("twist plane must name two distinct frame indices")
        if not 0.0 < self.radius < 0.5:
            raise ValueError("twist radius must lie in (0, 0.5) so the ball embeds in T^3")
        frame.setflags(write=False)
        c = wrap(np.asarray(self.center, dtype=float))
        c.setflags(write=False)
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "plane", (a, b))
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "theta_max", float(self.theta_max))

    def _local(self, x):
        d = min_displacement(self.center, x)
        y = rows_times(d, self.frame.T)
        return y

    def _rotate(self, x, sign):
        y = self._local(x)
        q = np.sum(y * y, axis=1) / self.radius**2
        theta = sign * self.theta_max * _bump(q)
        a, b = self.plane
        c, s = np.cos(theta), np.sin(theta)
        ya, yb = y[:, a], y[:, b]
        dy = np.zeros_like(y)
        dy[:, a] = (c - 1.0) * ya - s * yb
        dy[:, b] = s * ya + (c - 1.0) * yb
        return x + rows_times(dy, self.frame)

    def forward(self, x):
        return self._rotate(x, 1.0)

    def backward(self, y):
        return self._rotate(y, -1.0)

    def displacement(self, x):
        return self.forward(x) - x

    def jacobian(self, x):
        y = self._local(x)
        r2 = self.radius**2
        q = np.sum(y * y, axis=1) / r2
        theta = self.theta_max * _bump(q)
        dtheta = self.theta_max * _bump_prime(q)[:, None] * (2.0 * y / r2)  # d theta / d y
        a, b = self.plane
        c, s = np.cos(theta), np.sin(theta)
        n = x.shape[0]
        Jy = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        Jy[:, a, a], Jy[:, a, b] = c, -s
        Jy[:, b, a], Jy[:, b, b] = s, c
        ya, yb = y[:, a], y[:, b]
        # derivative of the rotated pair with respect to theta
        ra = -s * ya - c * yb
        rb = c * ya - s * yb
        Jy[:, a, :] += ra[:, None] * dtheta
        Jy[:, b, :] += rb[:, None] * dtheta
        F = self.frame
        return F @ Jy @ F.T

    def sup_displacement(self) -> float:
        # chord of the largest rotation at the largest radius carrying that angle
        s = np.linspace(0.0, 1.0, 2001)
        ang = np.abs(self.theta_max) * _bump(s)
        return float(np.max(2.0 * self.radius * np.sqrt(s) * np.abs(np.sin(ang / 2.0))))


Perturbation = Shear | Twist


# ---------------------------------------------------------------------------
# maps


class TorusMap:
    """Common interface: lifted evaluation, derivative, exact inverse."""

    linear: LinearAnosov

    def apply_lift(self, x):
        raise NotImplementedError

    def invert_lift(self, y):
        raise NotImplementedError

    def derivative(self, x):
        raise NotImplementedError

    def apply(self, x):
        return wrap(self.apply_lift(x))

    def invert(self, y):
        return wrap(self.invert_lift(y))

    def inverse_derivative(self, y):
        """Derivative of the inverse map at ``y``."""
        return inv3(self.derivative(self.invert(y)))

    @property
    def inverse(self) -> "TorusMap":
        return InverseMap(self)

    def orbit(self, x, n: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty((n + 1,) + x.shape)
        out[0] = x
        for k in range(n):
            out[k + 1] = self.apply(out[k])
        return out

    def iterate_lift(self, x, n: int):
        for _ in range(n):
            x = self.apply_lift(x)
        return x

    def derivative_product(self, x, n: int) -> np.ndarray:
        """``D(f^n)(x)`` by the chain rule along the orbit."""
        x, single = _batch(x)
        M = np.broadcast_to(np.eye(3), (x.shape[0], 3, 3)).copy()
        for _ in range(n):
            M = self.derivative(x) @ M
            x = self.apply(x)
        return _unbatch(M, single)

    def lift_displacement(self, x):
        """Periodic part ``f~(x) - A x`` of the canonical lift."""
        x = np.asarray(x, dtype=float)
        x2, single = _batch(x)
        return self.apply_lift(x) - _unbatch(rows_times(x2, self.linear.float_matrix), single)


class DAMap(TorusMap):
    """``f = A o phi_k o ... o phi_1``; perturbations act first, in list order."""

    def __init__(
        self,
        linear: LinearAnosov | Sequence,
        perturbations: Sequence[Perturbation] = (),
        newton_tol: float = 1e-13,
        newton_max_iter: int = 50,
    ):
        if not isinstance(linear, LinearAnosov):
            linear = analyze_linear(linear)
        self.linear = linear
        self.perturbations = tuple(perturbations)
        self.newton_tol = float(newton_tol)
        self.newton_max_iter = int(newton_max_iter)
        self._A = linear.float_matrix
        self._Ainv = np.array(linear.inverse_matrix, dtype=float)

    def __repr__(self):
        return f"DAMap(matrix={self.linear.matrix}, perturbations={list(self.perturbations)})"

    @property
    def is_linear(self) -> bool:
        return len(self.perturbations) == 0

    def apply_lift(self, x):
        x, single = _batch(x)
        for p in self.perturbations:
            x = p.forward(x)
        return _unbatch(rows_times(x, self._A), single)

    def invert_lift(self, y):
        y, single = _batch(y)
        x = rows_times(y, self._Ainv)
        for p in reversed(self.perturbations):
            x = p.backward(x)
        return _unbatch(x, single)

    def derivative(self, x):
        x, single = _batch(x)
        J = np.broadcast_to(np.eye(3), (x.shape[0], 3, 3)).copy()
        for p in self.perturbations:
            J = p.jacobian(x) @ J
            x = p.forward(x)
        return _unbatch(self._A @ J, single)

    def inverse_derivative(self, y):
        return inv3(self.derivative(self.invert(y)))

    def invert_newton(self, y):
        """Solve ``f(x) = y`` by damped Newton on the lift, seeded by ``A^{-1} y``.

        Independent of the closed-form inverses; raises :class:`NoConvergence`
        when the residual does not fall below ``newton_tol``.
        """
        y, single = _batch(wrap(y))
        x = rows_times(y, self._Ainv)
        res = min_displacement(self.apply(x), y)
        rn = np.linalg.norm(res, axis=1)
        for _ in range(self.newton_max_iter):
            active = rn > self.newton_tol
            if not active.any():
                break
            step = np.linalg.solve(self.derivative(x[active]), res[active][..., None])[..., 0]
            t = np.ones(step.shape[0])
            xa = x[active]
            for _ in range(30):
                trial = xa + t[:, None] * step
                tres = min_displacement(self.apply(trial), y[active])
                tn = np.linalg.norm(tres, axis=1)
                bad = tn > rn[active]
                if not bad.any():
                    break
                t[bad] *= 0.5
            x[active] = trial
            res[active] = tres
            rn[active] = tn
        if np.any(rn > self.newton_tol):
            raise NoConvergence(
                f"Newton inversion stalled at residual {rn.max():.3e}; amplitude too large?"
            )
        return _unbatch(wrap(x), single)

    def sup_lift_displacement(self, samples: int = 0) -> float:
        """Upper bound (or sampled estimate) of ``sup |f~ - A~|``."""
        return float(
            np.linalg.norm(self._A, 2) * sum(p.sup_displacement() for p in self.perturbations)
        )


class InverseMap(TorusMap):
    """The inverse of a map, with its own linearization ``A^{-1}``."""

    def __init__(self, base: TorusMap):
        self.base = base
        self.linear = base.linear.inverse()

    def __repr__(self):
        return f"InverseMap({self.base!r})"

    @property
    def perturbations(self):
        return getattr(self.base, "perturbations", ())

    @property
    def is_linear(self):
        return getattr(self.base, "is_linear", False)

    @property
    def inverse(self):
        return self.base

    def apply_lift(self, x):
        return self.base.invert_lift(x)

    def invert_lift(self, y):
        return self.base.apply_lift(y)

    def derivative(self, x):
        return self.base.inverse_derivative(x)

    def inverse_derivative(self, y):
        return self.base.derivative(y)


# ---------------------------------------------------------------------------
# partial hyperbolicity certificate


@dataclass
class PHCertificate:
    apertures: tuple[float, float, float]
    iterates: int
    grid: int
    verified: bool
    case: str
    rates: dict = field(default_factory=dict)
    cone_margins: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "verified": self.verified,
            "case": self.case,
            "iterates": self.iterates,
            "grid": self.grid,
            "apertures": list(self.apertures),
            "rates": {k: list(v) for k, v in self.rates.items()},
            "cone_margins": dict(self.cone_margins),
        }


def grid_points(n: int) -> np.ndarray:
    """Cell-centred grid on T^3 in lexicographic (i, j, k) order."""
    t = (np.arange(n) + 0.5) / n
    g = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def _cone_ratio_line(P, i, aperture, nang):
    """Max image aperture of the boundary of the cone around eigen-axis ``i``."""
    others = [j for j in range(3) if j != i]
    th = np.linspace(0.0, TWO_PI, nang, endpoint=False)
    C = np.zeros((nang, 3))
    C[:, i] = 1.0
    C[:, others[0]] = aperture * np.cos(th)
    C[:, others[1]] = aperture * np.sin(th)
    img = np.einsum("nij,aj->nai", P, C)
    core = np.abs(img[..., i])
    side = np.linalg.norm(img[..., others], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(core > 0, side / core, np.inf)
    return r.max(axis=1)


def _cone_ratio_plane(P, k, aperture, nang):
    """Max image aperture of the cone around the eigen-plane excluding axis ``k``."""
    plane = [j for j in range(3) if j != k]
    th = np.linspace(0.0, TWO_PI, nang, endpoint=False)
    C = np.zeros((nang, 3))
    C[:, k] = aperture
    C[:, plane[0]] = np.cos(th)
    C[:, plane[1]] = np.sin(th)
    img = np.einsum("nij,aj->nai", P, C)
    core = np.linalg.norm(img[..., plane], axis=-1)
    side = np.abs(img[..., k])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(core > 0, side / core, np.inf)
    return r.max(axis=1)


def verify_partial_hyperbolicity(
    f: TorusMap,
    iterates: int = 4,
    grid: int = 8,
    apertures: tuple[float, float, float] = (0.5, 0.5, 0.5),
    n_angles: int = 64,
    raise_on_failure: bool = True,
) -> PHCertificate:
    """Cone-field certificate on a grid.

    Cones are built in the eigenbasis of the linear part: a line cone around
    the top direction and a plane cone around (mid, top) must be mapped
    strictly inside themselves by ``Df^N``; the line cone around the bottom
    direction and the plane cone around (bottom, mid) by ``Df^{-N}``.
    Growth rates along the cone cores must be strictly ordered.
    """
    lin = f.linear
    a_low, a_mid, a_high = (float(a) for a in apertures)
    V, W = lin.eigenvectors, lin.dual_basis
    x = grid_points(grid)
    fwd = f.derivative_product(x, iterates)
    bwd = f.inverse.derivative_product(x, iterates)
    Pf = W @ fwd @ V
    Pb = W @ bwd @ V

    checks = {
        "high_line": (_cone_ratio_line(Pf, 2, a_high, n_angles), a_high),
        "high_plane": (_cone_ratio_plane(Pf, 0, a_mid, n_angles), a_mid),
        "low_line": (_cone_ratio_line(Pb, 0, a_low, n_angles), a_low),
        "low_plane": (_cone_ratio_plane(Pb, 2, a_mid, n_angles), a_mid),
    }
    violated = np.zeros(x.shape[0], dtype=bool)
    margins = {}
    for name, (ratio, ap) in checks.items():
        violated |= ~(ratio < ap)
        margins[name] = float(np.max(ratio) / ap)

    e_low, e_mid, e_high = V[:, 0], V[:, 1], V[:, 2]
    n = iterates
    high = np.log(np.linalg.norm(fwd @ e_high, axis=1)) / n
    low = -np.log(np.linalg.norm(bwd @ e_low, axis=1)) / n
    area0 = np.linalg.norm(np.cross(e_mid, e_high))
    area = np.linalg.norm(np.cross(fwd @ e_mid, fwd @ e_high), axis=1)
    mid = (np.log(area / area0) - n * high) / n
    order_ok = (low.max() < mid.min()) and (mid.max() < high.min())
    order_ok = order_ok and low.max() < 0.0 < high.min()
    rates = {
        lin.labels[0]: (float(low.min()), float(low.max())),
        lin.labels[1]: (float(mid.min()), float(mid.max())),
        lin.labels[2]: (float(high.min()), float(high.max())),
    }
    verified = bool(not violated.any() and order_ok)
    cert = PHCertificate(
        apertures=(a_low, a_mid, a_high),
        iterates=n,
        grid=grid,
        verified=verified,
        case=lin.case,
        rates=rates,
        cone_margins=margins,
    )
    if not verified and raise_on_failure:
        if violated.any():
            idx = int(np.flatnonzero(violated)[0])
            raise CertificationFailed(
                f"cone invariance violated at grid point {idx} {x[idx].tolist()}",
                point=x[idx],
                index=idx,
            )
        raise CertificationFailed(f"growth rates not strictly ordered: {rates}")
    return cert
