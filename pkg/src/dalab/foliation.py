"""Invariant line fields, center curves, foliated boxes and center holonomies.

Each line field is the attracting fixed point of a projective transfer
``E(x) <- normalize(M(x) E(s(x)))`` on a periodic grid:

========  ==========  ============================  ===================
field     s(x)        M(x)                          contraction
========  ==========  ============================  ===================
high      f^-1 x      Df(f^-1 x)                    e^(mid - high)
low       f x         Df(x)^-1                      e^(low - mid)
nu_high   f x         Df(x)^T                       e^(mid - high)
nu_low    f^-1 x      Df(f^-1 x)^-T                 e^(low - mid)
========  ==========  ============================  ===================

``nu_high`` annihilates the plane ``E_low + E_mid`` and ``nu_low`` the
plane ``E_mid + E_high``, so the middle field is ``nu_high x nu_low``.
Off the grid a field can be refined by exact transfer steps before
interpolation, which damps the interpolation error by the contraction
factor per step.  ``K`` is the step count of the slower kind; the faster
kind takes just enough steps to reach the same damping.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import LeafCollision, LeafEscape, NoConvergence, SignFlip
from .grid import PeriodicGrid, read_field, write_field
from .maps import InverseMap, TorusMap, inv3, inv3_transpose
from .rng import torus_samples
from .torus import LinearAnosov, wrap

DEFAULT_REFINE = 20
INVARIANCE_TAG = "bundle_invariance"
_KINDS = ("high", "low", "nu_high", "nu_low")


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _align(v, ref):
    s = np.sign(v @ ref)
    s[s == 0] = 1.0
    return v * s[..., None]


def _transfer(f: TorusMap, kind: str, x: np.ndarray):
    """``(s(x), M(x))`` for one transfer step of ``kind``."""
    if isinstance(f, InverseMap):
        # same steps written through the base map, avoiding a second inversion
        b = f.base
        if kind == "high":
            return b.apply(x), inv3(b.derivative(x))
        if kind == "low":
            y = b.invert(x)
            return y, b.derivative(y)
        if kind == "nu_high":
            y = b.invert(x)
            return y, inv3_transpose(b.derivative(y))
        if kind == "nu_low":
            return b.apply(x), np.swapaxes(b.derivative(x), 1, 2)
    if kind == "high":
        y = f.invert(x)
        return y, f.derivative(y)
    if kind == "low":
        return f.apply(x), inv3(f.derivative(x))
    if kind == "nu_high":
        return f.apply(x), np.swapaxes(f.derivative(x), 1, 2)
    if kind == "nu_low":
        y = f.invert(x)
        return y, inv3_transpose(f.derivative(y))
    raise ValueError(f"unknown transfer kind {kind!r}")


def _reference(A: LinearAnosov, kind: str) -> np.ndarray:
    if kind == "high":
        return A.eigenvectors[:, 2]
    if kind == "low":
        return A.eigenvectors[:, 0]
    if kind == "nu_high":
        return _normalize(A.dual_basis[2])
    return _normalize(A.dual_basis[0])


def refine_steps(A: LinearAnosov, kind: str, refine: int) -> int:
    """Transfer steps for ``kind`` matching the damping of ``refine`` steps of the slower kind."""
    if refine <= 0:
        return 0
    lo, mid, hi = np.log(np.abs(A.eigenvalues))
    rates = {"high": mid - hi, "nu_high": mid - hi, "low": lo - mid, "nu_low": lo - mid}
    slow = max(rates.values())
    return int(np.ceil(refine * slow / rates[kind] - 1e-9))


def label_index(A: LinearAnosov, label: str) -> int:
    try:
        return A.labels.index(label)
    except ValueError:
        raise ValueError(f"label {label!r} not in {A.labels}") from None


@dataclass
class BundleField:
    label: str
    index: int  # 0 low, 1 mid, 2 high
    resolution: int
    grids: dict  # kind -> (n^3, 3) unit vectors
    reference: np.ndarray  # linear eigenvector, sets the orientation
    iterations: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict, repr=False)
    invariance_residual: float = float("nan")

    @property
    def kinds(self) -> tuple:
        return ("nu_high", "nu_low") if self.index == 1 else (("low",) if self.index == 0 else ("high",))

    @property
    def grid(self) -> PeriodicGrid:
        return PeriodicGrid(self.resolution)

    @property
    def vectors(self) -> np.ndarray:
        """Node values of the field itself."""
        if self.index == 1:
            return _align(_normalize(np.cross(self.grids["nu_high"], self.grids["nu_low"])), self.reference)
        return self.grids[self.kinds[0]]

    def _eval_kind(self, kind, x, f, refine):
        G = self.grid
        if refine <= 0:
            return _normalize(G.interpolation_matrix(x) @ self.grids[kind])
        chain, mats = [x], []
        for _ in range(refine_steps(f.linear, kind, refine)):
            y, M = _transfer(f, kind, chain[-1])
            mats.append(M)
            chain.append(y)
        v = _normalize(G.interpolation_matrix(chain[-1]) @ self.grids[kind])
        for M in reversed(mats):
            v = _normalize(np.einsum("nij,nj->ni", M, v))
        return v

    def evaluate(self, points, f: TorusMap | None = None, refine: int = 0) -> np.ndarray:
        """Unit vectors at ``points`` with positive inner product with the linear eigenvector."""
        x = wrap(np.atleast_2d(np.asarray(points, dtype=float)))
        if refine > 0 and f is None:
            raise ValueError("orbit refinement needs the map")
        if self.index == 1:
            a = self._eval_kind("nu_high", x, f, refine)
            b = self._eval_kind("nu_low", x, f, refine)
            v = _normalize(np.cross(a, b))
        else:
            v = self._eval_kind(self.kinds[0], x, f, refine)
        return _align(v, self.reference)

    def save(self, path) -> None:
        kinds = self.kinds
        header = {
            "label": self.label,
            "index": self.index,
            "kinds": list(kinds),
            "reference": self.reference.tolist(),
            "iterations": self.iterations,
            "invariance_residual": self.invariance_residual,
        }
        # each kind contributes three component grids
        grids = np.concatenate([self.grids[k].T for k in kinds], axis=0)
        write_field(path, header, grids)
        side = Path(path)
        side = side.with_suffix(side.suffix + ".txt")
        side.write_text(
            f"label = {self.label}\nresolution = {self.resolution}\n"
            f"invariance_residual = {self.invariance_residual!r}\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "BundleField":
        header, grids = read_field(path)
        kinds = header["kinds"]
        return cls(
            label=header["label"],
            index=int(header["index"]),
            resolution=int(header["resolution"]),
            grids={k: grids[3 * i : 3 * i + 3].T.copy() for i, k in enumerate(kinds)},
            reference=np.array(header["reference"]),
            iterations=header["iterations"],
            invariance_residual=float(header["invariance_residual"]),
        )


def _iterate_kind(f, A, kind, G, tol, max_iters):
    X = G.nodes()
    Y, M = _transfer(f, kind, X)
    P = G.interpolation_matrix(Y)
    ref = _reference(A, kind)
    E = np.broadcast_to(ref, X.shape).copy()
    log = []
    for it in range(1, max_iters + 1):
        new = _align(_normalize(np.einsum("nij,nj->ni", M, P @ E)), ref)
        cosang = np.clip(np.einsum("ni,ni->n", new, E), -1.0, 1.0)
        # chord-based angle keeps resolution near zero
        change = float((2 * np.arcsin(np.linalg.norm(new - E, axis=1) / 2)).max())
        E = new
        log.append(change)
        if change <= tol:
            return E, it, log
        if np.any(cosang < 0):
            raise SignFlip(f"{kind} field reversed orientation during iteration {it}")
    raise NoConvergence(f"{kind} field still moving by {change:.3e} rad after {max_iters} iterations")


def compute_bundle(
    f: TorusMap,
    label: str,
    resolution: int = 32,
    tol: float = 1e-10,
    max_iters: int = 300,
    residual_samples: int = 10_000,
    refine: int = DEFAULT_REFINE,
    seed: int = 0,
) -> BundleField:
    """Converge one invariant line field on a ``resolution^3`` grid.

    ``label`` is one of ``A.labels``.  The invariance residual is measured
    at ``residual_samples`` random points with ``refine`` transfer steps
    (pass 0 samples to skip).
    """
    A = f.linear
    idx = label_index(A, label)
    G = PeriodicGrid(resolution)
    kinds = ("nu_high", "nu_low") if idx == 1 else (("low",) if idx == 0 else ("high",))
    grids, iters, hist = {}, {}, {}
    for k in kinds:
        grids[k], iters[k], hist[k] = _iterate_kind(f, A, k, G, tol, max_iters)
    bf = BundleField(label, idx, G.n, grids, A.eigenvectors[:, idx].copy(), iters, hist)
    if residual_samples > 0:
        bf.invariance_residual = invariance_residual(bf, f, residual_samples, seed, refine)
    return bf


def invariance_residual(
    bf: BundleField, f: TorusMap, samples: int = 100_000, seed: int = 0, refine: int = DEFAULT_REFINE,
    batch: int = 25_000,
) -> float:
    """Max angle between ``Df(x) E(x)`` and ``E(f x)`` over uniform random points."""
    worst = 0.0
    for start in range(0, samples, batch):
        x = torus_samples(seed, INVARIANCE_TAG, min(batch, samples - start), start=start)
        v = _normalize(np.einsum("nij,nj->ni", f.derivative(x), bf.evaluate(x, f, refine)))
        w = bf.evaluate(f.apply(x), f, refine)
        v = _align(v, w[0] * 0 + bf.reference)
        ang = 2 * np.arcsin(np.minimum(1.0, np.linalg.norm(v - w, axis=1) / 2))
        worst = max(worst, float(ang.max()))
    return worst


def dominance_check(f: TorusMap, bundles: dict, x, n: int = 20, refine: int = DEFAULT_REFINE):
    """Per-point growth ``log |Df^n v| / n`` along the three fields; ``(m, 3)`` low, mid, high."""
    x = wrap(np.atleast_2d(np.asarray(x, dtype=float)))
    out = np.zeros((x.shape[0], 3))
    for bf in bundles.values():
        v = bf.evaluate(x, f, refine)
        y = x.copy()
        acc = np.zeros(x.shape[0])
        for _ in range(n):
            v = np.einsum("nij,nj->ni", f.derivative(y), v)
            s = np.linalg.norm(v, axis=1)
            acc += np.log(s)
            v = v / s[:, None]
            y = f.apply(y)
        out[:, bf.index] = acc / n
    return out


# ---------------------------------------------------------------------------
# curves


@dataclass
class CenterCurve:
    base: np.ndarray
    points: np.ndarray  # lifted polyline (not wrapped), base at index ``base_index``
    arclength: np.ndarray  # signed, strictly increasing
    step: float
    base_index: int
    label: str = ""

    @property
    def torus_points(self) -> np.ndarray:
        return wrap(self.points)

    def at(self, t) -> np.ndarray:
        """Lifted point at signed arclength ``t`` (piecewise-linear)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.interp(t, self.arclength, self.points[:, i]) for i in range(3)], axis=1)

    @property
    def length(self) -> float:
        return float(self.arclength[-1] - self.arclength[0])


class FieldFlow:
    """RK4 integration of a unit line field with orientation continuation.

    Integrates many curves at once; ``direction`` holds the current
    orientation of each curve and every field evaluation is flipped to agree
    with it.  A field vector nearly orthogonal to the current tangent means
    the orientation is ambiguous and raises :class:`SignFlip`.
    """

    def __init__(self, bf: BundleField, f: TorusMap | None = None, refine: int = DEFAULT_REFINE):
        self.bf = bf
        self.f = f
        self.refine = refine if f is not None else 0

    def field(self, x, orient):
        v = self.bf.evaluate(wrap(x), self.f, self.refine)
        d = np.einsum("ni,ni->n", v, orient)
        if np.any(np.abs(d) < 0.5):
            raise SignFlip("field direction ambiguous along the curve")
        return v * np.sign(d)[:, None]

    def step(self, x, orient, h):
        k1 = self.field(x, orient)
        k2 = self.field(x + 0.5 * h * k1, k1)
        k3 = self.field(x + 0.5 * h * k2, k2)
        k4 = self.field(x + h * k3, k3)
        dx = h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        return x + dx, k4

    def trace(self, x0, length: float, h: float, sign: float = 1.0) -> np.ndarray:
        """Points at arclength ``0, h, ..., length`` (last step shortened), shape ``(steps+1, m, 3)``."""
        x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
        orient = sign * np.broadcast_to(self.bf.reference, x.shape)
        orient = self.field(x, orient)
        nsteps = int(np.ceil(length / h - 1e-12)) if length > 0 else 0
        out = [x]
        done = 0.0
        for _ in range(nsteps):
            hh = min(h, length - done)
            x, orient = self.step(x, orient, hh)
            done += hh
            out.append(x)
        return np.stack(out)

    def flow(self, x0, t, h: float = 0.01, nsteps: int | None = None) -> np.ndarray:
        """Endpoints after signed arclength ``t`` (scalar or per point).

        Each point takes ``ceil(|t| / h)`` equal steps, so the result for a
        point does not depend on the rest of the batch.  A fixed ``nsteps``
        instead makes the endpoint a smooth function of ``t``.
        """
        x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        if nsteps is not None:
            nsteps = np.full(x.shape[0], int(nsteps))
        else:
            nsteps = np.maximum(1, np.ceil(np.abs(t) / h - 1e-9)).astype(int)
        nsteps[t == 0] = 0
        if nsteps.max(initial=0) == 0:
            return x
        hh = np.abs(t) / np.maximum(nsteps, 1)
        orient = np.where(t[:, None] < 0, -1.0, 1.0) * self.bf.reference
        live = nsteps > 0
        orient[live] = self.field(x[live], orient[live])
        for k in range(int(nsteps.max())):
            act = nsteps > k
            xa, oa = self.step(x[act], orient[act], hh[act][:, None])
            x[act], orient[act] = xa, oa
        return x


def integrate_center_curve(
    bf: BundleField,
    x0,
    half_length: float = 0.2,
    step: float = 0.005,
    f: TorusMap | None = None,
    refine: int = DEFAULT_REFINE,
) -> CenterCurve:
    """Integral curve of ``bf`` through ``x0`` of arclength ``half_length`` each way.

    Without ``f`` the field is plainly interpolated; with ``f`` it is
    refined along orbits.
    """
    x0 = np.asarray(x0, dtype=float).reshape(3)
    flow = FieldFlow(bf, f, refine)
    fwd = flow.trace(x0, half_length, step, 1.0)[:, 0]
    bwd = flow.trace(x0, half_length, step, -1.0)[:, 0]
    pts = np.concatenate([bwd[::-1], fwd[1:]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    s -= s[len(bwd) - 1]
    if np.any(np.diff(s) <= 0):
        raise SignFlip("curve arclength not strictly increasing")
    return CenterCurve(x0, pts, s, step, len(bwd) - 1, bf.label)


def tangent_alignment(curve: CenterCurve, bf: BundleField, f=None, refine=DEFAULT_REFINE) -> float:
    """Max angle between polyline segments and the field at segment midpoints."""
    d = np.diff(curve.points, axis=0)
    mid = curve.points[:-1] + 0.5 * d
    v = bf.evaluate(mid, f, refine if f is not None else 0)
    c = np.abs(np.einsum("ni,ni->n", _normalize(d), v))
    return float(np.arccos(np.clip(c, -1.0, 1.0)).max())


def _point_to_polyline(p, poly):
    """Distance from each lifted point in ``p`` to the lifted polyline ``poly``."""
    a, b = poly[:-1], poly[1:]
    ab = b - a
    L2 = np.einsum("ki,ki->k", ab, ab)
    out = np.empty(p.shape[0])
    for i, q in enumerate(p):
        t = np.clip(np.einsum("ki,ki->k", q - a, ab) / L2, 0.0, 1.0)
        out[i] = np.sqrt(((a + t[:, None] * ab - q) ** 2).sum(axis=1)).min()
    return out


def densify(points, per_segment: int = 8) -> np.ndarray:
    """Cubic spline through a smooth polyline in chord length, ``per_segment`` samples per segment.

    Removes the O(step^2) chord sag of the polyline itself, so distances
    to the result reflect integration error.
    """
    pts = np.asarray(points, dtype=float)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    if len(pts) < 4:
        return pts
    u = np.linspace(0.0, s[-1], per_segment * (len(pts) - 1) + 1)
    return CubicSpline(s, pts, axis=0)(u)


def image_coherence(f: TorusMap, curve: CenterCurve, image_curve: CenterCurve) -> float:
    """One-sided Hausdorff distance from ``f(curve)`` to ``image_curve`` (lifted, aligned at the base)."""
    img = f.apply_lift(curve.points)
    shift = image_curve.points[image_curve.base_index] - f.apply_lift(curve.base[None])[0]
    shift = np.round(shift)
    return float(_point_to_polyline(img + shift, densify(image_curve.points)).max())


def write_curve_csv(path, curves) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "s", "x", "y", "z"])
        for j, c in enumerate(curves):
            for s, p in zip(c.arclength, c.torus_points):
                w.writerow([j, repr(float(s)), repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])


# ---------------------------------------------------------------------------
# foliated boxes


@dataclass
class FoliatedBox:
    base: np.ndarray
    a: np.ndarray  # strong transversal parameters
    b: np.ndarray  # other transversal parameters
    transversal: np.ndarray  # (na, nb, 3) lifted points
    leaf_param: np.ndarray  # (nt,) in [-L, L]
    leaves: np.ndarray  # (na, nb, nt, 3) lifted points
    L: float
    labels: tuple
    flows: dict = field(repr=False, default_factory=dict)
    steps: tuple = (10, 10, 20)

    def point(self, i: int, j: int, t) -> np.ndarray:
        leaf = self.leaves[i, j]
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.interp(t, self.leaf_param, leaf[:, k]) for k in range(3)], axis=1)

    def chart(self, abt) -> np.ndarray:
        """Continuous chart ``(a, b, t) -> Phi^c_t(Phi^2_b(Phi^1_a(x)))`` on the lift."""
        abt = np.atleast_2d(np.asarray(abt, dtype=float))
        f1, f2, fc = (self.flows[k] for k in ("t1", "t2", "c"))
        n1, n2, nc = self.steps
        base = np.broadcast_to(self.base, (abt.shape[0], 3))
        T = f2.flow(f1.flow(base, abt[:, 0], nsteps=n1), abt[:, 1], nsteps=n2)
        return fc.flow(T, abt[:, 2], nsteps=nc)

    @property
    def sizes(self) -> tuple[float, float]:
        return float(self.a[-1]), float(self.b[-1])

    def _lattice_eval(self, c):
        """Trilinear interpolant of the sampled leaves and its Jacobian at ``c``."""
        P = self.leaves
        grids = (self.a, self.b, self.leaf_param)
        idx, frac, step = [], [], []
        for k, g in enumerate(grids):
            h = g[1] - g[0]
            u = (c[:, k] - g[0]) / h
            i = np.clip(np.floor(u).astype(np.int64), 0, len(g) - 2)
            idx.append(i)
            frac.append(u - i)
            step.append(h)
        val = np.zeros((c.shape[0], 3))
        jac = np.zeros((c.shape[0], 3, 3))
        for da in (0, 1):
            for db in (0, 1):
                for dt in (0, 1):
                    corner = P[idx[0] + da, idx[1] + db, idx[2] + dt]
                    w = [frac[k] if d else 1.0 - frac[k] for k, d in enumerate((da, db, dt))]
                    dw = [(1.0 if d else -1.0) / step[k] for k, d in enumerate((da, db, dt))]
                    val += (w[0] * w[1] * w[2])[:, None] * corner
                    jac[:, :, 0] += (dw[0] * w[1] * w[2])[:, None] * corner
                    jac[:, :, 1] += (w[0] * dw[1] * w[2])[:, None] * corner
                    jac[:, :, 2] += (w[0] * w[1] * dw[2])[:, None] * corner
        return val, jac

    def lattice_coordinates(self, y, tol: float = 1e-12, max_iter: int = 20):
        """Fast approximate box coordinates by inverting the trilinear leaf lattice.

        Exact for affine charts (the linear map); otherwise accurate to the
        interpolation error of the sampled leaves.  Returns ``(coords,
        converged)``; points far outside the box may not converge.
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        P = self.leaves
        ia, ib, it = (n // 2 for n in P.shape[:3])
        e = np.stack(
            [
                (P[-1, ib, it] - P[0, ib, it]) / (self.a[-1] - self.a[0]),
                (P[ia, -1, it] - P[ia, 0, it]) / (self.b[-1] - self.b[0]),
                (P[ia, ib, -1] - P[ia, ib, 0]) / (self.leaf_param[-1] - self.leaf_param[0]),
            ],
            axis=1,
        )
        c = np.linalg.solve(e, (y - self.base).T).T
        r = np.full(y.shape[0], np.inf)
        for _ in range(max_iter):
            val, jac = self._lattice_eval(c)
            res = val - y
            r = np.abs(res).max(axis=1)
            if r.max() <= tol:
                break
            c = c - np.linalg.solve(jac, res[..., None])[..., 0]
        return c, r <= max(tol, 1e-9)

    def locate(self, y, tol: float = 1e-10, max_iter: int = 30) -> np.ndarray:
        """Box coordinates ``(a, b, t)`` of lifted points ``y`` by Newton on :meth:`chart`."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        E = np.stack([self.flows[k].bf.evaluate(self.base[None])[0] for k in ("t1", "t2", "c")], axis=1)
        c = np.linalg.solve(E, (y - self.base).T).T
        h = 1e-6
        offsets = np.concatenate([np.zeros((1, 3)), h * np.eye(3), -h * np.eye(3)])
        m = c.shape[0]
        for _ in range(max_iter):
            vals = self.chart((c[:, None, :] + offsets[None]).reshape(-1, 3)).reshape(m, 7, 3)
            r = vals[:, 0] - y
            if np.abs(r).max() <= tol:
                break
            J = np.transpose((vals[:, 1:4] - vals[:, 4:7]) / (2 * h), (0, 2, 1))
            c = c - np.linalg.solve(J, r[..., None])[..., 0]
        return c


def build_foliated_box(
    f: TorusMap,
    x,
    bundles: dict,
    sizes=(0.1, 0.1),
    L: float = 0.2,
    n_transversal: int = 5,
    n_leaf: int = 41,
    refine: int = DEFAULT_REFINE,
    collision_tol: float | None = None,
    h: float = 0.01,
) -> FoliatedBox:
    """Product chart around ``x``: a transversal grid spanned by the two non-center fields.

    ``bundles`` maps labels to converged :class:`BundleField` objects and
    must hold all three directions.  The transversal is
    ``Phi^high_b(Phi^low_a(x))`` with ``|a| <= sizes[0]``, ``|b| <= sizes[1]``;
    a center leaf of half-length ``L`` hangs from each transversal point.
    """
    A = f.linear
    lo, mid, hi = (bundles[lab] for lab in A.labels)
    flows = {"t1": FieldFlow(lo, f, refine), "t2": FieldFlow(hi, f, refine), "c": FieldFlow(mid, f, refine)}
    x = np.asarray(x, dtype=float).reshape(3)
    a = np.linspace(-sizes[0], sizes[0], n_transversal)
    b = np.linspace(-sizes[1], sizes[1], n_transversal)
    t = np.linspace(-L, L, n_leaf)
    # fixed step counts keep the chart smooth in (a, b, t)
    steps = tuple(max(1, int(np.ceil(s_ / h))) for s_ in (sizes[0], sizes[1], L))
    box = FoliatedBox(x, a, b, None, t, None, L, A.labels, flows, steps)
    A_, B_ = np.meshgrid(a, b, indexing="ij")
    base = np.broadcast_to(x, (A_.size, 3))
    T = flows["t2"].flow(flows["t1"].flow(base, A_.ravel(), nsteps=steps[0]), B_.ravel(), nsteps=steps[1])
    pts = flows["c"].flow(np.repeat(T, n_leaf, axis=0), np.tile(t, A_.size), nsteps=steps[2])
    box.transversal = T.reshape(n_transversal, n_transversal, 3)
    box.leaves = pts.reshape(n_transversal, n_transversal, n_leaf, 3)
    tol = (min(sizes) / max(1, n_transversal - 1)) * 0.25 if collision_tol is None else collision_tol
    _check_leaves(box, tol)
    return box


def _check_leaves(box: FoliatedBox, tol: float) -> None:
    pts = box.leaves.reshape(-1, box.leaves.shape[2], 3)
    owner = np.repeat(np.arange(pts.shape[0]), pts.shape[1])
    tree = cKDTree(wrap(pts.reshape(-1, 3)), boxsize=1.0)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    if pairs.size and np.any(owner[pairs[:, 0]] != owner[pairs[:, 1]]):
        k = np.flatnonzero(owner[pairs[:, 0]] != owner[pairs[:, 1]])[0]
        raise LeafCollision(
            f"leaves {owner[pairs[k, 0]]} and {owner[pairs[k, 1]]} come within {tol:.3g}; shrink the box"
        )


# ---------------------------------------------------------------------------
# holonomy


@dataclass
class HolonomyMap:
    kind: str
    source: np.ndarray  # (m, 3) lifted
    target_curve: np.ndarray  # (k, 3) lifted polyline
    source_param: np.ndarray
    target_param: np.ndarray
    leaf_time: np.ndarray
    miss: np.ndarray  # distance of each hit to the target polyline
    lipschitz: tuple[float, float]  # max d(target)/d(source), max d(source)/d(target)

    @property
    def monotone(self) -> bool:
        d = np.diff(self.target_param)
        return bool(np.all(d > 0) or np.all(d < 0))

    def __call__(self, s):
        return np.interp(s, self.source_param, self.target_param)


def transversal_curve(bf: BundleField, f, x, half: float, n: int, refine=DEFAULT_REFINE):
    """Integral curve of ``bf`` through ``x`` sampled at ``n`` equally spaced parameters."""
    flow = FieldFlow(bf, f, refine)
    s = np.linspace(-half, half, n)
    return s, flow.flow(np.broadcast_to(np.asarray(x, float), (n, 3)), s)


def center_holonomy(
    f: TorusMap,
    bundles: dict,
    kind: str,
    source,
    target,
    source_param=None,
    max_length: float = 1.0,
    tol: float = 1e-12,
    refine: int = DEFAULT_REFINE,
    step: float = 0.01,
) -> HolonomyMap:
    """Slide source points along center leaves until they cross the target transversal.

    ``kind`` is ``"cs"`` or ``"cu"``.  ``source`` and ``target`` are lifted
    polylines in one plaque.  The crossing is located by bisection on leaf
    arclength against the signed distance to the plane through the nearest
    target point spanned by the target tangent and the transverse
    direction, oriented by the center field.
    """
    if kind not in ("cs", "cu"):
        raise ValueError("plaque kind must be 'cs' or 'cu'")
    A = f.linear
    mid = bundles[A.labels[1]]
    other = bundles[A.labels[0] if kind == "cu" else A.labels[2]]
    flow = FieldFlow(mid, f, refine)
    src = np.atleast_2d(np.asarray(source, dtype=float))
    tgt = np.atleast_2d(np.asarray(target, dtype=float))
    if source_param is None:
        source_param = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(src, axis=0), axis=1))])
    a, ab = tgt[:-1], np.diff(tgt, axis=0)
    seg_len = np.linalg.norm(ab, axis=1)
    tgt_s = np.concatenate([[0.0], np.cumsum(seg_len)])
    # per-segment normal inside the plaque: tangent x transverse direction, oriented along the center
    midpts = a + 0.5 * ab
    normals = _normalize(np.cross(ab / seg_len[:, None], other.evaluate(midpts, f, refine)))
    normals = _align(normals, mid.reference)

    def project(p):
        u = np.clip(np.einsum("mki,ki->mk", p[:, None, :] - a[None], ab) / seg_len**2, 0.0, 1.0)
        d = np.linalg.norm(a[None] + u[..., None] * ab[None] - p[:, None, :], axis=2)
        k = np.argmin(d, axis=1)
        r = np.arange(len(p))
        foot = a[k] + u[r, k][:, None] * ab[k]
        return k, u[r, k], d[r, k], np.einsum("mi,mi->m", p - foot, normals[k])

    _, _, _, d0 = project(src)
    sign0 = np.where(d0 >= 0, 1.0, -1.0)
    # march towards the target, i.e. against the signed distance
    orient = flow.field(src, -sign0[:, None] * mid.reference)
    x = src.copy()
    travelled = np.zeros(len(src))
    found = np.zeros(len(src), dtype=bool)
    prev_x, prev_o = x.copy(), orient.copy()
    for _ in range(int(np.ceil(max_length / step))):
        act = ~found
        if not act.any():
            break
        prev_x[act], prev_o[act] = x[act], orient[act]
        x[act], orient[act] = flow.step(x[act], orient[act], step)
        travelled[act] += step
        _, _, _, d = project(x[act])
        found[np.flatnonzero(act)[np.sign(d) != sign0[act]]] = True
    if not found.all():
        raise LeafEscape(f"{int((~found).sum())} leaf(s) did not reach the target within {max_length}")
    # bisection on the length of the last step
    lo = np.zeros(len(src))
    hi = np.full(len(src), step)
    for _ in range(80):
        t = 0.5 * (lo + hi)
        xm, _ = flow.step(prev_x, prev_o, t[:, None])
        _, _, _, d = project(xm)
        same = np.sign(d) == sign0
        lo = np.where(same, t, lo)
        hi = np.where(same, hi, t)
        if (hi - lo).max() < tol:
            break
    t = 0.5 * (lo + hi)
    hits, _ = flow.step(prev_x, prev_o, t[:, None])
    leaf_time = -sign0 * (travelled - step + t)
    k, u, miss, _ = project(hits)
    tp = tgt_s[k] + u * seg_len[k]
    ds = np.diff(source_param)
    dt = np.diff(tp)
    with np.errstate(divide="ignore"):
        lip = (float(np.max(np.abs(dt / ds))), float(np.max(np.abs(ds / dt))))
    return HolonomyMap(kind, src, tgt, np.asarray(source_param), tp, leaf_time, miss, lip)


def holonomy_pair(
    f: TorusMap,
    bundles: dict,
    x,
    kind: str = "cu",
    half: float = 0.05,
    gap: float = 0.1,
    n: int = 21,
    refine: int = DEFAULT_REFINE,
):
    """Source and target transversals in one plaque through ``x``.

    The transversal direction is the non-center field inside the plaque
    (the high field for ``cu``, the low field for ``cs``); the target is the
    transversal through the point at center arclength ``gap`` from ``x``.
    """
    A = f.linear
    mid = bundles[A.labels[1]]
    tr = bundles[A.labels[2] if kind == "cu" else A.labels[0]]
    x = np.asarray(x, dtype=float).reshape(3)
    y = FieldFlow(mid, f, refine).flow(x[None], gap)[0]
    s, src = transversal_curve(tr, f, x, half, n, refine)
    _, tgt = transversal_curve(tr, f, y, 2 * half, 2 * n, refine)
    return s, src, tgt, y


def write_holonomy_csv(path, hol: HolonomyMap) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_s", "target_s", "leaf_time", "miss"])
        for row in zip(hol.source_param, hol.target_param, hol.leaf_time, hol.miss):
            w.writerow([repr(float(v)) for v in row])
