"""Semi-conjugacy ``A o H = H o f`` with ``H = id + u`` and ``u`` Z^3-periodic.

In the eigenbasis of ``A`` the equation splits into three scalar equations

    mu_i c_i(x) = g_i(x) + c_i(f x),        g = f~ - A (eigen components)

Expanding components are fixed points of ``c <- (g + c o f) / mu`` and
contracting ones of ``c <- mu c o f^-1 - g o f^-1``; each is a contraction
with factor ``min(|mu|, 1/|mu|)``.  The fields live on a periodic grid and
compositions are sparse trilinear interpolation operators.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoConvergence, NoSuchM
from .grid import PeriodicGrid, read_field, write_field
from .maps import TorusMap
from .rng import torus_samples, uniforms
from .torus import LinearAnosov, min_displacement, wrap

RESIDUAL_TAG = "conjugacy_residual"
FIBER_TAG = "fiber_diagnostics"
RATIO_TAG = "geometric_ratio"


@dataclass
class ConjugacyField:
    resolution: int
    values: np.ndarray  # (3, n^3) eigen components of u
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns
    iterations: tuple[int, int, int]
    history: list = field(repr=False, default_factory=list)  # per component sup-changes
    grid_residual: float = 0.0
    sup_u: float = 0.0
    sup_g: float = 0.0
    sup_g_components: tuple = (0.0, 0.0, 0.0)
    interpolation: str = "trilinear"

    @property
    def grid(self) -> PeriodicGrid:
        return PeriodicGrid(self.resolution)

    @property
    def dual(self) -> np.ndarray:
        return np.linalg.inv(self.eigenvectors)

    @property
    def contraction_factors(self) -> np.ndarray:
        m = np.abs(self.eigenvalues)
        return np.minimum(m, 1.0 / m)

    @property
    def c_emp(self) -> float:
        """Empirical ratio ``sup|u| / sup|f~ - A~|`` (``nan`` for the linear map)."""
        return self.sup_u / self.sup_g if self.sup_g > 0 else float("nan")

    @property
    def c_bound(self) -> float:
        """A-priori constant from the contraction: ``sum_i |g_i| / |1 - |mu_i|| / sup|f~ - A~|``."""
        if self.sup_g <= 0:
            return float("nan")
        gi = np.asarray(self.sup_g_components)
        return float(np.sum(gi / np.abs(1.0 - np.abs(self.eigenvalues))) / self.sup_g)

    def components(self, points, f: TorusMap | None = None, refine: int = 0) -> np.ndarray:
        """Eigen components of ``u`` at ``points``, shape ``(m, 3)``.

        ``refine = K > 0`` applies the functional equation ``K`` times along
        the orbit before interpolating (forward orbit for expanding
        components, backward for contracting ones).  Interpolation error is
        then damped by the contraction factor to the power ``K``; ``f`` is
        required.
        """
        x = wrap(np.atleast_2d(np.asarray(points, dtype=float)))
        G = self.grid
        if refine <= 0:
            return (G.interpolation_matrix(x) @ self.values.T).reshape(-1, 3)
        if f is None:
            raise ValueError("orbit refinement needs the map")
        dual = self.dual
        mu = self.eigenvalues
        out = np.zeros((x.shape[0], 3))
        expanding = np.abs(mu) > 1
        if expanding.any():
            y = x.copy()
            scale = 1.0
            for _ in range(refine):
                g = f.lift_displacement(y) @ dual.T
                scale_next = scale / mu
                out[:, expanding] += (scale_next * g)[:, expanding]
                scale = scale_next
                y = f.apply(y)
            tail = G.interpolation_matrix(y) @ self.values.T
            out[:, expanding] += (scale * tail)[:, expanding]
        if (~expanding).any():
            y = x.copy()
            scale = 1.0
            for _ in range(refine):
                y = f.invert(y)
                g = f.lift_displacement(y) @ dual.T
                out[:, ~expanding] -= (scale * g)[:, ~expanding]
                scale = scale * mu
            tail = G.interpolation_matrix(y) @ self.values.T
            out[:, ~expanding] += (scale * tail)[:, ~expanding]
        return out

    def displacement(self, points, f: TorusMap | None = None, refine: int = 0) -> np.ndarray:
        """``u(x)`` in standard coordinates."""
        return self.components(points, f, refine) @ self.eigenvectors.T

    def H(self, points, f: TorusMap | None = None, refine: int = 0) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        return wrap(x + self.displacement(x, f, refine))

    def metadata(self) -> dict:
        return {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "eigenvectors": self.eigenvectors.tolist(),
            "iterations": list(self.iterations),
            "grid_residual": self.grid_residual,
            "sup_u": self.sup_u,
            "sup_g": self.sup_g,
            "sup_g_components": [float(v) for v in self.sup_g_components],
            "interpolation": self.interpolation,
        }

    def save(self, path) -> None:
        """Binary field file plus a ``.txt`` sidecar with the residual metrics."""
        path = Path(path)
        write_field(path, self.metadata(), self.values)
        side = path.with_suffix(path.suffix + ".txt")
        lines = [
            f"resolution = {self.resolution}",
            f"iterations = {' '.join(str(i) for i in self.iterations)}",
            f"grid_residual = {self.grid_residual!r}",
            f"sup_u = {self.sup_u!r}",
            f"sup_g = {self.sup_g!r}",
            f"c_emp = {self.c_emp!r}",
            f"c_bound = {self.c_bound!r}",
        ]
        side.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ConjugacyField":
        header, values = read_field(path)
        return cls(
            resolution=int(header["resolution"]),
            values=values,
            eigenvalues=np.array(header["eigenvalues"]),
            eigenvectors=np.array(header["eigenvectors"]),
            iterations=tuple(header["iterations"]),
            grid_residual=float(header["grid_residual"]),
            sup_u=float(header["sup_u"]),
            sup_g=float(header["sup_g"]),
            sup_g_components=tuple(header["sup_g_components"]),
            interpolation=header["interpolation"],
        )


def solve_semiconjugacy(
    f: TorusMap,
    A: LinearAnosov | None = None,
    resolution: int = 64,
    tol: float = 1e-12,
    max_iters: int = 1000,
) -> ConjugacyField:
    """Solve for ``u`` on a ``resolution^3`` grid by per-component contraction.

    Stops component ``i`` once the sup-change drops to ``tol * (1 - kappa_i)``,
    which bounds the distance to the grid fixed point by ``tol``.
    """
    A = f.linear if A is None else A
    if A.matrix != f.linear.matrix:
        raise ValueError("f is not homotopic to the given linear part")
    G = PeriodicGrid(resolution)
    X = G.nodes()
    V = A.eigenvectors
    dual = np.linalg.inv(V)
    mu = A.eigenvalues
    kappa = np.minimum(np.abs(mu), 1.0 / np.abs(mu))

    g_here = f.lift_displacement(X) @ dual.T
    sup_g = float(np.linalg.norm(g_here @ V.T, axis=1).max())
    expanding = np.abs(mu) > 1
    P_fwd = G.interpolation_matrix(f.apply(X)) if expanding.any() else None
    if (~expanding).any():
        Xb = f.invert(X)
        P_bwd = G.interpolation_matrix(Xb)
        g_back = f.lift_displacement(Xb) @ dual.T
    values = np.zeros((3, G.size))
    iters, history, resid = [], [], 0.0
    for i in range(3):
        log = []
        c = values[i]
        for it in range(1, max_iters + 1):
            if expanding[i]:
                new = (g_here[:, i] + P_fwd @ c) / mu[i]
            else:
                new = mu[i] * (P_bwd @ c) - g_back[:, i]
            change = float(np.abs(new - c).max())
            c = new
            log.append(change)
            if change <= tol * (1.0 - kappa[i]):
                break
        else:
            raise NoConvergence(
                f"component {i} still changing by {change:.3e} after {max_iters} iterations"
            )
        values[i] = c
        iters.append(it)
        history.append(log)
        # bound on the distance to the grid fixed point
        resid = max(resid, change * kappa[i] / (1.0 - kappa[i]))
    sup_u = float(np.linalg.norm(values.T @ V.T, axis=1).max())
    return ConjugacyField(
        resolution=G.n,
        values=values,
        eigenvalues=np.array(mu, dtype=float),
        eigenvectors=np.array(V, dtype=float),
        iterations=tuple(iters),
        history=history,
        grid_residual=resid,
        sup_u=sup_u,
        sup_g=sup_g,
        sup_g_components=tuple(float(v) for v in np.abs(g_here).max(axis=0)),
    )


def zero_field(A: LinearAnosov, resolution: int = 64) -> ConjugacyField:
    """Unsolved field ``u = 0``; its residual is the null baseline ``sup|f~ - A~|``."""
    return ConjugacyField(
        resolution=int(resolution),
        values=np.zeros((3, int(resolution) ** 3)),
        eigenvalues=np.array(A.eigenvalues, dtype=float),
        eigenvectors=np.array(A.eigenvectors, dtype=float),
        iterations=(0, 0, 0),
    )


@dataclass
class ResidualReport:
    sup: float
    mean: float
    samples: int
    refine: int
    per_component_sup: np.ndarray

    def as_dict(self) -> dict:
        return {
            "sup": self.sup,
            "mean": self.mean,
            "samples": self.samples,
            "refine": self.refine,
            "per_component_sup": [float(v) for v in self.per_component_sup],
        }


def conjugacy_residual(
    hfield: ConjugacyField,
    f: TorusMap,
    A: LinearAnosov | None = None,
    samples: int = 100_000,
    seed: int = 0,
    refine: int = 0,
    batch: int = 20_000,
) -> ResidualReport:
    """Torus distance between ``A(H(x))`` and ``H(f(x))`` at uniform random points."""
    A = f.linear if A is None else A
    Am = A.float_matrix
    sups, sums, comp = [], 0.0, np.zeros(3)
    dual = hfield.dual
    for start in range(0, samples, batch):
        x = torus_samples(seed, RESIDUAL_TAG, min(batch, samples - start), start=start)
        fx = f.apply(x)
        lhs = (x + hfield.displacement(x, f, refine)) @ Am.T
        rhs = f.apply_lift(x) + hfield.displacement(fx, f, refine)
        r = min_displacement(rhs, lhs)
        d = np.linalg.norm(r, axis=1)
        sups.append(d.max())
        sums += d.sum()
        comp = np.maximum(comp, np.abs(r @ dual.T).max(axis=0))
    return ResidualReport(float(max(sups)), float(sums / samples), samples, refine, comp)


@dataclass
class FiberReport:
    pairs: int
    threshold: float
    max_defect: float
    max_separation: float
    center_alignment: float  # |cos| between the worst pair and E^c, nan without pairs
    worst_pair: tuple | None

    def as_dict(self) -> dict:
        return {
            "pairs": self.pairs,
            "threshold": self.threshold,
            "max_defect": self.max_defect,
            "max_separation": self.max_separation,
            "center_alignment": self.center_alignment,
        }


def fiber_diagnostics(
    hfield: ConjugacyField,
    f: TorusMap,
    samples: int = 20_000,
    seed: int = 0,
    threshold: float | None = None,
    refine: int = 0,
) -> FiberReport:
    """Injectivity defect of ``H`` over random pairs whose images are close.

    Pairs with ``|H(x) - H(y)| < threshold`` (default: one grid spacing) are
    collected with a periodic KD-tree on the images.  The defect of a pair is
    ``max(0, |x - y| - |H(x) - H(y)|)``: zero for a local isometry, and of the
    order of the fiber length when ``H`` collapses a segment.  The worst
    pair's separation is compared with the center eigendirection of ``A``.
    """
    x = torus_samples(seed, FIBER_TAG, samples)
    hx = hfield.H(x, f, refine)
    h = 1.0 / hfield.resolution if threshold is None else float(threshold)
    tree = cKDTree(hx % 1.0, boxsize=1.0)
    pairs = tree.query_pairs(h, output_type="ndarray")
    if pairs.size == 0:
        return FiberReport(0, h, 0.0, 0.0, float("nan"), None)
    dx = min_displacement(x[pairs[:, 0]], x[pairs[:, 1]])
    dh = min_displacement(hx[pairs[:, 0]], hx[pairs[:, 1]])
    sep = np.linalg.norm(dx, axis=1)
    defect = np.maximum(0.0, sep - np.linalg.norm(dh, axis=1))
    k = int(np.argmax(defect))
    ec = hfield.eigenvectors[:, 1]
    align = float(abs(dx[k] @ ec) / sep[k]) if sep[k] > 0 else float("nan")
    return FiberReport(
        pairs=int(len(pairs)),
        threshold=h,
        max_defect=float(defect[k]),
        max_separation=float(sep.max()),
        center_alignment=align,
        worst_pair=(x[pairs[k, 0]].tolist(), x[pairs[k, 1]].tolist()),
    )


@dataclass
class RatioRow:
    separation: float
    min_ratio: float
    max_ratio: float
    count: int
    within: bool


@dataclass
class RatioReport:
    direction: int
    k: int
    C: float
    M: float | None
    rows: list

    def as_dict(self) -> dict:
        return {
            "direction": self.direction,
            "k": self.k,
            "C": self.C,
            "M": self.M,
            "rows": [r.__dict__ for r in self.rows],
        }


def geometric_ratio_check(
    f: TorusMap,
    A: LinearAnosov | None = None,
    k: int = 5,
    C: float = 2.0,
    samples: int = 2000,
    separations=None,
    direction: int = 2,
    seed: int = 0,
    min_denominator: float = 1e-12,
    raise_on_failure: bool = False,
) -> RatioReport:
    """Ratios ``|pi(f~^k x - f~^k y)| / |pi(A^k x - A^k y)|`` over growing separations.

    ``pi`` projects onto eigendirection ``direction`` of ``A`` along the
    other two.  Pairs whose denominator falls below ``min_denominator`` are
    dropped.  ``M`` is the smallest tested separation from which on every
    sampled ratio lies in ``[1/C, C]``; ``None`` (or :class:`NoSuchM` when
    ``raise_on_failure``) if there is none.
    """
    A = f.linear if A is None else A
    if separations is None:
        separations = np.geomspace(0.01, 1000.0, 16)
    pi = A.dual_basis[direction]
    Am = A.float_matrix
    Ak = np.linalg.matrix_power(Am, k)
    rows = []
    for j, s in enumerate(separations):
        u = uniforms(seed, f"{RATIO_TAG}:{j}", 0, samples, 4)
        x = u[:, :3]
        d = uniforms(seed, f"{RATIO_TAG}:dir:{j}", 0, samples, 3) * 2.0 - 1.0
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        # random base point in a box of the size of the separation, on the lift
        x = x * max(1.0, s)
        y = x + s * d
        num = np.abs((f.iterate_lift(x, k) - f.iterate_lift(y, k)) @ pi)
        den = np.abs((x - y) @ Ak.T @ pi)
        keep = den > min_denominator
        ratio = num[keep] / den[keep]
        if ratio.size == 0:
            rows.append(RatioRow(float(s), float("nan"), float("nan"), 0, False))
            continue
        lo, hi = float(ratio.min()), float(ratio.max())
        rows.append(RatioRow(float(s), lo, hi, int(ratio.size), bool(lo >= 1 / C and hi <= C)))
    M = None
    for j in range(len(rows)):
        if all(r.within for r in rows[j:]):
            M = 0.0 if j == 0 else rows[j].separation
            break
    if M is None and raise_on_failure:
        raise NoSuchM(f"no tested separation keeps all ratios within [1/{C}, {C}]")
    return RatioReport(direction, k, C, M, rows)
