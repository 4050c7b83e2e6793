"""Conditional measures of volume along center leaves, and the scaled leaf measures m_{x,k}.

Volume samples in a foliated box are mapped to box coordinates
``(a, b, t)``; binning ``t`` per transversal cell gives a histogram estimate
of the conditional measure on that bundle of leaf segments.

The leaf measures live on a map whose center expands.  When the linear
part contracts its center, the construction runs on ``f^-1``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.interpolate import CubicHermiteSpline

from .errors import InsufficientSamples, NoCrossing
from .foliation import (
    DEFAULT_REFINE,
    BundleField,
    FieldFlow,
    FoliatedBox,
    compute_bundle,
)
from .maps import TorusMap
from .parallel import chunked_map
from .rng import torus_samples, uniforms
from .torus import LinearAnosov, wrap

SAMPLE_TAG = "disintegration"
BIRKHOFF_TAG = "birkhoff"

LEBESGUE = "LEBESGUE_LIKE"
ATOMIC = "ATOMIC_LIKE"
SINGULAR = "SINGULAR_CONTINUOUS_LIKE"
INCONCLUSIVE = "INCONCLUSIVE"


# ---------------------------------------------------------------------------
# histograms


@dataclass
class ConditionalHistogram:
    cell: tuple[int, int]
    edges: np.ndarray
    masses: np.ndarray
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass
class ConditionalEstimate:
    """Counts per (transversal cell, finest leaf bin) plus sampling bookkeeping."""

    counts: np.ndarray  # (cells_a, cells_b, bins) int64
    L: float
    sizes: tuple[float, float]
    drawn: int
    seed: int
    region_volume: float

    @property
    def bins(self) -> int:
        return self.counts.shape[2]

    @property
    def cell_counts(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    @property
    def in_box(self) -> int:
        return int(self.counts.sum())

    def level(self, bins: int) -> tuple[np.ndarray, np.ndarray]:
        """Masses ``(n_cells, bins)`` and counts ``(n_cells,)`` after merging adjacent bins."""
        if self.bins % bins:
            raise ValueError(f"{bins} does not divide the finest bin count {self.bins}")
        c = self.counts.reshape(-1, bins, self.bins // bins).sum(axis=2)
        n = c.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(n[:, None] > 0, c / np.maximum(n, 1)[:, None], 0.0)
        return m, n

    def histograms(self, bins: int | None = None) -> list[ConditionalHistogram]:
        bins = self.bins if bins is None else bins
        m, n = self.level(bins)
        edges = np.linspace(-self.L, self.L, bins + 1)
        ca, cb = self.counts.shape[:2]
        return [
            ConditionalHistogram((i // cb, i % cb), edges, m[i], int(n[i])) for i in range(ca * cb)
        ]


def _bounding_region(box: FoliatedBox, pad: float = 0.0):
    P = box.leaves.reshape(-1, 3)
    lo, hi = P.min(axis=0) - pad, P.max(axis=0) + pad
    if np.any(hi - lo >= 1.0):
        raise ValueError("box does not fit in a fundamental domain")
    return lo, hi


def _conditional_chunk(start, stop, box, lo, hi, cells, bins, seed):
    u = uniforms(seed, SAMPLE_TAG, start, stop - start, 3)
    y = lo + u * (hi - lo)
    c, ok = box.lattice_coordinates(y)
    sa, sb = box.sizes
    inside = ok & (np.abs(c[:, 0]) <= sa) & (np.abs(c[:, 1]) <= sb) & (np.abs(c[:, 2]) <= box.L)
    c = c[inside]
    ia = np.clip(((c[:, 0] + sa) / (2 * sa) * cells[0]).astype(int), 0, cells[0] - 1)
    ib = np.clip(((c[:, 1] + sb) / (2 * sb) * cells[1]).astype(int), 0, cells[1] - 1)
    it = np.clip(((c[:, 2] + box.L) / (2 * box.L) * bins).astype(int), 0, bins - 1)
    flat = (ia * cells[1] + ib) * bins + it
    return np.bincount(flat, minlength=cells[0] * cells[1] * bins), (c, ia * cells[1] + ib)


def estimate_conditionals(
    box: FoliatedBox,
    samples: int = 1_000_000,
    bins: int = 64,
    seed: int = 0,
    cells: tuple[int, int] = (4, 4),
    min_count: int = 100,
    workers: int | None = None,
    chunk_size: int = 100_000,
    keep_samples: bool = False,
):
    """Histogram the leaf coordinate of uniform volume samples, per transversal cell.

    ``samples`` points are drawn uniformly in the axis-aligned region
    enclosing the box (on the lift); those that fall inside the box are
    binned.  Raises :class:`InsufficientSamples` if a cell gets fewer than
    ``min_count`` points.  With ``keep_samples`` the per-sample coordinates
    and cell indices are returned as a second value.
    """
    lo, hi = _bounding_region(box)
    parts = chunked_map(
        _conditional_chunk, samples, chunk_size, (box, lo, hi, tuple(cells), bins, seed), workers
    )
    counts = np.zeros(cells[0] * cells[1] * bins, dtype=np.int64)
    for cnt, _ in parts:
        counts += cnt
    est = ConditionalEstimate(
        counts.reshape(cells[0], cells[1], bins), box.L, box.sizes, samples, seed, float(np.prod(hi - lo))
    )
    low = est.cell_counts.min()
    if low < min_count:
        raise InsufficientSamples(f"a transversal cell has only {low} samples (< {min_count})")
    if keep_samples:
        coords = np.concatenate([p[1][0] for p in parts]) if parts else np.empty((0, 3))
        cell = np.concatenate([p[1][1] for p in parts]) if parts else np.empty(0, int)
        return est, (coords, cell)
    return est


def write_histograms_csv(path, est: ConditionalEstimate, bins: int | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_a", "cell_b", "bin", "t_lo", "t_hi", "mass", "cell_count"])
        for h in est.histograms(bins):
            for j, m in enumerate(h.masses):
                w.writerow([h.cell[0], h.cell[1], j, repr(float(h.edges[j])), repr(float(h.edges[j + 1])), repr(float(m)), h.count])


# ---------------------------------------------------------------------------
# classification


def ks_to_uniform(masses: np.ndarray) -> np.ndarray:
    """Kolmogorov-Smirnov distance of binned measures (rows) to the uniform law.

    The binned CDF is taken piecewise linear inside bins, so the supremum
    is attained at bin edges.
    """
    m = np.atleast_2d(masses)
    cdf = np.cumsum(m, axis=1)
    edges = np.arange(1, m.shape[1] + 1) / m.shape[1]
    return np.abs(cdf - edges).max(axis=1)


def top_mass(masses: np.ndarray, q: float) -> np.ndarray:
    m = np.atleast_2d(masses)
    k = max(1, int(np.ceil(q * m.shape[1])))
    return -np.sort(-m, axis=1)[:, :k].sum(axis=1)


@dataclass
class Thresholds:
    alpha: float = 0.05
    atom: float = 0.5

    def ks_critical(self, counts: np.ndarray, n_cells: int) -> np.ndarray:
        """Per-cell critical KS distance; family-wise level ``alpha`` over the cells."""
        c = stats.kstwobign.isf(self.alpha / max(1, n_cells))
        with np.errstate(divide="ignore"):
            return np.where(counts > 0, c / np.sqrt(np.maximum(counts, 1)), np.inf)


@dataclass
class LevelStatistics:
    bins: int
    ks: np.ndarray  # per cell
    ks_critical: np.ndarray
    max_bin: np.ndarray
    top1: np.ndarray
    top5: np.ndarray

    @property
    def ks_pass(self) -> bool:
        return bool(np.all(self.ks <= self.ks_critical))

    @property
    def max_bin_median(self) -> float:
        return float(np.median(self.max_bin))

    def as_dict(self) -> dict:
        return {
            "bins": self.bins,
            "ks_max": float(self.ks.max()),
            "ks_critical_min": float(self.ks_critical.min()),
            "ks_pass": self.ks_pass,
            "max_bin_median": self.max_bin_median,
            "max_bin_max": float(self.max_bin.max()),
            "top1_median": float(np.median(self.top1)),
            "top5_median": float(np.median(self.top5)),
        }


@dataclass
class DisintegrationReport:
    levels: list
    verdict: str
    thresholds: Thresholds
    seed: int | None = None

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "thresholds": {"alpha": self.thresholds.alpha, "atom": self.thresholds.atom},
            "seed": self.seed,
            "levels": [lv.as_dict() for lv in self.levels],
        }


def level_statistics(masses, counts, thresholds: Thresholds) -> LevelStatistics:
    masses = np.atleast_2d(np.asarray(masses, dtype=float))
    counts = np.broadcast_to(np.asarray(counts), (masses.shape[0],))
    if np.any(counts == 0):
        raise InsufficientSamples("empty transversal cell")
    return LevelStatistics(
        bins=masses.shape[1],
        ks=ks_to_uniform(masses),
        ks_critical=thresholds.ks_critical(counts, masses.shape[0]),
        max_bin=masses.max(axis=1),
        top1=top_mass(masses, 0.01),
        top5=top_mass(masses, 0.05),
    )


def verdict_from_statistics(levels: list, thresholds: Thresholds) -> str:
    """Pure decision rule on per-level statistics (levels ordered coarse to fine)."""
    if len(levels) < 2:
        raise ValueError("need at least two refinement levels")
    if all(lv.ks_pass for lv in levels):
        return LEBESGUE
    med = [lv.max_bin_median for lv in levels]
    if all(m >= thresholds.atom for m in med):
        return ATOMIC
    if not any(lv.ks_pass for lv in levels) and all(b < a for a, b in zip(med, med[1:])):
        return SINGULAR
    return INCONCLUSIVE


def classify_disintegration(
    histograms, levels=(8, 16, 32, 64), thresholds: Thresholds | None = None
) -> DisintegrationReport:
    """Classify conditional measures from histograms at several refinement levels.

    ``histograms`` is a :class:`ConditionalEstimate` or a mapping
    ``bins -> (masses (n_cells, bins), counts (n_cells,))``.
    """
    thresholds = thresholds or Thresholds()
    seed = None
    if isinstance(histograms, ConditionalEstimate):
        seed = histograms.seed
        data = {b: histograms.level(b) for b in levels}
    else:
        data = dict(histograms)
        levels = sorted(data)
    stats_ = [level_statistics(*data[b], thresholds) for b in sorted(levels)]
    return DisintegrationReport(stats_, verdict_from_statistics(stats_, thresholds), thresholds, seed)


def atomic_fixture(levels=(8, 16, 32, 64), n_cells: int = 4, count: int = 10**6, position: float = 0.3):
    """All mass at one leaf parameter: a single atom per cell."""
    out = {}
    for b in levels:
        m = np.zeros((n_cells, b))
        m[:, min(b - 1, int(position * b))] = 1.0
        out[b] = (m, np.full(n_cells, count))
    return out


def cascade_masses(depth: int, p: float = 0.7) -> np.ndarray:
    """Binomial cascade on ``2**depth`` dyadic bins: each half gets ``p`` / ``1 - p`` of its parent."""
    m = np.array([1.0])
    for _ in range(depth):
        m = np.kron(m, [p, 1.0 - p])
    return m


def cascade_fixture(levels=(8, 16, 32, 64), n_cells: int = 4, count: int = 10**6, p: float = 0.7):
    out = {}
    for b in levels:
        d = int(round(np.log2(b)))
        if 2**d != b:
            raise ValueError("cascade levels must be powers of two")
        out[b] = (np.tile(cascade_masses(d, p), (n_cells, 1)), np.full(n_cells, count))
    return out


# ---------------------------------------------------------------------------
# concentration profile


@dataclass
class ConcentrationProfile:
    lengths: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    mode: str
    threshold: float

    @property
    def monotone(self) -> bool:
        """Nondecreasing within two standard errors."""
        d = np.diff(self.values)
        s = np.sqrt(self.stderr[1:] ** 2 + self.stderr[:-1] ** 2)
        return bool(np.all(d >= -2 * s - 1e-12))

    def as_dict(self) -> dict:
        return {
            "lengths": self.lengths.tolist(),
            "values": self.values.tolist(),
            "stderr": self.stderr.tolist(),
            "mode": self.mode,
            "threshold": self.threshold,
        }


def _cell_cdf(counts_row, L, lo, hi):
    """Mass of ``[lo, hi]`` under the binned measure of one cell (linear inside bins)."""
    n = counts_row.sum()
    cdf = np.concatenate([[0.0], np.cumsum(counts_row) / n])
    edges = np.linspace(-L, L, len(counts_row) + 1)
    return np.interp(hi, edges, cdf) - np.interp(lo, edges, cdf)


def concentration_profile(
    f: TorusMap | None,
    box: FoliatedBox,
    lengths,
    samples: int = 200_000,
    seed: int = 0,
    bins: int = 64,
    cells: tuple[int, int] = (4, 4),
    threshold: float = 0.6,
    mode: str = "leaf",
    slack_sigmas: float = 2.0,
    workers: int | None = None,
    estimate: ConditionalEstimate | None = None,
) -> ConcentrationProfile:
    """Volume fraction of points whose leaf segment of length ``l`` carries conditional mass >= threshold.

    ``mode="leaf"`` centres the segment on the middle of the box leaf (one
    decision per cell); ``mode="point"`` centres it on each sampled point.
    A mass counts as reaching the threshold when it is within
    ``slack_sigmas`` binomial standard errors of it, so that sampling noise
    does not flip exact ties.
    """
    if mode not in ("leaf", "point"):
        raise ValueError("mode must be 'leaf' or 'point'")
    lengths = np.asarray(lengths, dtype=float)
    est, (coords, cell) = estimate_conditionals(
        box, samples, bins, seed, cells, min_count=1, workers=workers, keep_samples=True
    )
    if estimate is not None:
        est = estimate
    counts = est.counts.reshape(-1, est.bins)
    n_cell = counts.sum(axis=1)
    N = len(coords)
    vals, errs = [], []
    for ell in lengths:
        slack = slack_sigmas * np.sqrt(threshold * (1 - threshold) / np.maximum(n_cell, 1))
        if mode == "leaf":
            mass = np.array([_cell_cdf(c, est.L, -ell / 2, ell / 2) for c in counts])
            ok = mass >= threshold - slack
            frac = float(n_cell[ok].sum() / n_cell.sum())
        else:
            t = coords[:, 2]
            mass = np.empty(N)
            for j, c in enumerate(counts):
                sel = cell == j
                mass[sel] = _cell_cdf(c, est.L, t[sel] - ell / 2, t[sel] + ell / 2)
            frac = float(np.mean(mass >= threshold - slack[cell]))
        vals.append(frac)
        errs.append(np.sqrt(max(frac * (1 - frac), 0.0) / max(N, 1)))
    return ConcentrationProfile(lengths, np.array(vals), np.array(errs), mode, threshold)


# ---------------------------------------------------------------------------
# Birkhoff averages


def character_dictionary(size: int) -> np.ndarray:
    """First ``size`` nonzero frequencies ordered by sup-norm, then lexicographically."""
    out = []
    r = 1
    while len(out) < size:
        rng = range(-r, r + 1)
        shell = [(i, j, k) for i in rng for j in rng for k in rng if max(abs(i), abs(j), abs(k)) == r]
        out.extend(sorted(shell))
        r += 1
    return np.array(out[:size], dtype=float)


@dataclass
class BirkhoffReport:
    base_point: tuple
    n: int
    discrepancy: float
    per_character: np.ndarray
    frequencies: np.ndarray
    non_generic: bool

    def as_dict(self) -> dict:
        return {
            "base_point": list(self.base_point),
            "n": self.n,
            "discrepancy": self.discrepancy,
            "non_generic": self.non_generic,
        }


def birkhoff_discrepancy(
    f: TorusMap, x=None, n: int = 100_000, dictionary_size: int = 20, seed: int = 0, generic_cutoff: float = 0.5
) -> BirkhoffReport:
    """Largest orbit average of the nonconstant characters ``exp(2 pi i k.x)``.

    Every such character integrates to zero against volume, so this is
    the discrepancy of the orbit measure on the dictionary.  A value above
    ``generic_cutoff`` flags the orbit as non-generic.
    """
    if n < 1:
        raise ValueError("orbit length must be >= 1")
    if x is None:
        x = torus_samples(seed, BIRKHOFF_TAG, 1)[0]
    x = wrap(np.asarray(x, dtype=float).reshape(1, 3))
    K = character_dictionary(dictionary_size)
    acc = np.zeros(len(K), dtype=complex)
    y = x.copy()
    block = 4096
    done = 0
    buf = np.empty((block, 3))
    while done < n:
        m = min(block, n - done)
        for i in range(m):
            buf[i] = y[0]
            y = f.apply(y)
        acc += np.exp(2j * np.pi * (buf[:m] @ K.T)).sum(axis=0)
        done += m
    per = np.abs(acc) / n
    d = float(per.max())
    return BirkhoffReport(tuple(float(v) for v in x[0]), n, d, per, K, d > generic_cutoff)


# ---------------------------------------------------------------------------
# m_{x,k}


@dataclass
class MkContext:
    """Everything the leaf-measure construction needs, built once per map.

    ``g`` is the map whose center expands (``f`` or ``f^-1``) and ``lam``
    its linear center multiplier modulus.  The reference surface is the
    local plaque through the fixed point ``p`` spanned by the two
    non-center fields of ``g``; only its strong curve through ``p`` is
    ever needed.
    """

    f: TorusMap
    g: TorusMap
    lam: float
    bundles: dict
    gamma0: float
    p: np.ndarray
    h: float = 0.005
    refine: int = DEFAULT_REFINE
    reversed_time: bool = False

    strong_extent: float = 0.3
    _strong: object = field(default=None, init=False, repr=False)

    @property
    def center(self) -> FieldFlow:
        return FieldFlow(self.bundles["c"], self.g, self.refine)

    def strong_curve(self, kind: str = "high") -> CubicHermiteSpline:
        """Arclength parametrization of the ``kind`` leaf of ``g`` through ``p``.

        Traced once on ``[-T, T]`` and interpolated with the field as the
        derivative.  Both non-center leaves through the fixed point are
        invariant manifolds, hence smooth along themselves, so the
        interpolant is accurate to the trace error.
        """
        if self._strong is None:
            self._strong = {}
        if kind not in self._strong:
            bf = self.bundles[kind]
            fl = FieldFlow(bf, self.g, self.refine)
            n = int(np.ceil(self.strong_extent / self.h))
            T = n * self.h
            fwd = fl.trace(self.p, T, self.h, 1.0)[:, 0]
            bwd = fl.trace(self.p, T, self.h, -1.0)[:, 0]
            pts = np.concatenate([bwd[::-1], fwd[1:]])
            t = self.h * np.arange(-n, n + 1)
            sgn = np.sign(np.gradient(pts, axis=0) @ bf.reference)
            tan = fl.field(pts, sgn[:, None] * bf.reference)
            self._strong[kind] = CubicHermiteSpline(t, pts, tan, axis=0, extrapolate=False)
        return self._strong[kind]

    def base_points(self, t_values) -> np.ndarray:
        """Points ``xi`` on the strong curve of ``g`` through ``p``."""
        t = np.atleast_1d(np.asarray(t_values, dtype=float))
        x = self.strong_curve()(t)
        if np.isnan(x).any():
            raise ValueError(f"base parameters must lie in [-{self.strong_extent}, {self.strong_extent}]")
        return x


def mk_context(
    f: TorusMap,
    gamma0: float = 0.8,
    resolution: int = 32,
    h: float = 0.005,
    refine: int = DEFAULT_REFINE,
    p=None,
    bundles: dict | None = None,
) -> MkContext:
    A = f.linear
    if A.case == "two_contracting":
        g, rev = f.inverse, True
    else:
        g, rev = f, False
    L = g.linear
    lam = float(abs(L.eigenvalues[1]))
    if bundles is None:
        bundles = {
            "low": compute_bundle(g, L.labels[0], resolution, residual_samples=0),
            "c": compute_bundle(g, L.labels[1], resolution, residual_samples=0),
            "high": compute_bundle(g, L.labels[2], resolution, residual_samples=0),
        }
    p = np.zeros(3) if p is None else np.asarray(p, dtype=float)
    if float(np.abs(f.apply_lift(p[None])[0] - p).max()) > 1e-12:
        raise ValueError("reference point must be a fixed point of the lift")
    # growth precheck: a gamma0 center segment from p must lengthen under g, in both orientations
    flow = FieldFlow(bundles["c"], g, refine)
    hh = max(h, gamma0 / 64)
    for sign in (1.0, -1.0):
        seg = flow.trace(p, gamma0, hh, sign)[:, 0]
        grown = np.linalg.norm(np.diff(g.apply_lift(seg), axis=0), axis=1).sum()
        if not grown > gamma0:
            raise ValueError(f"center segments of length {gamma0} do not grow under iteration ({grown:.4g})")
    return MkContext(f, g, lam, bundles, float(gamma0), p, h, refine, rev)


@dataclass
class MkMeasure:
    base: np.ndarray
    k: int
    mass: float
    length: float
    q: np.ndarray  # q_k on the lift, by leaf crossing
    q_direct: np.ndarray  # g^k(q_0(g^-k xi)), the second route
    curve: np.ndarray  # polyline from xi to q_k
    surface_param: np.ndarray  # (t, a) of the pulled-back crossing near the strong curve
    residual: float

    @property
    def route_gap(self) -> float:
        return float(np.linalg.norm(self.q - self.q_direct))


class _LeafTrace:
    """Dense RK4 trace of center leaves from a batch of base points."""

    def __init__(self, ctx: MkContext, xi: np.ndarray, length: float):
        flow = ctx.center
        self.flow = flow
        self.h = ctx.h
        n = int(np.ceil(length / ctx.h)) + 2
        x = np.atleast_2d(xi).copy()
        o = flow.field(x, np.broadcast_to(ctx.bundles["c"].reference, x.shape))
        self.nodes = [x]
        self.orient = [o]
        for _ in range(n):
            x, o = flow.step(x, o, ctx.h)
            self.nodes.append(x)
            self.orient.append(o)
        self.nodes = np.stack(self.nodes, axis=1)  # (m, n+1, 3)
        self.orient = np.stack(self.orient, axis=1)

    @property
    def max_length(self) -> float:
        return (self.nodes.shape[1] - 1) * self.h

    def at(self, rows, tau) -> np.ndarray:
        """Points at arclength ``tau`` for leaf ``rows``: last node plus one partial RK4 step."""
        rows = np.asarray(rows)
        tau = np.asarray(tau, dtype=float)
        j = np.clip(np.floor(tau / self.h).astype(int), 0, self.nodes.shape[1] - 2)
        rest = (tau - j * self.h)[:, None]
        x, _ = self.flow.step(self.nodes[rows, j], self.orient[rows, j], rest)
        return x

    def polyline(self, row, tau) -> np.ndarray:
        j = int(np.floor(tau / self.h))
        return np.concatenate([self.nodes[row, : j + 1], self.at([row], [tau])])


def _surface_offset(ctx: MkContext, u, guess=None, tol=1e-14, max_iter=12):
    """Parameters ``(t, a, c)`` with ``u = sigma(t) + omega(a) - p + c e_c``.

    ``sigma`` and ``omega`` are the high and low leaves of ``g`` through
    ``p``; their translation sum is the reference surface, tangent to the
    true non-center plaque along both curves.  ``c`` is the signed offset
    from it along the linear center direction.
    """
    u = np.atleast_2d(u)
    L = ctx.g.linear
    ec = L.eigenvectors[:, 1]
    S, W = ctx.strong_curve("high"), ctx.strong_curve("low")
    dS, dW = S.derivative(), W.derivative()
    if guess is None:
        c = L.eigen_coordinates(u - ctx.p)
        sgn_t = np.sign(L.eigenvectors[:, 2] @ ctx.bundles["high"].reference)
        sgn_a = np.sign(L.eigenvectors[:, 0] @ ctx.bundles["low"].reference)
        z = np.column_stack([c[:, 2] * sgn_t, c[:, 0] * sgn_a, c[:, 1]])
    else:
        z = np.array(guess, dtype=float)
    for _ in range(max_iter):
        F = S(z[:, 0]) + W(z[:, 1]) - ctx.p + z[:, 2:3] * ec - u
        if np.isnan(F).any():
            raise NoCrossing("pulled-back point left the tabulated reference curves")
        if np.abs(F).max() <= tol:
            break
        J = np.empty((len(u), 3, 3))
        J[:, :, 0] = dS(z[:, 0])
        J[:, :, 1] = dW(z[:, 1])
        J[:, :, 2] = ec
        dz = np.linalg.solve(J, F[..., None])[..., 0]
        z = z - dz
        if np.abs(dz).max() < 1e-15:
            break
    return z


def _crossing_offset(ctx: MkContext, trace, rows, ks, tau, guess=None):
    """Offset of ``Phi^c_-gamma0(g^-k(Phi^c_tau(xi)))`` from the reference surface.

    Zero exactly when ``Phi^c_tau(xi)`` lies on ``g^k(B_0)``, with
    ``B_0 = Phi^c_gamma0(reference surface)``.
    """
    y = trace.at(rows, tau)
    w = np.empty_like(y)
    for k in np.unique(ks):
        sel = ks == k
        w[sel] = ctx.g.inverse.iterate_lift(y[sel], int(k))
    n = max(1, int(np.ceil(ctx.gamma0 / ctx.h)))
    u = ctx.center.flow(w, -ctx.gamma0, nsteps=n)
    return _surface_offset(ctx, u, guess)


def _solve_crossings(ctx, trace, rows, ks, tau0, tol=1e-11, max_iter=30, accept=1e-8):
    """Secant iteration on the leaf arclength ``tau`` for a zero offset.

    The offset is smooth at the 1e-10 level only (leaf tracing through
    Hölder fields), which sets ``tol``.
    """
    rows = np.asarray(rows)
    ks = np.asarray(ks)
    a = np.asarray(tau0, dtype=float)
    b = a + 1e-3
    za = _crossing_offset(ctx, trace, rows, ks, a)
    zb = _crossing_offset(ctx, trace, rows, ks, b, za)
    fa, fb = za[:, 2], zb[:, 2]
    best_tau, best_z, best = b.copy(), zb.copy(), np.abs(fb)
    for _ in range(max_iter):
        done = (np.abs(fb) <= tol) | (fb == fa)
        if done.all():
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(done, b, b - fb * (b - a) / (fb - fa))
        c = np.clip(c, 0.0, trace.max_length)
        zc = _crossing_offset(ctx, trace, rows, ks, c, zb)
        a, fa = np.where(done, a, b), np.where(done, fa, fb)
        b, fb, zb = c, np.where(done, fb, zc[:, 2]), np.where(done[:, None], zb, zc)
        better = np.abs(fb) < best
        best_tau[better], best_z[better], best[better] = b[better], zb[better], np.abs(fb[better])
    b, zb, res = best_tau, best_z, best
    if res.max() > accept:
        raise NoCrossing(
            f"leaf does not meet the pushed-forward patch within the traced range (offset {res.max():.2e})"
        )
    return b, zb, res


def _measures(ctx: MkContext, xi: np.ndarray, rows: np.ndarray, kk: np.ndarray, margin: float = 1.5) -> list:
    """One :class:`MkMeasure` per ``(xi[rows[i]], kk[i])``, all leaves traced in one batch."""
    if kk.min() < 0:
        raise ValueError("levels must be >= 0")
    length = ctx.gamma0 * ctx.lam ** int(kk.max()) * margin + 0.1
    trace = _LeafTrace(ctx, xi, length)
    # second route: g^k(Phi^c_gamma0(g^-k xi)); it also seeds the arclength
    q_direct = np.empty((len(rows), 3))
    n = max(1, int(np.ceil(ctx.gamma0 / ctx.h)))
    for k in np.unique(kk):
        sel = kk == k
        back = ctx.g.inverse.iterate_lift(xi[rows[sel]], int(k))
        q_direct[sel] = ctx.g.iterate_lift(ctx.center.flow(back, ctx.gamma0, nsteps=n), int(k))
    near = np.linalg.norm(trace.nodes[rows] - q_direct[:, None, :], axis=2).argmin(axis=1)
    tau, z, res = _solve_crossings(ctx, trace, rows, kk, near * trace.h)
    q = trace.at(rows, tau)
    return [
        MkMeasure(
            base=xi[r].copy(),
            k=int(k),
            mass=ctx.lam ** int(k),
            length=float(tau[i]),
            q=q[i],
            q_direct=q_direct[i],
            curve=trace.polyline(r, tau[i]),
            surface_param=z[i, :2].copy(),
            residual=float(res[i]),
        )
        for i, (r, k) in enumerate(zip(rows, kk))
    ]


def build_mk_measures(ctx: MkContext, xi, ks) -> list:
    """:class:`MkMeasure` for every base point in ``xi`` and level in ``ks`` (list of lists)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    ks = [int(k) for k in ks]
    flat = _measures(ctx, xi, np.repeat(np.arange(len(xi)), len(ks)), np.tile(ks, len(xi)))
    return [flat[i * len(ks) : (i + 1) * len(ks)] for i in range(len(xi))]


def build_mk_measure(f: TorusMap, A: LinearAnosov | None, xi, k: int, gamma0: float = 0.8, ctx: MkContext | None = None) -> MkMeasure:
    ctx = ctx or mk_context(f, gamma0)
    if A is not None and A.matrix != f.linear.matrix:
        raise ValueError("f is not homotopic to the given linear part")
    return build_mk_measures(ctx, np.asarray(xi, float)[None], [k])[0][0]


def _polyline_distance(p, poly):
    a, b = poly[:-1], poly[1:]
    ab = b - a
    L2 = np.maximum(np.einsum("ki,ki->k", ab, ab), 1e-300)
    out = np.empty(len(p))
    for i, q in enumerate(p):
        t = np.clip(np.einsum("ki,ki->k", q - a, ab) / L2, 0.0, 1.0)
        out[i] = np.sqrt(((a + t[:, None] * ab - q) ** 2).sum(axis=1)).min()
    return out


def hausdorff(poly1, poly2) -> float:
    """Symmetric Hausdorff distance between two polylines (vertices against segments)."""
    return float(max(_polyline_distance(poly1, poly2).max(), _polyline_distance(poly2, poly1).max()))


@dataclass
class PushforwardCheck:
    base: int
    k: int
    mass_identity: bool
    hausdorff: float
    endpoint_gap: float
    route_gap: float


def dense_curve(ctx: MkContext, poly, per_segment: int = 8) -> np.ndarray:
    """Resample a traced center polyline by cubic Hermite interpolation with the field as tangent."""
    poly = np.asarray(poly, dtype=float)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    keep = np.concatenate([[True], np.diff(s) > 1e-12])
    poly, s = poly[keep], s[keep]
    if len(poly) < 2:
        return poly
    d = np.gradient(poly, axis=0) if len(poly) > 2 else np.diff(poly, axis=0)[[0, 0]]
    tan = ctx.center.field(poly, d / np.linalg.norm(d, axis=1)[:, None])
    spl = CubicHermiteSpline(s, poly, tan, axis=0)
    u = np.concatenate([np.linspace(s[i], s[i + 1], per_segment, endpoint=False) for i in range(len(s) - 1)] + [s[-1:]])
    return spl(u)


def mk_pushforward_survey(ctx: MkContext, xi, ks):
    """Pushforward checks and the measures behind them, from one batch of traces.

    Compares ``g`` applied to the level-k segment at ``xi`` with the
    level-(k+1) segment at ``g(xi)``.  Returns ``(checks, here)`` where
    ``here[i][j]`` is the measure at ``xi[i]``, level ``ks[j]``.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    ks = [int(k) for k in ks]
    m, nk = len(xi), len(ks)
    bases = np.concatenate([xi, ctx.g.apply_lift(xi)])
    rows = np.concatenate([np.repeat(np.arange(m), nk), m + np.repeat(np.arange(m), nk)])
    kk = np.concatenate([np.tile(ks, m), np.tile(ks, m) + 1])
    flat = _measures(ctx, bases, rows, kk)
    here, there = flat[: m * nk], flat[m * nk :]
    out = []
    for i, (m0, m1) in enumerate(zip(here, there)):
        img = ctx.g.apply_lift(m0.curve)
        mass_ok = m0.mass == m1.mass / ctx.lam or np.isclose(m0.mass, m1.mass / ctx.lam, rtol=4e-16, atol=0)
        out.append(
            PushforwardCheck(
                i // nk,
                m0.k,
                bool(mass_ok),
                hausdorff(dense_curve(ctx, img), dense_curve(ctx, m1.curve)),
                float(np.linalg.norm(img[-1] - m1.q)),
                max(m0.route_gap, m1.route_gap),
            )
        )
    return out, [here[i * nk : (i + 1) * nk] for i in range(m)]


def mk_pushforward_check(ctx: MkContext, xi, ks) -> list:
    return mk_pushforward_survey(ctx, xi, ks)[0]


@dataclass
class LengthRatioScan:
    rows: list  # (xi index, k, length, ratio)
    beta: float
    slope: float
    slope_stderr: float

    @property
    def trend_free(self) -> bool:
        """No linear trend of log-ratio in ``k`` at three standard errors."""
        return bool(abs(self.slope) <= 3 * self.slope_stderr + 1e-12)

    def as_dict(self) -> dict:
        return {
            "beta": self.beta,
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
            "trend_free": self.trend_free,
            "rows": [list(r) for r in self.rows],
        }


def length_ratio_scan(measures: list) -> LengthRatioScan:
    """``lam^k / l([xi, q_k])`` over base points and levels; ``beta = max(r, 1/r)``."""
    rows = []
    for i, per in enumerate(measures):
        for m in per:
            rows.append((i, m.k, m.length, m.mass / m.length))
    arr = np.array([(r[1], r[3]) for r in rows])
    beta = float(np.max(np.maximum(arr[:, 1], 1 / arr[:, 1])))
    if len(set(arr[:, 0])) > 1:
        fit = stats.linregress(arr[:, 0], np.log(arr[:, 1]))
        slope, se = float(fit.slope), float(fit.stderr)
    else:
        slope, se = 0.0, float("inf")
    return LengthRatioScan(rows, beta, slope, se)


def mk_length_ratio_scan(ctx: MkContext, xi, ks) -> LengthRatioScan:
    return length_ratio_scan(build_mk_measures(ctx, xi, ks))


def write_mk_csv(path, scan: LengthRatioScan) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["base", "k", "length", "ratio"])
        for r in scan.rows:
            w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])


@dataclass
class CenterExponentEstimate:
    value: float
    n: int
    base_point: tuple
    delta: float


def center_exponent_from_mk(
    f: TorusMap,
    A: LinearAnosov | None,
    x,
    n: int = 1000,
    bundle: BundleField | None = None,
    delta: float = 1e-4,
    nodes: int = 4,
    refine: int = DEFAULT_REFINE,
    resolution: int = 32,
) -> CenterExponentEstimate:
    """Center exponent of ``f`` at ``x`` from the growth of short center segments.

    A center segment of length ``delta`` centred on the current orbit point
    is traced, mapped by ``f``, and its image length (polyline through
    ``nodes + 1`` mapped points) is compared with ``delta``; the segment is
    then retraced at the image point.  Returns the mean log growth over
    ``n`` steps.
    """
    if bundle is None:
        bundle = compute_bundle(f, f.linear.labels[1], resolution, residual_samples=0)
    flow = FieldFlow(bundle, f, refine)
    x = wrap(np.asarray(x, dtype=float).reshape(1, 3))
    x0 = tuple(float(v) for v in x[0])
    s = np.linspace(-delta / 2, delta / 2, nodes + 1)
    acc = 0.0
    for _ in range(n):
        seg = flow.flow(np.repeat(x, len(s), axis=0), s, nsteps=1)
        img = f.apply_lift(seg)
        acc += np.log(np.linalg.norm(np.diff(img, axis=0), axis=1).sum() / np.linalg.norm(np.diff(seg, axis=0), axis=1).sum())
        x = f.apply(x)
    return CenterExponentEstimate(acc / n, int(n), x0, float(delta))
