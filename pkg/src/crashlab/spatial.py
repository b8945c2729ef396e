"""Hotspot analysis along a linear corridor.

Everything here works on mileposts, i.e. a 1-D reference frame: DBSCAN on
|a - b|, a Gaussian KDE with Silverman's bandwidth, fixed-width windows for
the hotspot ranking, and Moran's I over a chain of equal-length segments
with rook (i, i+1) contiguity.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .descriptive import milepost_bin_edges, milepost_bin_index
from .errors import DegenerateInput, EmptyInput, NonPositiveBandwidth, ZeroVariance
from .inferential import normal_sf
from .ingest import CrashDataset

NOISE = -1
SCHEMA_VERSION = 1


# --------------------------------------------------------------------------
# DBSCAN
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]  # aligned with the input order; NOISE = -1
    eps: float
    min_pts: int
    core: tuple[bool, ...] = ()

    @property
    def n_clusters(self) -> int:
        return len({l for l in self.labels if l != NOISE})

    @property
    def n_noise(self) -> int:
        return sum(1 for l in self.labels if l == NOISE)

    def sizes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for l in self.labels:
            if l != NOISE:
                out[l] = out.get(l, 0) + 1
        return out


def dbscan_1d(mileposts: Sequence[float], eps: float = 0.5, min_pts: int = 3) -> ClusterAssignment:
    """DBSCAN on a line.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``.  On a line two core points are density-connected exactly
    when every gap between consecutive core points separating them is at most
    ``eps``, so clusters are runs of core points.  A border point joins the
    lowest-milepost core cluster within reach.  Clusters are numbered in
    milepost order.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    x = np.asarray(mileposts, dtype=float)
    if x.size == 0:
        raise EmptyInput("no points to cluster")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    lo = np.searchsorted(xs, xs - eps, side="left")
    hi = np.searchsorted(xs, xs + eps, side="right")
    is_core = (hi - lo) >= min_pts

    sorted_labels = np.full(xs.size, NOISE, dtype=int)
    core_idx = np.flatnonzero(is_core)
    cluster = -1
    prev = None
    for i in core_idx:
        if prev is None or xs[i] - xs[prev] > eps:
            cluster += 1
        sorted_labels[i] = cluster
        prev = i

    if core_idx.size:
        core_x = xs[core_idx]
        for i in np.flatnonzero(~is_core):
            # first core point at or after xs[i] - eps
            j = np.searchsorted(core_x, xs[i] - eps, side="left")
            if j < core_x.size and abs(core_x[j] - xs[i]) <= eps:
                sorted_labels[i] = sorted_labels[core_idx[j]]

    labels = np.empty_like(sorted_labels)
    labels[order] = sorted_labels
    core = np.empty_like(is_core)
    core[order] = is_core
    return ClusterAssignment(tuple(int(l) for l in labels), eps, min_pts, tuple(bool(c) for c in core))


# --------------------------------------------------------------------------
# Kernel density
# --------------------------------------------------------------------------

def silverman_bandwidth(xs: Sequence[float]) -> float:
    """Silverman's rule of thumb, ``0.9 * min(sd, IQR/1.34) * n**(-1/5)``.

    ``sd`` uses the n-1 denominator and the IQR linear-interpolation
    quantiles.  When one spread measure is zero the other is used alone.
    """
    x = np.asarray(xs, dtype=float)
    if x.size < 2:
        raise DegenerateInput("need at least two points for a bandwidth")
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr_scaled = float(q75 - q25) / 1.34
    spreads = [s for s in (sd, iqr_scaled) if s > 0]
    if not spreads:
        raise DegenerateInput("all points identical; bandwidth undefined")
    return 0.9 * min(spreads) * x.size ** (-0.2)


@dataclass(frozen=True)
class DensityProfile:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    n_source: int

    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    @property
    def argmax(self) -> float:
        return float(self.grid[int(np.argmax(self.density))])

    def to_csv(self) -> str:
        rows = ["milepost,density"] + [f"{g:.4f},{d:.10g}" for g, d in zip(self.grid, self.density)]
        return "\n".join(rows) + "\n"

    def to_json_obj(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "bandwidth": self.bandwidth,
            "n_source": self.n_source,
            "grid": [round(float(g), 6) for g in self.grid],
            "density": [float(d) for d in self.density],
        }


def gaussian_kernel(u):
    return np.exp(-0.5 * np.asarray(u) ** 2) / math.sqrt(2.0 * math.pi)


def kde(xs: Sequence[float], grid: Sequence[float], h: float) -> DensityProfile:
    """Exact Gaussian KDE ``f(x) = 1/(n h) * sum K((x - x_i)/h)`` on ``grid``."""
    if not h > 0:
        raise NonPositiveBandwidth(f"bandwidth must be positive, got {h}")
    x = np.asarray(xs, dtype=float)
    g = np.asarray(grid, dtype=float)
    if x.size == 0:
        raise EmptyInput("no source points")
    if np.any(np.diff(g) < 0):
        raise ValueError("grid must be sorted")
    dens = gaussian_kernel((g[:, None] - x[None, :]) / h).sum(axis=1) / (x.size * h)
    return DensityProfile(g, dens, float(h), int(x.size))


def default_grid(corridor_length: float, h: float, step: float = 0.01) -> np.ndarray:
    """Evaluation points every ``step`` miles over ``[-4h, length + 4h]``."""
    lo = -4.0 * h
    hi = corridor_length + 4.0 * h
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def corridor_kde(ds: CrashDataset, h: float | None = None, step: float = 0.01) -> DensityProfile:
    xs = ds.column("milepost")
    if h is None:
        h = silverman_bandwidth(xs)
    return kde(xs, default_grid(ds.corridor_length, h, step), h)


# --------------------------------------------------------------------------
# Hotspot windows
# --------------------------------------------------------------------------


def priority_for(density: float) -> str | None:
    """Critical above 10, High 8-10, Moderate 5-8 crashes/mi/yr, else none."""
    if density > 10.0:
        return "Critical"
    if density >= 8.0:
        return "High"
    if density >= 5.0:
        return "Moderate"
    return None


@dataclass(frozen=True)
class Hotspot:
    start: float
    end: float
    count: int
    density: float  # crashes per mile per year
    priority: str | None
    landmark: str = ""

    @property
    def label(self) -> str:
        return f"{self.start:.1f}-{self.end:.1f}"

    def to_json_obj(self) -> dict:
        return {
            "range": [round(self.start, 6), round(self.end, 6)],
            "count": self.count,
            "density": round(self.density, 6),
            "priority": self.priority,
            "landmark": self.landmark,
        }


def load_landmarks(path: str | Path | None = None) -> dict[str, float]:
    """Name -> milepost map from JSON; ``None`` loads the bundled corridor landmarks."""
    if path is None:
        text = resources.files("crashlab.data").joinpath("landmarks.json").read_text()
    else:
        text = Path(path).read_text()
    return {str(k): float(v) for k, v in json.loads(text).items()}


def hotspot_table(
    ds: CrashDataset,
    window: float = 0.5,
    top_k: int | None = 5,
    landmarks: Mapping[str, float] | None = None,
) -> list[Hotspot]:
    """Rank fixed windows by crash density ``count / (window * years)``.

    Windows tile the corridor from milepost 0.  ``landmarks`` maps a name
    (intersection) to its milepost and labels the window it falls in.
    """
    if not window > 0:
        raise ValueError("window must be positive")
    years = ds.n_years
    if years < 1:
        raise ValueError("study period must span at least one year")
    edges = milepost_bin_edges(ds.corridor_length, window)
    idx = milepost_bin_index(ds.column("milepost"), ds.corridor_length, window)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    names: dict[int, list[str]] = {}
    if landmarks:
        lm_idx = milepost_bin_index(list(landmarks.values()), ds.corridor_length, window)
        for name, k in zip(landmarks, lm_idx):
            names.setdefault(int(k), []).append(name)
    spots = []
    for k, c in enumerate(counts):
        dens = float(c) / (window * years)
        spots.append(Hotspot(float(edges[k]), float(edges[k + 1]), int(c), dens,
                             priority_for(dens), " / ".join(names.get(k, []))))
    spots.sort(key=lambda s: (-s.density, s.start))
    return spots if top_k is None else spots[:top_k]


def hotspot_markdown(spots: Sequence[Hotspot]) -> str:
    lines = [
        "| Milepost Range | Intersection | Density (crashes/mi/yr) | Crashes | Priority |",
        "|---|---|---|---|---|",
    ]
    for s in spots:
        lines.append(f"| {s.label} | {s.landmark or '-'} | {s.density:.1f} | {s.count} | {s.priority or '-'} |")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Segments and Moran's I
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentGrid:
    segment_length: float
    counts: np.ndarray

    @property
    def n_segments(self) -> int:
        return int(self.counts.size)

    @property
    def adjacency(self) -> list[tuple[int, int]]:
        """Rook pairs in both directions."""
        n = self.n_segments
        return [(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)]

    def weights(self) -> np.ndarray:
        n = self.n_segments
        w = np.zeros((n, n))
        i = np.arange(n - 1)
        w[i, i + 1] = 1.0
        w[i + 1, i] = 1.0
        return w

    @property
    def total_weight(self) -> float:
        return 2.0 * (self.n_segments - 1)

    @property
    def mean(self) -> float:
        return float(self.counts.mean())

    def to_csv(self) -> str:
        rows = ["segment,start,end,count"]
        for k, c in enumerate(self.counts):
            a = k * self.segment_length
            rows.append(f"{k},{a:.4f},{a + self.segment_length:.4f},{int(c)}")
        return "\n".join(rows) + "\n"

    def to_json_obj(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "segment_length": self.segment_length,
            "n_segments": self.n_segments,
            "total_weight": self.total_weight,
            "mean": self.mean,
            "counts": [int(c) for c in self.counts],
        }


def build_segment_grid(ds: CrashDataset, segment_length: float = 0.1) -> SegmentGrid:
    """Count crashes per segment of ``segment_length`` from milepost 0.

    The last segment extends past the corridor end when the length is not
    a multiple (8.406 mi at 0.1 mi gives 85 segments covering [0, 8.5)).
    """
    if not segment_length > 0:
        raise ValueError("segment_length must be positive")
    n = len(milepost_bin_edges(ds.corridor_length, segment_length)) - 1
    idx = milepost_bin_index(ds.column("milepost"), ds.corridor_length, segment_length)
    return SegmentGrid(float(segment_length), np.bincount(idx, minlength=n).astype(float))


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected: float
    variance: float
    z: float
    p_value: float
    n: int
    W: float
    S1: float
    S2: float
    permutation_p: float | None = None
    n_permutations: int | None = None

    def to_json_obj(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "I": self.I,
            "expected_I": self.expected,
            "variance": self.variance,
            "z": self.z,
            "p_value": self.p_value,
            "n_segments": self.n,
            "W": self.W,
            "S1": self.S1,
            "S2": self.S2,
            "permutation_p": self.permutation_p,
            "n_permutations": self.n_permutations,
        }


def _moran_stat(z: np.ndarray, w: np.ndarray, W: float) -> float:
    n = z.shape[-1]
    num = np.einsum("...i,ij,...j->...", z, w, z)
    den = np.einsum("...i,...i->...", z, z)
    return n / W * num / den


def weight_moments(w: np.ndarray) -> tuple[float, float, float]:
    """Return ``(W, S1, S2)`` for a weight matrix."""
    W = float(w.sum())
    S1 = 0.5 * float(((w + w.T) ** 2).sum())
    S2 = float(((w.sum(axis=1) + w.sum(axis=0)) ** 2).sum())
    return W, S1, S2


def morans_i(grid: SegmentGrid) -> MoranResult:
    """Global Moran's I with the normality-assumption variance.

    ``p_value`` is one-sided (upper tail), testing for clustering.
    """
    x = np.asarray(grid.counts, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("Moran's I needs at least two segments")
    z = x - x.mean()
    if not np.any(np.abs(z) > 1e-12 * max(1.0, np.abs(x).max())):
        raise ZeroVariance("constant counts; Moran's I is undefined")
    w = grid.weights()
    W, S1, S2 = weight_moments(w)
    I = float(_moran_stat(z, w, W))
    e_i = -1.0 / (n - 1)
    var = (n * n * S1 - n * S2 + 3.0 * W * W) / ((n * n - 1.0) * W * W) - e_i ** 2
    zscore = (I - e_i) / math.sqrt(var)
    return MoranResult(I, e_i, var, zscore, normal_sf(zscore), n, W, S1, S2)


def _perm_block(x: np.ndarray, seed: int, start: int, stop: int) -> np.ndarray:
    out = np.empty((stop - start, x.size))
    for k, i in enumerate(range(start, stop)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out[k] = rng.permutation(x)
    return out


def morans_i_permutation(
    grid: SegmentGrid, n_perm: int = 999, seed: int = 0, n_jobs: int = 1
) -> float:
    """Pseudo p-value ``(1 + #{I_perm >= I_obs}) / (n_perm + 1)``.

    Permutation ``i`` draws from its own stream seeded by ``(seed, i)``, so the
    result does not depend on ``n_jobs``.
    """
    if n_perm < 99:
        raise ValueError("use at least 99 permutations")
    x = np.asarray(grid.counts, dtype=float)
    obs = morans_i(grid).I
    w = grid.weights()
    W = float(w.sum())
    bounds = np.linspace(0, n_perm, max(1, n_jobs) + 1).astype(int)
    spans = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            blocks = list(pool.map(lambda ab: _perm_block(x, seed, *ab), spans))
    else:
        blocks = [_perm_block(x, seed, a, b) for a, b in spans]
    perms = np.vstack(blocks)
    z = perms - perms.mean(axis=1, keepdims=True)
    stats = _moran_stat(z, w, W)
    # tolerance so permutations tying the observed value count as "at least as large"
    hits = int(np.sum(stats >= obs - 1e-12))
    return (1 + hits) / (n_perm + 1)
