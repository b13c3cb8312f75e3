"""Grid sampling, radius queries and per-location style histograms."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from undermap.geodata import BoundingBox, CityDataset, DataError, StyleHistogram

DEFAULT_RADIUS = 0.02
DEFAULT_MIN_SUPPORT = 10
FEATURES_MAGIC = "# undermap-features v1"

# absorbs representation error in W/d (0.3/0.1 == 2.9999999999999996)
_LATTICE_EPS = 1e-9


def _lattice_count(extent: float, d: float) -> int:
    return int(math.floor(extent / d + _LATTICE_EPS)) + 1


@dataclass(frozen=True)
class GridSpec:
    """Uniform sampling lattice: location (w + d*i, s + d*j) for every cell (i, j).

    Cells are numbered row-major, ``cell = j * n_cols + i``.
    """

    bbox: BoundingBox
    d: float

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"grid spacing must be positive, got {self.d}")

    @property
    def n_cols(self) -> int:
        return _lattice_count(self.bbox.width, self.d)

    @property
    def n_rows(self) -> int:
        return _lattice_count(self.bbox.height, self.d)

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    def location(self, col: int, row: int) -> tuple[float, float]:
        return self.bbox.w + self.d * col, self.bbox.s + self.d * row

    def cell_location(self, cell: int) -> tuple[float, float]:
        row, col = divmod(cell, self.n_cols)
        return self.location(col, row)

    def locations(self) -> list[tuple[float, float]]:
        return [self.location(i, j) for j in range(self.n_rows) for i in range(self.n_cols)]

    def cell_of(self, lon, lat):
        """Cell index of the lattice square ``[w+di, w+d(i+1)) x [s+dj, s+d(j+1))``
        holding each point, or -1 outside the lattice."""
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        col = np.floor((lon - self.bbox.w) / self.d + _LATTICE_EPS).astype(np.int64)
        row = np.floor((lat - self.bbox.s) / self.d + _LATTICE_EPS).astype(np.int64)
        inside = (col >= 0) & (col < self.n_cols) & (row >= 0) & (row < self.n_rows)
        return np.where(inside, row * self.n_cols + col, -1)


def grid_locations(bbox: BoundingBox, d: float) -> list[tuple[float, float]]:
    if not d > 0:
        raise ValueError(f"grid spacing must be positive, got {d}")
    return GridSpec(bbox, d).locations()


def snap_bbox(bbox: BoundingBox, granularity: float, anchor: tuple[float, float] = (0.0, 0.0)) -> BoundingBox:
    """Move the southwestern corner down onto the lattice ``anchor + granularity*k``,
    keeping the northeastern corner covered."""
    if not granularity > 0:
        raise ValueError("granularity must be positive")

    def down(v, a):
        return a + granularity * math.floor((v - a) / granularity + _LATTICE_EPS)

    w, s = down(bbox.w, anchor[0]), down(bbox.s, anchor[1])
    return BoundingBox(w, s, bbox.e - w, bbox.n - s)


def make_grid(bbox: BoundingBox, d: float, snap_granularity: float | None = None,
              anchor: tuple[float, float] = (0.0, 0.0)) -> GridSpec:
    if snap_granularity:
        bbox = snap_bbox(bbox, snap_granularity, anchor)
    return GridSpec(bbox, d)


class SpatialIndex:
    """Uniform bucket grid over record locations.

    Buckets are ``bucket_size`` degrees square and keyed by
    ``(floor(lon/size), floor(lat/size))``.  With ``bucket_size == r`` a query
    touches the 3x3 block around the query point (plus a one-bucket guard ring
    against rounding at bucket edges).
    """

    def __init__(self, dataset: CityDataset, bucket_size: float = DEFAULT_RADIUS):
        if not bucket_size > 0:
            raise ValueError("bucket size must be positive")
        self.dataset = dataset
        self.bucket_size = float(bucket_size)
        bx = np.floor(dataset.lons / self.bucket_size).astype(np.int64)
        by = np.floor(dataset.lats / self.bucket_size).astype(np.int64)
        order = np.lexsort((by, bx))
        keys = np.stack([bx[order], by[order]], axis=1)
        starts = np.flatnonzero(np.r_[True, np.any(keys[1:] != keys[:-1], axis=1)])
        ends = np.r_[starts[1:], len(order)]
        self._buckets = {
            (int(keys[a, 0]), int(keys[a, 1])): order[a:b] for a, b in zip(starts, ends)
        }

    def __len__(self):
        return len(self.dataset)

    @property
    def buckets(self):
        return self._buckets

    def candidates(self, x: tuple[float, float], r: float) -> np.ndarray:
        size = self.bucket_size
        x0 = math.floor((x[0] - r) / size) - 1
        x1 = math.floor((x[0] + r) / size) + 1
        y0 = math.floor((x[1] - r) / size) - 1
        y1 = math.floor((x[1] + r) / size) + 1
        if (x1 - x0 + 1) * (y1 - y0 + 1) > len(self._buckets):
            chunks = [idx for (bx, by), idx in self._buckets.items()
                      if x0 <= bx <= x1 and y0 <= by <= y1]
        else:
            chunks = [self._buckets[key] for key in
                      ((i, j) for i in range(x0, x1 + 1) for j in range(y0, y1 + 1))
                      if key in self._buckets]
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(chunks))


def _distances(dataset: CityDataset, idx: np.ndarray, x: tuple[float, float]) -> np.ndarray:
    return np.hypot(dataset.lons[idx] - x[0], dataset.lats[idx] - x[1])


def radius_query(index: SpatialIndex, x: tuple[float, float], r: float) -> np.ndarray:
    """Sorted indices of records strictly closer than ``r`` (Euclidean, degrees) to ``x``."""
    if not r > 0:
        raise ValueError("radius must be positive")
    cand = index.candidates(x, r)
    return cand[_distances(index.dataset, cand, x) < r]


@dataclass(frozen=True)
class FeatureMode:
    """``hard`` counts every in-radius record once; ``exp`` weights each record
    by ``exp(-beta * distance)`` (beta defaults to 1/r)."""

    kind: str = "hard"
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in ("hard", "exp"):
            raise ValueError(f"unknown featurization mode {self.kind!r}")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")

    def resolved_beta(self, r: float) -> float:
        return self.beta if self.beta is not None else 1.0 / r


HARD = FeatureMode("hard")


@dataclass(frozen=True)
class LocationFeature:
    location: tuple[float, float]
    histogram: StyleHistogram
    effective_location: tuple[float, float]

    @property
    def support(self) -> int:
        return self.histogram.support


def featurize(index: SpatialIndex, x: tuple[float, float], r: float = DEFAULT_RADIUS,
              mode: FeatureMode = HARD, min_support: int = DEFAULT_MIN_SUPPORT) -> LocationFeature | None:
    """Style histogram of the records within ``r`` of ``x``.

    Returns None (unassigned) when fewer than ``min_support`` records fall in
    the disk.  ``effective_location`` is the plain centroid of the contributing
    records.
    """
    if min_support < 1:
        raise ValueError("min_support must be at least 1")
    ds = index.dataset
    idx = radius_query(index, x, r)
    if idx.size < min_support or idx.size == 0:
        return None
    styles = ds.styles[idx]
    k = ds.style_count
    if mode.kind == "hard":
        counts = np.bincount(styles, minlength=k).astype(float)
        values = counts / idx.size
    else:
        dist = _distances(ds, idx, x)
        beta = mode.resolved_beta(r)
        # shift by the nearest distance; the common factor cancels in the ratio
        weights = np.exp(-beta * (dist - dist.min()))
        values = np.bincount(styles, weights=weights, minlength=k) / weights.sum()
    values = values / values.sum()
    centroid = (float(ds.lons[idx].mean()), float(ds.lats[idx].mean()))
    return LocationFeature((float(x[0]), float(x[1])), StyleHistogram(values, int(idx.size)), centroid)


def featurize_grid(index: SpatialIndex, grid: GridSpec, r: float = DEFAULT_RADIUS,
                   mode: FeatureMode = HARD, min_support: int = DEFAULT_MIN_SUPPORT,
                   workers: int = 1) -> list[tuple[int, LocationFeature | None]]:
    """Featurize every lattice cell; output is row-major whatever ``workers`` is."""
    n_cols, n_rows = grid.n_cols, grid.n_rows

    def do_row(j):
        return [(j * n_cols + i, featurize(index, grid.location(i, j), r, mode, min_support))
                for i in range(n_cols)]

    if workers <= 1 or n_rows == 1:
        rows = [do_row(j) for j in range(n_rows)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(do_row, range(n_rows)))
    return [entry for row in rows for entry in row]


def assigned(entries: Sequence[tuple[int, LocationFeature | None]]) -> tuple[np.ndarray, np.ndarray]:
    """Split featurize_grid output into (cell indices, stacked histograms) for assigned cells."""
    cells = [c for c, f in entries if f is not None]
    if not cells:
        return np.empty(0, dtype=np.int64), np.empty((0, 0))
    hists = np.stack([f.histogram.values for _, f in entries if f is not None])
    return np.asarray(cells, dtype=np.int64), hists


def adjacent_iou(r: float, d: float) -> float:
    """Intersection over union of two radius-``r`` disks whose centres are ``d`` apart."""
    if not r > 0:
        raise ValueError("radius must be positive")
    if d < 0:
        raise ValueError("centre distance must be non-negative")
    if d >= 2 * r:
        return 0.0
    if d == 0:
        return 1.0
    inter = 2 * r * r * math.acos(d / (2 * r)) - (d / 2) * math.sqrt(4 * r * r - d * d)
    return inter / (2 * math.pi * r * r - inter)


# --------------------------------------------------------------------------
# feature dumps

def write_features(path, grid: GridSpec, style_count: int,
                   entries: Sequence[tuple[int, LocationFeature | None]]) -> None:
    b = grid.bbox
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FEATURES_MAGIC + "\n")
        fh.write(f"grid,{b.w!r},{b.s!r},{b.width!r},{b.height!r},{grid.d!r}\n")
        fh.write(f"styles,{style_count}\n")
        for cell, feat in entries:
            if feat is None:
                continue
            ex, ey = feat.effective_location
            vals = " ".join(repr(float(v)) for v in feat.histogram.values)
            fh.write(f"{cell},{feat.support},{ex!r},{ey!r},{vals}\n")


def read_features(path) -> tuple[GridSpec, int, list[tuple[int, LocationFeature | None]]]:
    """Inverse of write_features; unassigned cells come back as None entries."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read feature dump {path}: {exc}") from exc
    if len(lines) < 3 or lines[0] != FEATURES_MAGIC:
        raise DataError(f"{path}: not a feature dump (bad header)")
    try:
        tag, *gvals = lines[1].split(",")
        if tag != "grid" or len(gvals) != 5:
            raise ValueError("bad grid line")
        w, s, width, height, d = (float(v) for v in gvals)
        grid = GridSpec(BoundingBox(w, s, width, height), d)
        tag, k = lines[2].split(",")
        if tag != "styles":
            raise ValueError("bad styles line")
        k = int(k)
        found: dict[int, LocationFeature] = {}
        for line in lines[3:]:
            if not line:
                continue
            cell, support, ex, ey, vals = line.split(",", 4)
            cell = int(cell)
            hist = np.array([float(v) for v in vals.split()])
            if hist.shape != (k,) or not 0 <= cell < grid.n_cells:
                raise ValueError(f"bad feature row for cell {cell}")
            found[cell] = LocationFeature(grid.cell_location(cell), StyleHistogram(hist, int(support)),
                                          (float(ex), float(ey)))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return grid, k, [(c, found.get(c)) for c in range(grid.n_cells)]


def iter_cells(grid: GridSpec) -> Iterator[tuple[int, int, int]]:
    for j in range(grid.n_rows):
        for i in range(grid.n_cols):
            yield j * grid.n_cols + i, i, j
