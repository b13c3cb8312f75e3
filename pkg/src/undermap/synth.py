"""Synthetic cities with planted neighborhoods, used as ground truth for the pipeline.

Regions are unions of half-open rectangles ``[w, e) x [s, n)``; records are
dropped uniformly inside each region with Poisson counts and styles drawn
from that region's distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from undermap.geodata import BoundingBox, CityDataset, LabelGrid, StyleRecord

Rect = tuple[float, float, float, float]  # (w, s, e, n)


def _rect_area(r: Rect) -> float:
    return (r[2] - r[0]) * (r[3] - r[1])


def _rects_overlap(a: Rect, b: Rect) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


@dataclass(frozen=True, eq=False)
class PlantedRegionSpec:
    rects: tuple[Rect, ...]
    distribution: np.ndarray
    density: float              # expected records per cell_size x cell_size square
    label: int | None = None    # ground-truth class; defaults to the region index

    def __post_init__(self):
        rects = tuple(tuple(float(v) for v in r) for r in self.rects)
        if not rects:
            raise ValueError("a region needs at least one rectangle")
        for r in rects:
            if not (r[2] > r[0] and r[3] > r[1]):
                raise ValueError(f"degenerate rectangle {r}")
        for i, a in enumerate(rects):
            for b in rects[i + 1:]:
                if _rects_overlap(a, b):
                    raise ValueError("rectangles within a region overlap")
        dist = np.asarray(self.distribution, dtype=float)
        if dist.ndim != 1 or np.any(dist < 0) or abs(dist.sum() - 1) > 1e-9:
            raise ValueError("style distribution must lie on the simplex")
        if not self.density > 0:
            raise ValueError("density must be positive")
        object.__setattr__(self, "rects", rects)
        object.__setattr__(self, "distribution", dist / dist.sum())

    @property
    def area(self) -> float:
        return sum(_rect_area(r) for r in self.rects)

    def contains(self, lon, lat):
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        hit = np.zeros(np.broadcast(lon, lat).shape, dtype=bool)
        for w, s, e, n in self.rects:
            hit |= (lon >= w) & (lon < e) & (lat >= s) & (lat < n)
        return hit


@dataclass(frozen=True, eq=False)
class PlantedCity:
    bbox: BoundingBox
    style_count: int
    regions: tuple[PlantedRegionSpec, ...]
    name: str = "synth"
    cell_size: float = 0.01
    granularity: float = 0.01
    label_names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        regions = tuple(self.regions)
        if not regions:
            raise ValueError("a planted city needs at least one region")
        if not (self.cell_size > 0 and self.granularity > 0):
            raise ValueError("cell size and granularity must be positive")
        b = self.bbox
        tol = 1e-12
        for i, reg in enumerate(regions):
            if reg.distribution.shape != (self.style_count,):
                raise ValueError(f"region {i} distribution has the wrong length")
            for w, s, e, n in reg.rects:
                if w < b.w - tol or s < b.s - tol or e > b.e + tol or n > b.n + tol:
                    raise ValueError(f"region {i} leaves the city bounding box")
        for i, a in enumerate(regions):
            for j in range(i + 1, len(regions)):
                if any(_rects_overlap(ra, rb) for ra in a.rects for rb in regions[j].rects):
                    raise ValueError(f"regions {i} and {j} overlap")
        object.__setattr__(self, "regions", regions)
        n_classes = len(set(self.class_ids()))
        if self.label_names is not None and len(self.label_names) < n_classes:
            raise ValueError("not enough label names for the planted classes")

    def class_ids(self) -> list[int]:
        return [i if r.label is None else r.label for i, r in enumerate(self.regions)]

    def ground_truth(self, lon, lat):
        """Region index at each location, -1 where no region is planted."""
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        out = np.full(np.broadcast(lon, lat).shape, -1, dtype=np.int64)
        for i, reg in enumerate(self.regions):
            out[reg.contains(lon, lat)] = i
        return out

    def expected_counts(self) -> np.ndarray:
        return np.array([r.density * r.area / self.cell_size ** 2 for r in self.regions])


def truth_grid(spec: PlantedCity) -> LabelGrid:
    """Ground-truth label grid over the city's box; a cell takes the class of the
    region holding its centre."""
    g = spec.granularity
    b = spec.bbox
    n_cols = max(1, int(math.ceil(b.width / g - 1e-9)))
    n_rows = max(1, int(math.ceil(b.height / g - 1e-9)))
    cols, rows = np.meshgrid(np.arange(n_cols), np.arange(n_rows))
    cols, rows = cols.ravel(), rows.ravel()
    region = spec.ground_truth(b.w + g * (cols + 0.5), b.s + g * (rows + 0.5))
    classes = spec.class_ids()
    # compact class ids to 0..m-1 in order of first region
    order = list(dict.fromkeys(classes))
    compact = {c: order.index(c) for c in order}
    cells = {(int(c), int(r)): compact[classes[reg]] for c, r, reg in zip(cols, rows, region) if reg >= 0}
    if spec.label_names is not None:
        names = tuple(spec.label_names[c] for c in order)
    else:
        names = tuple(f"class{c}" for c in order)
    return LabelGrid((b.w, b.s), g, cells, names)


def generate_city(spec: PlantedCity, seed: int = 0) -> tuple[CityDataset, LabelGrid]:
    rng = np.random.default_rng(seed)
    records = []
    for i, (reg, mean) in enumerate(zip(spec.regions, spec.expected_counts())):
        n = int(rng.poisson(mean))
        areas = np.array([_rect_area(r) for r in reg.rects])
        which = rng.choice(len(reg.rects), size=n, p=areas / areas.sum())
        rects = np.array(reg.rects)[which]
        u = rng.random((n, 2))
        lons = rects[:, 0] + u[:, 0] * (rects[:, 2] - rects[:, 0])
        lats = rects[:, 1] + u[:, 1] * (rects[:, 3] - rects[:, 1])
        # u < 1 keeps points off the open edge except for rounding
        lons = np.minimum(lons, np.nextafter(rects[:, 2], -np.inf))
        lats = np.minimum(lats, np.nextafter(rects[:, 3], -np.inf))
        styles = rng.choice(spec.style_count, size=n, p=reg.distribution)
        records.extend(
            StyleRecord(f"{spec.name}-{i}-{m}", float(la), float(lo), int(st))
            for m, (lo, la, st) in enumerate(zip(lons, lats, styles))
        )
    return CityDataset(spec.name, spec.style_count, tuple(records)), truth_grid(spec)


# --------------------------------------------------------------------------
# scenario builders

def _split(lo: float, hi: float, parts: int, step: float) -> list[float]:
    """Cut [lo, hi] into ``parts`` slabs with interior edges on multiples of ``step`` from lo."""
    units = int(round((hi - lo) / step))
    if units < parts:
        raise ValueError("bounding box too small for the requested regions")
    edges = [lo + step * round(units * k / parts) for k in range(parts)]
    return edges + [hi]


def dirichlet_distributions(rng: np.random.Generator, n: int, K: int, alpha: float = 0.1) -> np.ndarray:
    out = rng.dirichlet(np.full(K, alpha), size=n)
    # alpha << 1 can underflow to an all-zero row
    bad = ~np.isfinite(out).all(axis=1) | (out.sum(axis=1) <= 0)
    out[bad] = np.full(K, 1.0 / K)
    return out / out.sum(axis=1, keepdims=True)


def quadrant_rects(bbox: BoundingBox, step: float = 0.01) -> list[Rect]:
    """SW, SE, NE, NW quadrants of the box, with edges on the ``step`` lattice."""
    xs = _split(bbox.w, bbox.e, 2, step)
    ys = _split(bbox.s, bbox.n, 2, step)
    return [
        (xs[0], ys[0], xs[1], ys[1]),
        (xs[1], ys[0], xs[2], ys[1]),
        (xs[1], ys[1], xs[2], ys[2]),
        (xs[0], ys[1], xs[1], ys[2]),
    ]


def planted_spec(bbox: BoundingBox, K: int, seed: int = 0, n_regions: int = 4,
                 density: float = 50.0, alpha: float = 0.1, name: str = "planted",
                 step: float = 0.01) -> PlantedCity:
    """``n_regions`` vertical-then-horizontal tiles covering the box, each with a
    Dirichlet(alpha) style distribution."""
    rng = np.random.default_rng(seed)
    dists = dirichlet_distributions(rng, n_regions, K, alpha)
    if n_regions == 4:
        rects = quadrant_rects(bbox, step)
    else:
        xs = _split(bbox.w, bbox.e, n_regions, step)
        rects = [(xs[i], bbox.s, xs[i + 1], bbox.n) for i in range(n_regions)]
    regions = tuple(PlantedRegionSpec((r,), dists[i], density) for i, r in enumerate(rects))
    return PlantedCity(bbox, K, regions, name=name, cell_size=step, granularity=step)


def split_twin_spec(bbox: BoundingBox, K: int, seed: int = 0, density: float = 50.0,
                    alpha: float = 0.1, step: float = 0.01) -> PlantedCity:
    """Four quadrants where the diagonal pair SW/NE (regions 0 and 2) share one
    style distribution: far apart yet alike, so location-only clustering cannot
    group them."""
    rng = np.random.default_rng(seed)
    dists = dirichlet_distributions(rng, 3, K, alpha)
    rects = quadrant_rects(bbox, step)
    plan = [(dists[0], 0), (dists[1], 1), (dists[0], 0), (dists[2], 2)]
    regions = tuple(PlantedRegionSpec((r,), dist, density, label=lab) for r, (dist, lab) in zip(rects, plan))
    return PlantedCity(bbox, K, regions, name="split-twin", cell_size=step, granularity=step,
                       label_names=("twin", "filler-a", "filler-b"))


def _balanced_signs(rng: np.random.Generator, K: int) -> np.ndarray:
    signs = np.array([1.0, -1.0] * (K // 2) + [0.0] * (K % 2))
    return rng.permutation(signs)


def _city_base(rng, K, n):
    """Floor-bounded random distributions: 0.5/K + 0.5*Dirichlet(1)."""
    return 0.5 / K + 0.5 * rng.dirichlet(np.ones(K), size=n)


def shifted_city_pair(base: PlantedCity, shift: float = 0.5, seed: int = 0) -> tuple[PlantedCity, PlantedCity]:
    """Two cities on ``base``'s layout whose style distributions differ throughout,
    each holding one analog region (region 0) that deviates from its own city
    mean with the same sign pattern.

    City B's region 1 reuses city A's analog distribution verbatim, so by raw
    L1 it is A's analog's nearest match even though its deviation pattern
    inside B is unrelated.  ``shift`` in (0, 1] scales the analog deviation
    relative to the smallest style share.
    """
    if not 0 < shift <= 1:
        raise ValueError("shift must lie in (0, 1]")
    n = len(base.regions)
    if n < 3:
        raise ValueError("need at least 3 regions for an analog pair with a confounder")
    K = base.style_count
    rng = np.random.default_rng(seed)
    signs = _balanced_signs(rng, K)
    weights = np.array([r.density * r.area for r in base.regions])
    w0 = weights[0] / weights.sum()

    def with_analog(others: np.ndarray) -> np.ndarray:
        # analog = mean(others) + c*signs, so analog - city mean = (1 - w0)*c*signs
        mean_others = (weights[1:, None] * others).sum(axis=0) / weights[1:].sum()
        analog = mean_others + shift * mean_others.min() * signs
        return np.vstack([analog / analog.sum(), others])

    others_a = _city_base(rng, K, n - 1)
    dists_a = with_analog(others_a)
    others_b = _city_base(rng, K, n - 1)
    others_b[0] = dists_a[0]
    dists_b = with_analog(others_b)

    def build(dists, name):
        regions = tuple(replace(r, distribution=d, label=None) for r, d in zip(base.regions, dists))
        return PlantedCity(base.bbox, K, regions, name=name, cell_size=base.cell_size,
                           granularity=base.granularity)

    return build(dists_a, "city-a"), build(dists_b, "city-b")


def region_of_cells(spec: PlantedCity, grid, cells: Sequence[int]) -> np.ndarray:
    """Planted region holding the centre of each lattice square (-1 if none)."""
    locs = np.array([grid.cell_location(int(c)) for c in cells], dtype=float).reshape(-1, 2)
    return spec.ground_truth(locs[:, 0] + grid.d / 2, locs[:, 1] + grid.d / 2)
