"""K-means with L1 assignment over style histograms, and the NeighborhoodMap it yields.

The Euclidean variant used by the location baselines shares the same seeding
and restart machinery (see ``kmeans_l2``).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from undermap.featurize import GridSpec
from undermap.geodata import BoundingBox, DataError

LOGGER = logging.getLogger(__name__)

UNASSIGNED = -1
MAP_MAGIC = "# undermap-map v1"
DEFAULT_MAX_ITER = 100
DEFAULT_RESTARTS = 10


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    restart: int = 0
    # (assignment objective, update objective) per iteration
    trace: list[tuple[float, float]] = field(default_factory=list, repr=False)


@dataclass(frozen=True, eq=False)
class NeighborhoodMap:
    """Per-cell cluster labels over a sampling grid (``UNASSIGNED`` for skipped cells)."""

    grid: GridSpec
    labels: np.ndarray
    centroids: np.ndarray | None
    inertia: float

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (self.grid.n_cells,):
            raise ValueError(f"expected {self.grid.n_cells} labels, got {labels.shape}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_clusters(self) -> int:
        if self.centroids is not None:
            return int(self.centroids.shape[0])
        return int(self.labels.max()) + 1 if np.any(self.labels >= 0) else 0

    @property
    def assigned_cells(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @classmethod
    def from_cells(cls, grid: GridSpec, cells, cell_labels, centroids=None, inertia=float("nan")):
        labels = np.full(grid.n_cells, UNASSIGNED, dtype=np.int64)
        labels[np.asarray(cells, dtype=np.int64)] = np.asarray(cell_labels, dtype=np.int64)
        return cls(grid, labels, centroids, inertia)


# --------------------------------------------------------------------------
# L1 primitives

def l1_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, C) table of L1 distances, one centroid at a time to bound memory."""
    X = np.asarray(X, dtype=float)
    centroids = np.asarray(centroids, dtype=float)
    out = np.empty((X.shape[0], centroids.shape[0]))
    for c in range(centroids.shape[0]):
        out[:, c] = np.abs(X - centroids[c]).sum(axis=1)
    return out


def assign(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """L1-nearest centroid per row; ties go to the lowest centroid index."""
    if len(centroids) < 1:
        raise ValueError("need at least one centroid")
    return np.argmin(l1_distances(X, centroids), axis=1)


def inertia_l1(X: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    X = np.asarray(X, dtype=float)
    centroids = np.asarray(centroids, dtype=float)
    return float(np.abs(X - centroids[np.asarray(labels)]).sum())


def _cluster_centers(X, labels, C, rule):
    K = X.shape[1]
    centers = np.zeros((C, K))
    empty = []
    for c in range(C):
        members = X[labels == c]
        if members.shape[0] == 0:
            empty.append(c)
        elif rule == "median":
            centers[c] = np.median(members, axis=0)
        else:
            centers[c] = members.mean(axis=0)
    return centers, empty


def _reseed_empty(X, labels, centers, empty, dist_fn):
    if not empty:
        return centers
    # farthest features from their own centroid, stable on ties
    own = dist_fn(X, centers)[np.arange(X.shape[0]), labels]
    order = np.argsort(-own, kind="stable")
    for c, i in zip(empty, order):
        centers[c] = X[i]
    return centers


def update_centroids(X: np.ndarray, labels: np.ndarray, C: int, rule: str = "median",
                     renormalize: bool = True) -> np.ndarray:
    """M-step over histograms.

    ``median`` takes the component-wise median of each cluster (the L1-optimal
    prototype) and, with ``renormalize``, rescales it back onto the simplex.
    A median that is all zeros cannot be rescaled and falls back to the
    cluster mean.  ``mean`` is the arithmetic mean.  Empty clusters are
    reseeded with the features farthest (L1) from their own centroid.
    """
    if rule not in ("median", "mean"):
        raise ValueError(f"unknown update rule {rule!r}")
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError("labels must lie in [0, C)")
    centers, empty = _cluster_centers(X, labels, C, rule)
    if rule == "median" and renormalize:
        for c in range(C):
            if c in empty:
                continue
            total = centers[c].sum()
            if total > 0:
                centers[c] /= total
            else:
                centers[c] = X[labels == c].mean(axis=0)
    return _reseed_empty(X, labels, centers, empty, l1_distances)


# --------------------------------------------------------------------------
# shared Lloyd driver

def _seed_centers(X, C, rng, seed_weight: Callable[[np.ndarray], np.ndarray], dist_fn):
    """k-means++ style seeding: next center drawn with probability proportional
    to ``seed_weight(distance to nearest chosen center)``."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    nearest = dist_fn(X, X[chosen[0]][None, :])[:, 0]
    for _ in range(1, C):
        weights = seed_weight(nearest)
        weights[chosen] = 0.0
        total = weights.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=weights / total))
        else:
            # every remaining point coincides with a chosen center
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, dist_fn(X, X[nxt][None, :])[:, 0])
    return X[chosen].copy()


def _lloyd(X, C, rng, dist_fn, update_fn, seed_weight, max_iter):
    centers = _seed_centers(X, C, rng, seed_weight, dist_fn)
    labels = None
    trace = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = dist_fn(X, centers)
        new_labels = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        e_obj = float(dist[np.arange(X.shape[0]), labels].sum())
        centers, m_obj = update_fn(X, labels, centers)
        trace.append((e_obj, m_obj))
    dist = dist_fn(X, centers)
    labels = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(X.shape[0]), labels].sum())
    return KMeansResult(labels, centers, inertia, n_iter, trace=trace)


def _best_of(run, seeds, workers):
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    best = 0
    for i, res in enumerate(results):
        res.restart = i
        if res.inertia < results[best].inertia:
            best = i
    return results[best]


def _check_k(n, C):
    if C < 1:
        raise ValueError("cluster count must be at least 1")
    if n < C:
        raise DataError(f"only {n} features for {C} clusters")


def kmeans_l1(X: np.ndarray, C: int, seed: int = 0, max_iter: int = DEFAULT_MAX_ITER,
              update_rule: str = "median", restarts: int = DEFAULT_RESTARTS,
              renormalize: bool = True, workers: int = 1) -> KMeansResult:
    """Cluster histograms (rows of ``X``) with L1 assignment.

    Runs ``restarts`` independent Lloyd iterations seeded ``seed + 0 ..
    seed + restarts - 1`` and keeps the lowest-inertia run (earliest restart
    on ties).  Each run stops once the assignment is stable or after
    ``max_iter`` iterations.
    """
    X = np.asarray(X, dtype=float)
    _check_k(X.shape[0], C)
    if update_rule not in ("median", "mean"):
        raise ValueError(f"unknown update rule {update_rule!r}")

    def update(X, labels, _centers):
        centers = update_centroids(X, labels, C, update_rule, renormalize)
        if update_rule == "median":
            raw, empty = _cluster_centers(X, labels, C, "median")
            m_obj = sum(float(np.abs(X[labels == c] - raw[c]).sum()) for c in range(C) if c not in empty)
        else:
            m_obj = inertia_l1(X, labels, centers)
        return centers, m_obj

    def run(s):
        rng = np.random.default_rng(s)
        return _lloyd(X, C, rng, l1_distances, update, lambda d: d.copy(), max_iter)

    return _best_of(run, [seed + i for i in range(max(1, restarts))], workers)


def sq_euclidean_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    centroids = np.asarray(centroids, dtype=float)
    out = np.empty((X.shape[0], centroids.shape[0]))
    for c in range(centroids.shape[0]):
        out[:, c] = ((X - centroids[c]) ** 2).sum(axis=1)
    return out


def kmeans_l2(X: np.ndarray, C: int, seed: int = 0, max_iter: int = DEFAULT_MAX_ITER,
              restarts: int = DEFAULT_RESTARTS, workers: int = 1) -> KMeansResult:
    """Plain Euclidean K-means (mean update, k-means++ D^2 seeding); inertia is
    the sum of squared distances."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    _check_k(X.shape[0], C)

    def update(X, labels, _centers):
        centers, empty = _cluster_centers(X, labels, C, "mean")
        centers = _reseed_empty(X, labels, centers, empty, sq_euclidean_distances)
        m_obj = float(((X - centers[labels]) ** 2).sum())
        return centers, m_obj

    def run(s):
        rng = np.random.default_rng(s)
        return _lloyd(X, C, rng, sq_euclidean_distances, update, lambda d: d.copy(), max_iter)

    return _best_of(run, [seed + i for i in range(max(1, restarts))], workers)


def cluster_features(grid: GridSpec, cells: np.ndarray, X: np.ndarray, C: int, seed: int = 0,
                     **opts) -> NeighborhoodMap:
    """Run kmeans_l1 on assigned cells and lay the labels out on the grid."""
    res = kmeans_l1(X, C, seed, **opts)
    return NeighborhoodMap.from_cells(grid, cells, res.labels, res.centroids, res.inertia)


# --------------------------------------------------------------------------
# map files

def save_map(nmap: NeighborhoodMap, path) -> None:
    b = nmap.grid.bbox
    lines = [MAP_MAGIC,
             f"grid,{b.w!r},{b.s!r},{b.width!r},{b.height!r},{nmap.grid.d!r}",
             f"inertia,{float(nmap.inertia)!r}"]
    if nmap.centroids is not None:
        cents = np.asarray(nmap.centroids, dtype=float)
        lines.append(f"centroids,{cents.shape[0]},{cents.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in cents]
    else:
        lines.append("centroids,0,0")
    lines.append("col,row,label")
    n_cols = nmap.grid.n_cols
    for cell in nmap.assigned_cells:
        row, col = divmod(int(cell), n_cols)
        lines.append(f"{col},{row},{int(nmap.labels[cell])}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_map(path) -> NeighborhoodMap:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read map {path}: {exc}") from exc
    if len(lines) < 5 or lines[0] != MAP_MAGIC:
        raise DataError(f"{path}: not a neighborhood map (bad header)")
    try:
        tag, *g = lines[1].split(",")
        if tag != "grid" or len(g) != 5:
            raise ValueError("bad grid line")
        w, s, width, height, d = (float(v) for v in g)
        grid = GridSpec(BoundingBox(w, s, width, height), d)
        tag, inertia = lines[2].split(",")
        if tag != "inertia":
            raise ValueError("bad inertia line")
        tag, nc, nk = lines[3].split(",")
        if tag != "centroids":
            raise ValueError("bad centroid header")
        nc, nk = int(nc), int(nk)
        pos = 4
        centroids = None
        if nc:
            centroids = np.array([[float(v) for v in lines[pos + c].split()] for c in range(nc)])
            if centroids.shape != (nc, nk):
                raise ValueError("centroid table has the wrong shape")
            pos += nc
        if lines[pos] != "col,row,label":
            raise ValueError("missing cell header")
        labels = np.full(grid.n_cells, UNASSIGNED, dtype=np.int64)
        for line in lines[pos + 1:]:
            if not line:
                continue
            col, row, lab = (int(v) for v in line.split(","))
            if not (0 <= col < grid.n_cols and 0 <= row < grid.n_rows) or lab < 0:
                raise ValueError(f"bad cell row {line!r}")
            if nc and lab >= nc:
                raise ValueError(f"label {lab} exceeds centroid count {nc}")
            labels[row * grid.n_cols + col] = lab
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return NeighborhoodMap(grid, labels, centroids, float(inertia))
