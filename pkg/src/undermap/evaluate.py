"""Agreement metrics against benchmark label grids, plus location baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from undermap.cluster import DEFAULT_RESTARTS, NeighborhoodMap, kmeans_l2
from undermap.featurize import GridSpec
from undermap.geodata import DataError, LabelGrid


@dataclass(frozen=True, eq=False)
class AlignedLabels:
    """Predicted and ground-truth labels over the cells both sources cover."""

    predicted: np.ndarray
    truth: np.ndarray
    dropped_benchmark: int = 0
    dropped_map: int = 0

    def __post_init__(self):
        pred = np.asarray(self.predicted, dtype=np.int64)
        truth = np.asarray(self.truth, dtype=np.int64)
        if pred.shape != truth.shape or pred.ndim != 1:
            raise ValueError("predicted and truth must be equal-length sequences")
        object.__setattr__(self, "predicted", pred)
        object.__setattr__(self, "truth", truth)

    def __len__(self):
        return self.predicted.shape[0]


@dataclass(frozen=True, eq=False)
class ContingencyTable:
    matrix: np.ndarray          # rows: predicted clusters, cols: truth classes
    pred_ids: np.ndarray
    truth_ids: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: AlignedLabels) -> "ContingencyTable":
        if len(pairs) == 0:
            raise ValueError("no aligned pairs to score")
        pred_ids, p = np.unique(pairs.predicted, return_inverse=True)
        truth_ids, t = np.unique(pairs.truth, return_inverse=True)
        m = np.zeros((pred_ids.size, truth_ids.size), dtype=np.int64)
        np.add.at(m, (p, t), 1)
        return cls(m, pred_ids, truth_ids)

    @property
    def n(self) -> int:
        return int(self.matrix.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


def _ratio_is_integer(a: float, b: float) -> bool:
    q = a / b
    return abs(q - round(q)) < 1e-6 and round(q) >= 1


def align_to_benchmark(nmap: NeighborhoodMap, bench: LabelGrid) -> AlignedLabels:
    """Pair every benchmark cell with the map cell containing its centre.

    Cells unassigned on the map side, or outside the map grid, are dropped and
    counted; so are assigned map cells no benchmark cell lands in.
    """
    d, g = nmap.grid.d, bench.granularity
    if not (_ratio_is_integer(d, g) or _ratio_is_integer(g, d)):
        raise DataError(f"map spacing {d} and benchmark granularity {g} are incommensurate")
    keys = sorted(bench.cells, key=lambda cr: (cr[1], cr[0]))
    cols = np.array([c for c, _ in keys], dtype=float)
    rows = np.array([r for _, r in keys], dtype=float)
    lon = bench.origin[0] + g * (cols + 0.5)
    lat = bench.origin[1] + g * (rows + 0.5)
    map_cells = nmap.grid.cell_of(lon, lat)
    truth = np.array([bench.cells[k] for k in keys], dtype=np.int64)
    pred = np.where(map_cells >= 0, nmap.labels[np.clip(map_cells, 0, None)], -1)
    keep = pred >= 0
    hit = np.unique(map_cells[keep])
    dropped_map = int(np.setdiff1d(nmap.assigned_cells, hit).size)
    return AlignedLabels(pred[keep], truth[keep], int((~keep).sum()), dropped_map)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(pairs: AlignedLabels) -> float:
    """Mutual information normalised by the geometric mean of the two entropies."""
    table = ContingencyTable.from_pairs(pairs)
    n = table.n
    hp, ht = _entropy(table.row_sums, n), _entropy(table.col_sums, n)
    if hp == 0 or ht == 0:
        # a single-block partition only agrees with another single block
        return 1.0 if hp == ht else 0.0
    m = table.matrix
    nz = m > 0
    outer = np.outer(table.row_sums, table.col_sums)
    mi = float((m[nz] / n * np.log(m[nz] * n / outer[nz])).sum())
    return float(np.clip(mi / math.sqrt(hp * ht), 0.0, 1.0))


def purity(pairs: AlignedLabels) -> float:
    table = ContingencyTable.from_pairs(pairs)
    return float(table.matrix.max(axis=1).sum() / table.n)


def mmiou_per_class(pairs: AlignedLabels) -> dict[int, float]:
    """Best IoU of each ground-truth class against any predicted cluster."""
    table = ContingencyTable.from_pairs(pairs)
    m = table.matrix
    union = table.row_sums[:, None] + table.col_sums[None, :] - m
    iou = m / union
    return {int(t): float(iou[:, j].max()) for j, t in enumerate(table.truth_ids)}


def mmiou(pairs: AlignedLabels) -> float:
    return float(np.mean(list(mmiou_per_class(pairs).values())))


def evaluation_report(pairs: AlignedLabels, label_names=None) -> dict:
    per_class = mmiou_per_class(pairs)
    if label_names is not None:
        per_class = {label_names[k]: v for k, v in per_class.items()}
    return {
        "nmi": nmi(pairs),
        "purity": purity(pairs),
        "mmiou": mmiou(pairs),
        "mmiou_per_class": per_class,
        "pairs": len(pairs),
        "dropped_benchmark": pairs.dropped_benchmark,
        "dropped_map": pairs.dropped_map,
    }


# --------------------------------------------------------------------------
# baselines

def baseline_random(grid: GridSpec, cells, C: int, seed: int = 0) -> NeighborhoodMap:
    """Uniform random label in [0, C) for every given cell."""
    if C < 1:
        raise ValueError("cluster count must be at least 1")
    cells = np.asarray(cells, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return NeighborhoodMap.from_cells(grid, cells, rng.integers(0, C, size=cells.size))


def _location_matrix(grid: GridSpec, cells) -> np.ndarray:
    return np.array([grid.cell_location(int(c)) for c in cells], dtype=float).reshape(-1, 2)


def baseline_proximity(grid: GridSpec, cells, C: int, seed: int = 0,
                       restarts: int = DEFAULT_RESTARTS, locations=None) -> NeighborhoodMap:
    """Euclidean K-means on raw (lon, lat) of the sampling locations."""
    cells = np.asarray(cells, dtype=np.int64)
    X = _location_matrix(grid, cells) if locations is None else np.asarray(locations, dtype=float)
    res = kmeans_l2(X, C, seed, restarts=restarts)
    return NeighborhoodMap.from_cells(grid, cells, res.labels, res.centroids, res.inertia)


def standardize(X: np.ndarray) -> np.ndarray:
    """Per-column z-scores; a constant column maps to zeros."""
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    # a constant column can have a rounding-level std, so test the range
    varies = np.ptp(X, axis=0) > 0
    safe = np.where(varies, sd, 1.0)
    return np.where(varies, (X - mu) / safe, 0.0)


def pid_features(locations, supports) -> np.ndarray:
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    density = np.log1p(np.asarray(supports, dtype=float))[:, None]
    return standardize(np.hstack([locations, density]))


def baseline_pid(grid: GridSpec, cells, supports, C: int, seed: int = 0,
                 restarts: int = DEFAULT_RESTARTS, locations=None) -> NeighborhoodMap:
    """Euclidean K-means on standardized (lon, lat, log(1 + support))."""
    cells = np.asarray(cells, dtype=np.int64)
    locs = _location_matrix(grid, cells) if locations is None else locations
    X = pid_features(locs, supports)
    res = kmeans_l2(X, C, seed, restarts=restarts)
    return NeighborhoodMap.from_cells(grid, cells, res.labels, res.centroids, res.inertia)
