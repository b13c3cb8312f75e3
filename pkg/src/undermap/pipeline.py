"""End-to-end discovery: records -> grid features -> L1 clustering -> map."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from undermap.cluster import DEFAULT_MAX_ITER, DEFAULT_RESTARTS, NeighborhoodMap, cluster_features
from undermap.featurize import (
    DEFAULT_MIN_SUPPORT,
    DEFAULT_RADIUS,
    FeatureMode,
    GridSpec,
    LocationFeature,
    SpatialIndex,
    assigned,
    featurize_grid,
    make_grid,
)
from undermap.geodata import DEFAULT_SPACING, CityDataset, DataError, bounding_box


@dataclass(frozen=True)
class PipelineConfig:
    C: int
    K: int
    r: float = DEFAULT_RADIUS
    d: float = DEFAULT_SPACING
    min_support: int = DEFAULT_MIN_SUPPORT
    mode: str = "hard"
    beta: float | None = None
    update_rule: str = "median"
    renormalize: bool = True
    restarts: int = DEFAULT_RESTARTS
    max_iter: int = DEFAULT_MAX_ITER
    seed: int = 0
    snap_granularity: float | None = None

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("r must be positive")
        if not self.d > 0:
            raise ValueError("d must be positive")
        if self.C < 1:
            raise ValueError("C must be at least 1")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.min_support < 1:
            raise ValueError("min_support must be at least 1")
        if self.update_rule not in ("median", "mean"):
            raise ValueError(f"unknown update rule {self.update_rule!r}")
        if self.restarts < 1 or self.max_iter < 1:
            raise ValueError("restarts and max_iter must be at least 1")
        FeatureMode(self.mode, self.beta)

    @property
    def feature_mode(self) -> FeatureMode:
        return FeatureMode(self.mode, self.beta)

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Discovery:
    grid: GridSpec
    entries: list[tuple[int, LocationFeature | None]]
    nmap: NeighborhoodMap

    @property
    def assigned_cells(self) -> np.ndarray:
        return np.array([c for c, f in self.entries if f is not None], dtype=np.int64)

    def supports(self) -> np.ndarray:
        return np.array([f.support for _, f in self.entries if f is not None])

    def effective_locations(self) -> np.ndarray:
        return np.array([f.effective_location for _, f in self.entries if f is not None]).reshape(-1, 2)


def featurize_dataset(dataset: CityDataset, cfg: PipelineConfig, workers: int = 1):
    if dataset.style_count != cfg.K:
        raise DataError(f"dataset has K={dataset.style_count} but config says K={cfg.K}")
    grid = make_grid(bounding_box(dataset, cfg.d), cfg.d, cfg.snap_granularity)
    index = SpatialIndex(dataset, bucket_size=cfg.r)
    entries = featurize_grid(index, grid, cfg.r, cfg.feature_mode, cfg.min_support, workers=workers)
    return grid, entries


def cluster_entries(grid: GridSpec, entries, cfg: PipelineConfig, workers: int = 1) -> NeighborhoodMap:
    cells, X = assigned(entries)
    if cells.size < cfg.C:
        raise DataError(f"only {cells.size} cells reach min_support={cfg.min_support}; need at least C={cfg.C}")
    return cluster_features(grid, cells, X, cfg.C, cfg.seed, max_iter=cfg.max_iter,
                            update_rule=cfg.update_rule, restarts=cfg.restarts,
                            renormalize=cfg.renormalize, workers=workers)


def discover(dataset: CityDataset, cfg: PipelineConfig, workers: int = 1) -> Discovery:
    grid, entries = featurize_dataset(dataset, cfg, workers)
    return Discovery(grid, entries, cluster_entries(grid, entries, cfg, workers))
