"""Neighborhood descriptors and the unique / similar / analogy analyses."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from undermap.cluster import NeighborhoodMap
from undermap.geodata import CityDataset, StyleHistogram

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Neighborhood:
    city: str
    label: int
    descriptor: StyleHistogram
    cells: frozenset[int]


@dataclass(frozen=True, eq=False)
class CityProfile:
    city: str
    descriptor: StyleHistogram
    neighborhoods: tuple[Neighborhood, ...]

    def descriptors(self) -> np.ndarray:
        return np.stack([n.descriptor.values for n in self.neighborhoods])


def build_profile(dataset: CityDataset, nmap: NeighborhoodMap) -> CityProfile:
    """Aggregate records into per-label descriptors.

    Each record goes to the lattice square holding it; records in unassigned
    squares (or outside the grid) only count toward the city descriptor.
    Labels that end up with no records are dropped with a warning.
    """
    k = dataset.style_count
    cells = nmap.grid.cell_of(dataset.lons, dataset.lats)
    rec_labels = np.where(cells >= 0, nmap.labels[np.clip(cells, 0, None)], -1)
    outside = int(np.count_nonzero(cells < 0))
    if outside:
        LOGGER.warning("%s: %d record(s) fall outside the map grid", dataset.city_name, outside)
    hoods = []
    for label in np.unique(nmap.labels[nmap.labels >= 0]):
        members = dataset.styles[rec_labels == label]
        if members.size == 0:
            LOGGER.warning("%s: label %d has no records and is dropped", dataset.city_name, label)
            continue
        cell_set = frozenset(int(c) for c in np.flatnonzero(nmap.labels == label))
        hoods.append(Neighborhood(dataset.city_name, int(label), StyleHistogram.from_styles(members, k), cell_set))
    return CityProfile(dataset.city_name, StyleHistogram.from_styles(dataset.styles, k), tuple(hoods))


def _pairwise_l1(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.abs(A[:, None, :] - B[None, :, :]).sum(axis=2)


def uniqueness_scores(profile: CityProfile) -> np.ndarray:
    """L1 distance from each neighborhood to its most similar sibling."""
    if len(profile.neighborhoods) < 2:
        raise ValueError(f"{profile.city}: need at least 2 neighborhoods, got {len(profile.neighborhoods)}")
    D = _pairwise_l1(profile.descriptors(), profile.descriptors())
    np.fill_diagonal(D, np.inf)
    return D.min(axis=1)


def unique_neighborhood(profile: CityProfile) -> tuple[int, float]:
    """Index (into ``profile.neighborhoods``) of the most distinct neighborhood and its score."""
    scores = uniqueness_scores(profile)
    i = int(np.argmax(scores))
    return i, float(scores[i])


def rank_unique_across_cities(profiles: Iterable[CityProfile]) -> list[tuple[str, int, float]]:
    rows = []
    for prof in profiles:
        for hood, score in zip(prof.neighborhoods, uniqueness_scores(prof)):
            rows.append((prof.city, hood.label, float(score)))
    return sorted(rows, key=lambda t: (-t[2], t[0], t[1]))


def similar_pairs(a: CityProfile, b: CityProfile) -> list[tuple[int, int, float]]:
    """All cross-city neighborhood pairs by ascending L1 distance."""
    D = _pairwise_l1(a.descriptors(), b.descriptors())
    rows = [(i, j, float(D[i, j])) for i in range(D.shape[0]) for j in range(D.shape[1])]
    return sorted(rows, key=lambda t: (t[2], t[0], t[1]))


def contextual_encoding(h_n, h_c, tol: float = 0.0) -> np.ndarray:
    """Entrywise sign of a neighborhood's deviation from its city, with a dead band ``tol``."""
    h_n = getattr(h_n, "values", h_n)
    h_c = getattr(h_c, "values", h_c)
    h_n = np.asarray(h_n, dtype=float)
    h_c = np.asarray(h_c, dtype=float)
    if h_n.shape != h_c.shape:
        raise ValueError(f"dimension mismatch: {h_n.shape} vs {h_c.shape}")
    diff = h_n - h_c
    out = np.zeros(diff.shape, dtype=np.int8)
    out[diff > tol] = 1
    out[diff < -tol] = -1
    return out


def cosine_distance(u, v) -> float:
    """1 - cos(u, v); taken as 1 when either vector is zero."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu2, nv2 = float(u.dot(u)), float(v.dot(v))
    if nu2 == 0 or nv2 == 0:
        return 1.0
    # sqrt of the product keeps u == v and u == -v exact for sign vectors
    return float(np.clip(1.0 - u.dot(v) / np.sqrt(nu2 * nv2), 0.0, 2.0))


def encodings(profile: CityProfile, tol: float = 0.0) -> np.ndarray:
    return np.stack([contextual_encoding(n.descriptor, profile.descriptor, tol) for n in profile.neighborhoods])


def analogy_pairs(a: CityProfile, b: CityProfile, tol: float = 0.0) -> list[tuple[int, int, float]]:
    """Cross-city pairs by ascending cosine distance between contextual encodings."""
    ea, eb = encodings(a, tol), encodings(b, tol)
    rows = [(i, j, cosine_distance(ea[i], eb[j])) for i in range(len(ea)) for j in range(len(eb))]
    return sorted(rows, key=lambda t: (t[2], t[0], t[1]))


def pair_report(a: CityProfile, b: CityProfile, pairs: Sequence[tuple[int, int, float]], metric: str) -> list[dict]:
    return [
        {"city_a": a.city, "label_a": a.neighborhoods[i].label,
         "city_b": b.city, "label_b": b.neighborhoods[j].label,
         "metric": metric, "value": value}
        for i, j, value in pairs
    ]


def write_report(rows: Iterable[dict], fh) -> None:
    for row in rows:
        fh.write(json.dumps(row, sort_keys=False) + "\n")
