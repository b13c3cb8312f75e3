"""Domain types, record/label-grid loaders and GeoJSON export.

Coordinates stay in raw WGS84 degrees everywhere; nothing is projected.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from undermap.cluster import NeighborhoodMap
    from undermap.featurize import GridSpec

LOGGER = logging.getLogger(__name__)

DEFAULT_SPACING = 0.01
LABEL_GRID_MAGIC = "# undermap-labelgrid v1"


class DataError(ValueError):
    """Input data is missing, malformed or inconsistent with the configuration."""


@dataclass(frozen=True)
class StyleRecord:
    id: str
    lat: float
    lon: float
    style_id: int


@dataclass(frozen=True, eq=False)
class CityDataset:
    city_name: str
    style_count: int
    records: tuple[StyleRecord, ...]
    skipped: int = 0
    lons: np.ndarray = field(init=False, repr=False)
    lats: np.ndarray = field(init=False, repr=False)
    styles: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.records:
            raise DataError(f"dataset {self.city_name!r} has no records")
        if self.style_count < 1:
            raise DataError("style_count must be positive")
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        lons = np.fromiter((r.lon for r in records), dtype=float, count=len(records))
        lats = np.fromiter((r.lat for r in records), dtype=float, count=len(records))
        styles = np.fromiter((r.style_id for r in records), dtype=np.int64, count=len(records))
        if styles.min() < 0 or styles.max() >= self.style_count:
            raise DataError(f"style ids must lie in [0, {self.style_count})")
        for arr in (lons, lats, styles):
            arr.setflags(write=False)
        object.__setattr__(self, "lons", lons)
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "styles", styles)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box given by its southwestern corner and its extent."""

    w: float
    s: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"bounding box extent must be positive, got {self.width}x{self.height}")

    @property
    def e(self) -> float:
        return self.w + self.width

    @property
    def n(self) -> float:
        return self.s + self.height

    def contains(self, lon: float, lat: float) -> bool:
        return self.w <= lon <= self.e and self.s <= lat <= self.n


@dataclass(frozen=True, eq=False)
class StyleHistogram:
    values: np.ndarray
    support: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("histogram must be one-dimensional")
        if self.support < 1:
            raise ValueError("a histogram needs at least one contributing record")
        if np.any(values < 0) or abs(values.sum() - 1.0) > 1e-9:
            raise ValueError("histogram must lie on the probability simplex")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_styles(cls, styles: np.ndarray, k: int) -> "StyleHistogram":
        styles = np.asarray(styles, dtype=np.int64)
        if styles.size == 0:
            raise ValueError("cannot build a histogram from zero records")
        counts = np.bincount(styles, minlength=k).astype(float)
        return cls(counts / counts.sum(), int(styles.size))


@dataclass(frozen=True)
class LabelGrid:
    """Benchmark ground truth: one label id per (col, row) cell of a regular lattice."""

    origin: tuple[float, float]
    granularity: float
    cells: Mapping[tuple[int, int], int]
    label_names: tuple[str, ...]

    def __post_init__(self):
        if not self.granularity > 0:
            raise DataError("granularity must be positive")
        if not self.cells:
            raise DataError("label grid has no cells")
        n = len(self.label_names)
        for key, label in self.cells.items():
            if not 0 <= label < n:
                raise DataError(f"cell {key} has unknown label id {label}")
        object.__setattr__(self, "label_names", tuple(self.label_names))

    def cell_center(self, col: int, row: int) -> tuple[float, float]:
        g = self.granularity
        return self.origin[0] + g * (col + 0.5), self.origin[1] + g * (row + 0.5)


# --------------------------------------------------------------------------
# records

def _parse_record(line: str) -> tuple[str, float, float, int] | None:
    try:
        obj = json.loads(line)
    except (ValueError, RecursionError):
        return None
    if not isinstance(obj, dict):
        return None
    try:
        rid, lat, lon, style = obj["id"], obj["lat"], obj["lon"], obj["style"]
    except KeyError:
        return None
    if isinstance(style, bool) or not isinstance(style, int):
        return None
    if isinstance(lat, bool) or isinstance(lon, bool):
        return None
    if not isinstance(lat, (int, float)) or not isinstance(lon, (int, float)):
        return None
    lat, lon = float(lat), float(lon)
    if not (math.isfinite(lat) and math.isfinite(lon)):
        return None
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        return None
    if style < 0:
        return None
    return str(rid), lat, lon, style


def load_records(path, style_count: int, city_name: str | None = None) -> CityDataset:
    """Read a line-delimited JSON record file.

    Every line is an object with keys ``id``, ``lat``, ``lon`` and ``style``.
    Malformed lines are skipped and counted (``CityDataset.skipped``); a style
    id at or above ``style_count`` aborts with the offending line number since
    it means the file and the configured style count disagree.
    """
    if not os.path.isfile(path):
        raise DataError(f"record file not found: {path}")
    if city_name is None:
        city_name = os.path.splitext(os.path.basename(path))[0]
    records = []
    skipped = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8").strip()
            except UnicodeDecodeError:
                skipped += 1
                continue
            if not line or line.startswith("#"):
                continue
            parsed = _parse_record(line)
            if parsed is None:
                skipped += 1
                continue
            rid, lat, lon, style = parsed
            if style >= style_count:
                raise DataError(
                    f"{path}:{lineno}: style id {style} out of range for style_count={style_count}"
                )
            records.append(StyleRecord(rid, lat, lon, style))
    if skipped:
        LOGGER.warning("%s: skipped %d malformed line(s)", path, skipped)
    if not records:
        raise DataError(f"{path}: no valid records")
    return CityDataset(city_name, style_count, tuple(records), skipped=skipped)


def save_records(dataset: CityDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in dataset.records:
            fh.write(json.dumps({"id": r.id, "lat": r.lat, "lon": r.lon, "style": r.style_id}))
            fh.write("\n")


def bounding_box(dataset: CityDataset, d: float = DEFAULT_SPACING) -> BoundingBox:
    """Tight box around all record locations.

    A zero extent along either axis is widened to ``d``, centred on the
    records, so the sampling lattice always has at least one cell.
    """
    if len(dataset) == 0:
        raise DataError("cannot take the bounding box of an empty dataset")
    if not d > 0:
        raise ValueError("spacing must be positive")
    lo_lon, hi_lon = float(dataset.lons.min()), float(dataset.lons.max())
    lo_lat, hi_lat = float(dataset.lats.min()), float(dataset.lats.max())
    w, width = lo_lon, hi_lon - lo_lon
    s, height = lo_lat, hi_lat - lo_lat
    if width <= 0:
        w, width = lo_lon - d / 2, d
    if height <= 0:
        s, height = lo_lat - d / 2, d
    return BoundingBox(w, s, width, height)


# --------------------------------------------------------------------------
# label grids

def _fail(path, lineno, msg):
    raise DataError(f"{path}:{lineno}: {msg}")


def load_label_grid(path) -> LabelGrid:
    """Parse a benchmark label-grid file.

    Layout (comma separated, ``#`` lines are comments)::

        origin_lon,origin_lat,<lon>,<lat>
        granularity,<degrees>
        label,<id>,<name>        one per label
        col,row,label_id         column header
        <col>,<row>,<label_id>   one per cell

    Label names are deduplicated in first-appearance order; cells pointing at
    a duplicated name are remapped onto the first id that carried it.
    """
    if not os.path.isfile(path):
        raise DataError(f"label grid not found: {path}")
    origin = None
    granularity = None
    table: dict[int, str] = {}
    cells: dict[tuple[int, int], int] = {}
    in_cells = False
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8").strip()
            except UnicodeDecodeError:
                _fail(path, lineno, "not valid UTF-8")
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            key = parts[0]
            try:
                if in_cells:
                    if len(parts) != 3:
                        _fail(path, lineno, "expected col,row,label_id")
                    col, row, lab = (int(p) for p in parts)
                    if lab not in table:
                        _fail(path, lineno, f"unknown label id {lab}")
                    if cells.get((col, row), lab) != lab:
                        _fail(path, lineno, f"cell ({col},{row}) labelled twice")
                    cells[(col, row)] = lab
                elif key == "origin_lon":
                    if len(parts) != 4 or parts[1] != "origin_lat":
                        _fail(path, lineno, "expected origin_lon,origin_lat,<lon>,<lat>")
                    value = (float(parts[2]), float(parts[3]))
                    if origin is not None and origin != value:
                        _fail(path, lineno, "conflicting origin declarations")
                    origin = value
                elif key == "granularity":
                    if len(parts) != 2:
                        _fail(path, lineno, "expected granularity,<degrees>")
                    value = float(parts[1])
                    if not (math.isfinite(value) and value > 0):
                        _fail(path, lineno, f"invalid granularity {parts[1]}")
                    if granularity is not None and granularity != value:
                        _fail(path, lineno, "inconsistent granularity declaration")
                    granularity = value
                elif key == "label":
                    if len(parts) != 3:
                        _fail(path, lineno, "expected label,<id>,<name>")
                    lab = int(parts[1])
                    if lab in table and table[lab] != parts[2]:
                        _fail(path, lineno, f"label id {lab} declared twice")
                    table[lab] = parts[2]
                elif key == "col":
                    if parts != ["col", "row", "label_id"]:
                        _fail(path, lineno, "expected header col,row,label_id")
                    in_cells = True
                else:
                    _fail(path, lineno, f"unexpected line {line[:40]!r}")
            except ValueError as exc:
                if isinstance(exc, DataError):
                    raise
                _fail(path, lineno, str(exc))
    if origin is None or not all(math.isfinite(v) for v in origin):
        raise DataError(f"{path}: missing origin declaration")
    if granularity is None:
        raise DataError(f"{path}: missing granularity declaration")
    if not cells:
        raise DataError(f"{path}: benchmark has no cells")

    names: list[str] = []
    remap: dict[int, int] = {}
    for lab in sorted(table):
        name = table[lab]
        if name not in names:
            names.append(name)
        remap[lab] = names.index(name)
    return LabelGrid(origin, granularity, {k: remap[v] for k, v in cells.items()}, tuple(names))


def save_label_grid(grid: LabelGrid, path) -> None:
    lines = [
        LABEL_GRID_MAGIC,
        f"origin_lon,origin_lat,{grid.origin[0]!r},{grid.origin[1]!r}",
        f"granularity,{grid.granularity!r}",
    ]
    lines += [f"label,{i},{name}" for i, name in enumerate(grid.label_names)]
    lines.append("col,row,label_id")
    lines += [f"{c},{r},{lab}" for (c, r), lab in sorted(grid.cells.items(), key=lambda kv: (kv[0][1], kv[0][0]))]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# GeoJSON

def cell_polygon(grid: "GridSpec", col: int, row: int) -> list[list[float]]:
    w, s, d = grid.bbox.w, grid.bbox.s, grid.d
    x0, y0, x1, y1 = w + d * col, s + d * row, w + d * (col + 1), s + d * (row + 1)
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


def export_geojson(
    nmap: "NeighborhoodMap",
    grid: "GridSpec | None" = None,
    top_styles: Mapping[int, Sequence[int]] | None = None,
) -> str:
    """Render a neighborhood map as a GeoJSON FeatureCollection string.

    One square polygon per assigned cell; unassigned cells are left out.
    ``top_styles`` maps a cluster label to its ranked style indices.
    """
    grid = grid if grid is not None else nmap.grid
    features = []
    for cell, label in enumerate(nmap.labels):
        if label < 0:
            continue
        row, col = divmod(cell, grid.n_cols)
        props = {"cell": cell, "col": col, "row": row, "label": int(label)}
        if top_styles is not None and int(label) in top_styles:
            props["top_styles"] = [int(k) for k in top_styles[int(label)]]
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [cell_polygon(grid, col, row)]},
            "properties": props,
        })
    return json.dumps({"type": "FeatureCollection", "features": features}, indent=None)


def top_styles_per_cluster(centroids: np.ndarray, n: int = 5) -> dict[int, list[int]]:
    order = np.argsort(-np.asarray(centroids), axis=1, kind="stable")
    return {c: [int(k) for k in order[c, :n]] for c in range(order.shape[0])}


def dataset_from_arrays(city_name: str, style_count: int, lons: Iterable[float],
                        lats: Iterable[float], styles: Iterable[int], prefix: str = "r") -> CityDataset:
    records = tuple(
        StyleRecord(f"{prefix}{i}", float(lat), float(lon), int(st))
        for i, (lon, lat, st) in enumerate(zip(lons, lats, styles))
    )
    return CityDataset(city_name, style_count, records)
