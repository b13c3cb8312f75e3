"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Settings come from built-in defaults, then an optional flat ``key=value``
file given with ``--config``, then command-line flags (highest precedence).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from undermap import analyze, evaluate, synth
from undermap.cluster import load_map, save_map
from undermap.featurize import DEFAULT_MIN_SUPPORT, DEFAULT_RADIUS, read_features, write_features
from undermap.geodata import (
    DEFAULT_SPACING,
    BoundingBox,
    DataError,
    export_geojson,
    load_label_grid,
    load_records,
    save_label_grid,
    save_records,
    top_styles_per_cluster,
)
from undermap.pipeline import PipelineConfig, cluster_entries, discover, featurize_dataset

LOGGER = logging.getLogger("undermap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MANIFEST_FORMAT = "undermap-manifest v1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if str(text).strip().lower() in ("", "none") else float(text)


# (dest, flag, type, default, help)
PIPELINE_OPTIONS = [
    ("C", "--C", int, None, "number of clusters (required)"),
    ("K", "--K", int, None, "number of styles in the record file (required)"),
    ("r", "--r", float, DEFAULT_RADIUS, "featurization radius in degrees"),
    ("d", "--d", float, DEFAULT_SPACING, "grid spacing in degrees"),
    ("min_support", "--min-support", int, DEFAULT_MIN_SUPPORT, "records needed for a cell to be assigned"),
    ("mode", "--mode", str, "hard", "histogram mode: hard or exp"),
    ("beta", "--beta", _opt_float, None, "decay rate for exp mode (default 1/r)"),
    ("update_rule", "--update-rule", str, "median", "centroid update: median or mean"),
    ("renormalize", "--renormalize", _bool, True, "rescale median centroids onto the simplex"),
    ("restarts", "--restarts", int, 10, "k-means restarts (seeds seed..seed+restarts-1)"),
    ("max_iter", "--max-iter", int, 100, "iterations per restart"),
    ("seed", "--seed", int, 0, "master random seed"),
    ("snap_granularity", "--snap-granularity", _opt_float, None,
     "align the grid origin to multiples of this benchmark granularity"),
    ("workers", "--workers", int, 1, "parallel workers (output does not depend on it)"),
]
_OPTION_TYPES = {dest: typ for dest, _, typ, _, _ in PIPELINE_OPTIONS}


def read_config_file(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _OPTION_TYPES:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _OPTION_TYPES[key](value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return values


def _add_pipeline_options(p, overrides, only=None):
    p.add_argument("--config", help="flat key=value config file", default=None)
    for dest, flag, typ, default, help_ in PIPELINE_OPTIONS:
        if only is not None and dest not in only:
            continue
        p.add_argument(flag, dest=dest, type=typ, default=overrides.get(dest, default), help=help_)


def build_parser(overrides: dict | None = None) -> argparse.ArgumentParser:
    overrides = overrides or {}
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="undermap", description="Discover style neighborhoods from geo-tagged records.",
                     formatter_class=fmt)
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic city with planted neighborhoods", formatter_class=fmt)
    p.add_argument("--scenario", choices=["planted", "split-twin", "shifted-pair"], default="planted",
                   help="which planted layout to generate")
    p.add_argument("--out-dir", required=True, help="directory for records and truth files")
    p.add_argument("--size", type=float, default=0.3, help="side of the square city box in degrees")
    p.add_argument("--origin", type=float, nargs=2, default=(10.0, 40.0), metavar=("LON", "LAT"),
                   help="southwestern corner of the city box")
    p.add_argument("--density", type=float, default=22.0, help="expected records per 0.01 degree cell")
    p.add_argument("--regions", type=int, default=4, help="regions for the planted scenario")
    p.add_argument("--alpha", type=float, default=0.1, help="Dirichlet concentration of region styles")
    p.add_argument("--shift", type=float, default=0.5, help="analog deviation for shifted-pair")
    _add_pipeline_options(p, overrides, only={"K", "seed"})

    p = sub.add_parser("featurize", help="compute grid style histograms", formatter_class=fmt)
    p.add_argument("records", help="line-delimited JSON record file")
    p.add_argument("--out", required=True, help="feature dump to write")
    _add_pipeline_options(p, overrides)

    p = sub.add_parser("cluster", help="cluster a feature dump into a neighborhood map", formatter_class=fmt)
    p.add_argument("features", help="feature dump from the featurize command")
    p.add_argument("--out", required=True, help="map file to write")
    p.add_argument("--geojson", default=None, help="also write a GeoJSON rendering here")
    _add_pipeline_options(p, overrides)

    p = sub.add_parser("run", help="featurize, cluster and export in one go", formatter_class=fmt)
    p.add_argument("records", help="line-delimited JSON record file")
    p.add_argument("--out-dir", required=True, help="directory for all artifacts")
    _add_pipeline_options(p, overrides)

    for name, help_ in (("unique", "rank the most distinct neighborhoods"),):
        p = sub.add_parser(name, help=help_, formatter_class=fmt)
        p.add_argument("--city", nargs=2, action="append", required=True, metavar=("RECORDS", "MAP"),
                       help="a city's record file and map (repeatable)")
        p.add_argument("--json", action="store_true", help="emit JSON lines instead of a table")
        _add_pipeline_options(p, overrides, only={"K"})

    for name, help_ in (("similar", "cross-city pairs by raw L1 distance"),
                        ("analogy", "cross-city pairs by contextual-encoding cosine distance")):
        p = sub.add_parser(name, help=help_, formatter_class=fmt)
        p.add_argument("--city-a", nargs=2, required=True, metavar=("RECORDS", "MAP"), help="first city")
        p.add_argument("--city-b", nargs=2, required=True, metavar=("RECORDS", "MAP"), help="second city")
        p.add_argument("--top", type=int, default=10, help="rows to print (0 = all)")
        p.add_argument("--json", action="store_true", help="emit JSON lines instead of a table")
        if name == "analogy":
            p.add_argument("--tol", type=float, default=0.0, help="dead band for the sign encoding")
        _add_pipeline_options(p, overrides, only={"K"})

    p = sub.add_parser("evaluate", help="score a map against a benchmark label grid", formatter_class=fmt)
    p.add_argument("--map", required=True, help="map file")
    p.add_argument("--bench", required=True, help="benchmark label-grid file")
    p.add_argument("--features", default=None,
                   help="feature dump; with it, random/proximity/PID baselines are scored too")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    _add_pipeline_options(p, overrides, only={"C", "seed", "restarts"})
    return parser


def _config_from(args) -> PipelineConfig:
    missing = [k for k in ("C", "K") if getattr(args, k, None) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + m for m in missing)}")
    kwargs = {k: getattr(args, k) for k in PipelineConfig.field_names() if hasattr(args, k)}
    try:
        return PipelineConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _require_k(args) -> int:
    if args.K is None:
        raise UsageError("missing required setting: --K")
    return args.K


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# commands

def cmd_run(cfg: PipelineConfig, records_path, out_dir, workers: int = 1) -> dict:
    """Full pipeline; writes features.txt, map.txt, map.geojson and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_records(records_path, cfg.K)
    res = discover(dataset, cfg, workers=workers)
    write_features(out / "features.txt", res.grid, cfg.K, res.entries)
    save_map(res.nmap, out / "map.txt")
    top = top_styles_per_cluster(res.nmap.centroids)
    (out / "map.geojson").write_text(export_geojson(res.nmap, res.grid, top) + "\n", encoding="utf-8")
    artifacts = {name: _sha256(out / name) for name in ("features.txt", "map.txt", "map.geojson")}
    manifest = {
        "format": MANIFEST_FORMAT,
        "config": cfg.as_dict(),
        "config_hash": cfg.digest(),
        "input": {"name": os.path.basename(str(records_path)), "sha256": _sha256(records_path),
                  "records": len(dataset), "skipped_lines": dataset.skipped},
        "grid": {"n_cols": res.grid.n_cols, "n_rows": res.grid.n_rows,
                 "assigned_cells": int(res.assigned_cells.size)},
        "inertia": res.nmap.inertia,
        "artifacts": artifacts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _cmd_synth(args):
    if args.K is None:
        raise UsageError("missing required setting: --K")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bbox = BoundingBox(args.origin[0], args.origin[1], args.size, args.size)
    if args.scenario == "planted":
        specs = [synth.planted_spec(bbox, args.K, args.seed, args.regions, args.density, args.alpha)]
    elif args.scenario == "split-twin":
        specs = [synth.split_twin_spec(bbox, args.K, args.seed, args.density, args.alpha)]
    else:
        base = synth.planted_spec(bbox, args.K, args.seed, 4, args.density, args.alpha)
        specs = list(synth.shifted_city_pair(base, args.shift, args.seed))
    for i, spec in enumerate(specs):
        dataset, truth = synth.generate_city(spec, args.seed + i)
        save_records(dataset, out / f"{spec.name}.jsonl")
        save_label_grid(truth, out / f"{spec.name}.truth.csv")
        print(f"{spec.name}: {len(dataset)} records, {len(truth.cells)} truth cells -> {out}")


def _cmd_featurize(args):
    cfg = _config_from(args)
    dataset = load_records(args.records, cfg.K)
    grid, entries = featurize_dataset(dataset, cfg, workers=args.workers)
    write_features(args.out, grid, cfg.K, entries)
    n = sum(f is not None for _, f in entries)
    print(f"{n}/{grid.n_cells} cells assigned -> {args.out}")


def _cmd_cluster(args):
    cfg = _config_from(args)
    grid, k, entries = read_features(args.features)
    if k != cfg.K:
        raise DataError(f"feature dump has K={k} but config says K={cfg.K}")
    nmap = cluster_entries(grid, entries, cfg, workers=args.workers)
    save_map(nmap, args.out)
    if args.geojson:
        Path(args.geojson).write_text(
            export_geojson(nmap, grid, top_styles_per_cluster(nmap.centroids)) + "\n", encoding="utf-8")
    print(f"C={cfg.C} inertia={nmap.inertia:.6f} -> {args.out}")


def _cmd_run(args):
    cfg = _config_from(args)
    manifest = cmd_run(cfg, args.records, args.out_dir, workers=args.workers)
    print(f"{manifest['grid']['assigned_cells']} cells clustered into C={cfg.C}; "
          f"config {manifest['config_hash'][:12]} -> {args.out_dir}")


def _profile(records, map_path, K):
    dataset = load_records(records, K)
    return analyze.build_profile(dataset, load_map(map_path))


def _print_rows(rows, as_json, columns):
    if as_json:
        analyze.write_report(rows, sys.stdout)
        return
    widths = [max(len(c), *(len(_fmt(r[c])) for r in rows)) if rows else len(c) for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(_fmt(r[c]).ljust(w) for c, w in zip(columns, widths)))


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _cmd_unique(args):
    K = _require_k(args)
    profiles = [_profile(rec, mp, K) for rec, mp in args.city]
    ranked = analyze.rank_unique_across_cities(profiles)
    rows = [{"city": c, "label": lab, "metric": "min_l1_to_sibling", "value": s} for c, lab, s in ranked]
    _print_rows(rows, args.json, ["city", "label", "metric", "value"])


def _cmd_pairs(args):
    K = _require_k(args)
    a = _profile(*args.city_a, K)
    b = _profile(*args.city_b, K)
    if args.command == "similar":
        pairs, metric = analyze.similar_pairs(a, b), "l1"
    else:
        pairs, metric = analyze.analogy_pairs(a, b, args.tol), "cosine_distance"
    if args.top > 0:
        pairs = pairs[:args.top]
    rows = analyze.pair_report(a, b, pairs, metric)
    _print_rows(rows, args.json, ["city_a", "label_a", "city_b", "label_b", "metric", "value"])


def _cmd_evaluate(args):
    nmap = load_map(args.map)
    bench = load_label_grid(args.bench)
    results = {"map": evaluate.evaluation_report(evaluate.align_to_benchmark(nmap, bench), bench.label_names)}
    if args.features:
        grid, _, entries = read_features(args.features)
        cells = np.array([c for c, f in entries if f is not None], dtype=np.int64)
        supports = [f.support for _, f in entries if f is not None]
        locs = np.array([f.effective_location for _, f in entries if f is not None]).reshape(-1, 2)
        C = args.C if args.C is not None else nmap.n_clusters
        baselines = {
            "random": evaluate.baseline_random(grid, cells, C, args.seed),
            "proximity": evaluate.baseline_proximity(grid, cells, C, args.seed, args.restarts),
            "pid": evaluate.baseline_pid(grid, cells, supports, C, args.seed, args.restarts, locations=locs),
        }
        for name, bmap in baselines.items():
            results[name] = evaluate.evaluation_report(evaluate.align_to_benchmark(bmap, bench), bench.label_names)
    if args.json:
        print(json.dumps(results, indent=2))
        return
    print(f"{'method':<10} {'NMI':>8} {'Purity':>8} {'MMIoU':>8} {'pairs':>7} {'dropped':>8}")
    for name, rep in results.items():
        print(f"{name:<10} {rep['nmi']:8.4f} {rep['purity']:8.4f} {rep['mmiou']:8.4f} "
              f"{rep['pairs']:7d} {rep['dropped_benchmark']:8d}")
    print()
    classes = list(results["map"]["mmiou_per_class"])
    print(f"{'per-class MMIoU':<16}" + "".join(f"{str(c)[:10]:>11}" for c in classes))
    for name, rep in results.items():
        print(f"{name:<16}" + "".join(f"{rep['mmiou_per_class'].get(c, 0.0):11.4f}" for c in classes))


COMMANDS = {
    "synth": _cmd_synth,
    "featurize": _cmd_featurize,
    "cluster": _cmd_cluster,
    "run": _cmd_run,
    "unique": _cmd_unique,
    "similar": _cmd_pairs,
    "analogy": _cmd_pairs,
    "evaluate": _cmd_evaluate,
}


def _find_config(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    return known.config


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config_path = _find_config(argv)
        overrides = read_config_file(config_path) if config_path else {}
        args = build_parser(overrides).parse_args(argv)
    except UsageError as exc:
        print(f"undermap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"undermap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"undermap: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        LOGGER.debug("internal error", exc_info=True)
        print(f"undermap: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
