"""Command-line front end: ``crashlab <subcommand> ...``.

Exit codes: 0 success, 1 data error, 2 usage error.  Output goes to ``-o``,
else ``$CRASHLAB_OUT``, else ``./crashlab-out``.  Every run writes
``manifest.json`` listing inputs, seed, library versions and output hashes.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
import scipy

from . import __version__
from .descriptive import DIMENSIONS, count_by, dimension_bins, record_labels
from .errors import CrashLabError
from .figures import density_svg, importance_svg, render_svg_bar
from .forest import ForestParams, build_features, stratified_split, tune
from .hsm import load_corridor, predict_corridor
from .inferential import SCHEMA_VERSION, ContingencyTable, chi_square_gof, chi_square_independence
from .ingest import DEFAULT_CORRIDOR_LENGTH, DEFAULT_STUDY_YEARS, CrashDataset, dumps_csv, load_codebook, parse_csv
from .report import ReportOptions, battery_markdown, build_report, run_forest, run_nb, substream_seed, test_battery
from .spatial import (build_segment_grid, corridor_kde, dbscan_1d, hotspot_markdown, hotspot_table,
                      load_landmarks, morans_i, morans_i_permutation)
from .glm import irr_markdown, irr_table
from .synth import GeneratorConfig, generate, generator_metadata, load_spec, verify_marginals

DEFAULT_OUT = "crashlab-out"
SUBCOMMANDS = ("synth", "describe", "chisq", "hotspots", "moran", "nbreg", "rf", "hsm", "report")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _study_years(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(p) for p in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YEAR-YEAR, got {text!r}")
    if hi < lo:
        raise argparse.ArgumentTypeError("end year precedes start year")
    return lo, hi


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, needs_input: bool = True) -> None:
    if needs_input:
        p.add_argument("input", help="crash CSV in the crashlab schema")
        p.add_argument("--corridor-length", type=float, default=DEFAULT_CORRIDOR_LENGTH,
                       help="corridor length in miles (default %(default)s)")
        p.add_argument("--study-years", type=_study_years, default=DEFAULT_STUDY_YEARS,
                       metavar="YEAR-YEAR", help="study period, inclusive (default 2019-2023)")
        p.add_argument("--codebook", help="CSV mapping raw codes to canonical categories")
        p.add_argument("--permissive", action="store_true",
                       help="map unknown categorical codes to Other instead of failing")
    p.add_argument("-o", "--out", help="output directory (overrides $CRASHLAB_OUT)")
    p.add_argument("--seed", type=int, default=42, help="master seed (default %(default)s)")
    p.add_argument("--alpha", type=float, default=0.05, help="significance level (default %(default)s)")


def _forest_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trees", type=_positive_int, default=100)
    p.add_argument("--max-depth", type=_positive_int, default=10)
    p.add_argument("--min-samples-split", type=_positive_int, default=2)
    p.add_argument("--min-samples-leaf", type=_positive_int, default=1)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crashlab", description="Rural-corridor crash analysis toolkit.")
    parser.add_argument("--version", action="version", version=f"crashlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic corpus (corpus.csv)")
    _common(p, needs_input=False)
    p.add_argument("--spec", help="marginal spec JSON (default: bundled)")

    p = sub.add_parser("describe", help="count crashes along a dimension")
    _common(p)
    p.add_argument("--dim", action="append", choices=DIMENSIONS, required=True,
                   help="dimension to tabulate; repeatable")
    p.add_argument("--width", type=float, default=0.5, help="milepost bin width in miles")
    p.add_argument("--svg", action="store_true", help="also render a bar chart per dimension")

    p = sub.add_parser("chisq", help="chi-square tests (default: the full battery)")
    _common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--gof", choices=DIMENSIONS, help="uniform goodness of fit on one dimension")
    g.add_argument("--cross", nargs=2, metavar=("ROW", "COL"), choices=DIMENSIONS,
                   help="independence test between two dimensions")

    p = sub.add_parser("hotspots", help="hotspot windows, KDE and DBSCAN")
    _common(p)
    p.add_argument("--window", type=float, default=0.5)
    p.add_argument("--top", type=_positive_int, default=5)
    p.add_argument("--landmarks", help="JSON name->milepost map (default: bundled)")
    p.add_argument("--bandwidth", type=float, help="KDE bandwidth in miles (default: Silverman)")
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--min-pts", type=_positive_int, default=3)

    p = sub.add_parser("moran", help="global Moran's I over fixed segments")
    _common(p)
    p.add_argument("--segment", type=float, default=0.1, help="segment length in miles")
    p.add_argument("--permutations", type=int, default=999)
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = sub.add_parser("nbreg", help="negative binomial regression of damage")
    _common(p)

    p = sub.add_parser("rf", help="random-forest injury classifier")
    _common(p)
    _forest_flags(p)
    p.add_argument("--tune", action="store_true", help="grid-search depth/split/leaf by 5-fold CV first")

    p = sub.add_parser("hsm", help="HSM SPF prediction vs observed")
    _common(p, needs_input=False)
    p.add_argument("--corridor", help="corridor JSON/TOML (default: bundled)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--observed", type=float, help="observed crash total")
    src.add_argument("--input", help="crash CSV; observed total and yearly counts are taken from it")
    p.add_argument("--expected", type=float, help="override the computed expected total")

    p = sub.add_parser("report", help="run the whole pipeline and write report.md")
    _common(p)
    _forest_flags(p)
    p.add_argument("--segment", type=float, default=0.1)
    p.add_argument("--permutations", type=int, default=999)
    p.add_argument("--window", type=float, default=0.5)
    p.add_argument("--corridor", help="corridor JSON/TOML (default: bundled)")
    p.add_argument("--landmarks", help="JSON name->milepost map (default: bundled)")
    p.add_argument("--hsm-expected", type=float, help="override the HSM expected total")
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def resolve_out(args) -> Path:
    return Path(args.out or os.environ.get("CRASHLAB_OUT") or DEFAULT_OUT)


def _load(args, path: str | None = None) -> CrashDataset:
    codebook = load_codebook(args.codebook) if getattr(args, "codebook", None) else None
    return parse_csv(path or args.input, codebook,
                     corridor_length=getattr(args, "corridor_length", DEFAULT_CORRIDOR_LENGTH),
                     study_years=getattr(args, "study_years", DEFAULT_STUDY_YEARS),
                     permissive=getattr(args, "permissive", False))


def _input_entry(path: str) -> dict:
    return {"path": path, "sha256": _sha256(Path(path).read_bytes())}


def _forest_params(args) -> ForestParams:
    return ForestParams(args.trees, args.max_depth, args.min_samples_split, args.min_samples_leaf)


def _stamp(obj: dict, args) -> dict:
    obj = dict(obj)
    obj.setdefault("schema_version", SCHEMA_VERSION)
    obj["seed"] = args.seed
    return obj


# --------------------------------------------------------------------------
# subcommands; each returns ({relpath: bytes}, [input paths], stdout text)
# --------------------------------------------------------------------------

def cmd_synth(args):
    spec = load_spec(args.spec)
    spec.check()
    cfg = GeneratorConfig(seed=args.seed)
    ds = generate(spec, cfg)
    mismatches = verify_marginals(ds, spec)
    csv_bytes = dumps_csv(ds.records).encode()
    meta = _stamp(generator_metadata(spec, cfg), args)
    meta["mismatches"] = [str(m) for m in mismatches]
    meta["n_records"] = len(ds)
    files = {"corpus.csv": csv_bytes, "synth_metadata.json": _dump(meta)}
    inputs = [args.spec] if args.spec else []
    return files, inputs, f"wrote {len(ds)} records\n"


def cmd_describe(args):
    ds = _load(args)
    files = {}
    objs = []
    for dim in args.dim:
        t = count_by(ds, dim, width=args.width)
        obj = _stamp(t.to_json_obj(), args)
        objs.append(obj)
        files[f"describe_{dim}.json"] = _dump(obj)
        files[f"describe_{dim}.csv"] = t.to_csv().encode()
        if args.svg:
            files[f"describe_{dim}.svg"] = render_svg_bar(t).encode()
    text = json.dumps(objs[0] if len(objs) == 1 else objs, indent=2, sort_keys=True) + "\n"
    return files, [args.input], text


def cmd_chisq(args):
    ds = _load(args)
    if args.gof:
        results = [chi_square_gof(count_by(ds, args.gof), alpha=args.alpha, name=f"{args.gof} (uniform)")]
    elif args.cross:
        a, b = args.cross
        table = ContingencyTable.from_pairs(record_labels(ds, a), record_labels(ds, b),
                                            row_labels=dimension_bins(ds, a), col_labels=dimension_bins(ds, b))
        results = [chi_square_independence(table, alpha=args.alpha, name=f"{a} x {b}")]
    else:
        results = test_battery(ds, args.alpha)
    obj = _stamp({"tests": [r.to_json_obj() for r in results]}, args)
    files = {"chisq.json": _dump(obj), "chisq.md": battery_markdown(results).encode()}
    return files, [args.input], battery_markdown(results)


def cmd_hotspots(args):
    ds = _load(args)
    landmarks = load_landmarks(args.landmarks)
    spots = hotspot_table(ds, args.window, args.top, landmarks)
    profile = corridor_kde(ds, args.bandwidth)
    clusters = dbscan_1d(ds.column("milepost"), args.eps, args.min_pts)
    obj = _stamp({
        "hotspots": [s.to_json_obj() for s in spots],
        "kde": {"bandwidth": profile.bandwidth, "argmax": profile.argmax, "mass": profile.mass()},
        "dbscan": {"eps": args.eps, "min_pts": args.min_pts, "labels": list(clusters.labels),
                   "n_clusters": clusters.n_clusters, "n_noise": clusters.n_noise},
    }, args)
    md = hotspot_markdown(spots)
    files = {
        "hotspots.json": _dump(obj),
        "hotspots.md": md.encode(),
        "density.csv": profile.to_csv().encode(),
        "density.svg": density_svg(profile, spots, ds.corridor_length).encode(),
    }
    return files, [args.input], md


def cmd_moran(args):
    ds = _load(args)
    grid = build_segment_grid(ds, args.segment)
    res = morans_i(grid)
    obj = _stamp(res.to_json_obj(), args)
    obj["mean_count"] = grid.mean
    obj["segment_length"] = args.segment
    if args.permutations > 0:
        obj["permutation_p"] = morans_i_permutation(grid, args.permutations,
                                                    substream_seed(args.seed, "moran"), args.jobs)
        obj["n_permutations"] = args.permutations
    files = {"moran.json": _dump(obj), "segments.csv": grid.to_csv().encode()}
    return files, [args.input], json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_nbreg(args):
    ds = _load(args)
    nb = run_nb(ds)
    md = irr_markdown(irr_table(nb.fit), nb.fit.n)
    obj = _stamp({"vmr": nb.vmr, "fit": nb.fit.to_json_obj(), "imputation": nb.imputation.to_dict()}, args)
    return {"nbreg.json": _dump(obj), "nbreg.md": md.encode()}, [args.input], md


def cmd_rf(args):
    ds = _load(args)
    params = _forest_params(args)
    extra = {}
    if args.tune:
        train, _ = stratified_split(build_features(ds), args.test_fraction, substream_seed(args.seed, "split"))
        params, scores = tune(train, seed=substream_seed(args.seed, "tune"), n_trees=args.trees, n_jobs=args.jobs)
        extra["tuning"] = [{"params": p, "cv_accuracy": s} for p, s in scores]
    rf = run_forest(ds, args.seed, params, args.test_fraction, args.jobs)
    obj = _stamp({"metrics": rf.report.to_json_obj(), "importance": rf.importance,
                  "n_train": rf.n_train, "n_test": rf.n_test,
                  "params": {"n_trees": params.n_trees, "max_depth": params.max_depth,
                             "min_samples_split": params.min_samples_split,
                             "min_samples_leaf": params.min_samples_leaf,
                             "features_per_split": rf.model.max_features},
                  **extra}, args)
    md = rf.report.metrics_markdown() + "\n" + rf.report.confusion_markdown()
    files = {
        "rf.json": _dump(obj),
        "rf_model.json": (rf.model.to_json() + "\n").encode(),
        "rf.md": md.encode(),
        "importance.svg": importance_svg(rf.importance).encode(),
    }
    return files, [args.input], md


def cmd_hsm(args):
    corridor = load_corridor(args.corridor)
    inputs = [args.corridor] if args.corridor else []
    by_year = None
    if args.input:
        ds = _load(args, args.input)
        observed = len(ds)
        years = count_by(ds, "year").counts
        by_year = years if len(years) == corridor.study_years else None
        inputs.append(args.input)
    else:
        observed = args.observed
    pred = predict_corridor(corridor, observed, expected_override=args.expected,
                            observed_by_year=by_year, alpha=args.alpha)
    md = pred.to_markdown()
    return {"hsm.json": _dump(_stamp(pred.to_json_obj(), args)), "hsm.md": md.encode()}, inputs, md


def cmd_report(args):
    ds = _load(args)
    opts = ReportOptions(
        seed=args.seed, alpha=args.alpha, n_permutations=args.permutations, segment_length=args.segment,
        window=args.window, test_fraction=args.test_fraction, forest=_forest_params(args), n_jobs=args.jobs,
        corridor=load_corridor(args.corridor) if args.corridor else None, hsm_expected=args.hsm_expected,
        landmarks=load_landmarks(args.landmarks) if args.landmarks else None,
    )
    inputs = [args.input] + [p for p in (args.corridor, args.landmarks) if p]
    files = build_report(ds, opts, source=_input_entry(args.input))
    return files, inputs, "".join(f"{k}\n" for k in files)


COMMANDS = {
    "synth": cmd_synth, "describe": cmd_describe, "chisq": cmd_chisq, "hotspots": cmd_hotspots,
    "moran": cmd_moran, "nbreg": cmd_nbreg, "rf": cmd_rf, "hsm": cmd_hsm, "report": cmd_report,
}


def _manifest_argv(argv: Sequence[str]) -> list[str]:
    """argv without the output directory, so a manifest replays into any directory."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("-o", "--out"):
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def write_outputs(out_dir: Path, files: dict[str, bytes], args, argv: Sequence[str], inputs: list[str]) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    for rel, data in files.items():
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "argv": _manifest_argv(argv),
        "seed": args.seed,
        "inputs": [_input_entry(p) for p in inputs],
        "versions": {
            "crashlab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__,
        },
        "outputs": {rel: _sha256(data) for rel, data in sorted(files.items())},
    }
    (out_dir / "manifest.json").write_bytes(_dump(manifest))
    return manifest


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage to stderr
        return int(exc.code or 0)
    try:
        files, inputs, text = COMMANDS[args.command](args)
        write_outputs(resolve_out(args), files, args, argv, inputs)
    except (CrashLabError, OSError, ValueError) as exc:
        print(f"crashlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
