"""End-to-end analysis pipeline producing report.md, SVG figures, CSV tables and results.json."""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .descriptive import CountTable, count_by
from .errors import CrashLabError
from .figures import ChartStyle, density_svg, importance_svg, render_svg_bar
from .forest import (ClassificationReport, ForestModel, ForestParams, build_features, classification_report,
                     feature_importance, predict, stratified_split, train_forest)
from .glm import FitResult, build_design, fit_negative_binomial, irr_markdown, irr_table, overdispersion_ratio
from .hsm import CorridorSpec, load_corridor, predict_corridor
from .inferential import (SCHEMA_VERSION, ContingencyTable, TestResult, chi_square_gof,
                          chi_square_independence, format_p)
from .ingest import CrashDataset, ImputationReport, impute_damage
from .spatial import (build_segment_grid, corridor_kde, dbscan_1d, hotspot_markdown, hotspot_table,
                      load_landmarks, morans_i, morans_i_permutation)

TIME_BINS = ((0, 6), (6, 9), (9, 12), (12, 15), (15, 18), (18, 21), (21, 24))


def substream_seed(seed: int, name: str) -> int:
    """Derive a named child seed so one ``--seed`` drives every random step."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def time_of_day_label(hour: int) -> str:
    for lo, hi in TIME_BINS:
        if lo <= hour < hi:
            return f"{lo:02d}-{hi:02d}"
    raise ValueError(f"hour out of range: {hour}")


def test_battery(ds: CrashDataset, alpha: float = 0.05) -> list[TestResult]:
    """The temporal/environmental chi-square battery, one result per row."""
    out = []
    wd = count_by(ds, "weekday")
    out.append(chi_square_gof(wd, alpha=alpha, name="Day of week (uniform)"))
    weekend = wd["Saturday"] + wd["Sunday"]
    out.append(chi_square_gof([wd.total - weekend, weekend], [5, 2], alpha=alpha,
                              labels=["Weekday", "Weekend"], name="Weekday vs weekend"))
    out.append(chi_square_gof(count_by(ds, "light"), alpha=alpha, name="Light condition (uniform)"))
    out.append(chi_square_gof(count_by(ds, "road_surface"), alpha=alpha, name="Road surface (uniform)"))
    out.append(chi_square_gof(count_by(ds, "weather"), alpha=alpha, name="Weather (uniform)"))
    types = [r.accident_type.value for r in ds]
    dry = ["Dry" if r.road_surface.value == "Dry" else "Not dry" for r in ds]
    out.append(chi_square_independence(ContingencyTable.from_pairs(types, dry), alpha=alpha,
                                       name="Accident type x surface (dry / not dry)"))
    sev = ["Injury" if r.injured else "No injury" for r in ds]
    tod = [time_of_day_label(r.hour) for r in ds]
    tod_labels = [f"{lo:02d}-{hi:02d}" for lo, hi in TIME_BINS]
    tod_test = chi_square_independence(
        ContingencyTable.from_pairs(tod, sev, row_labels=tod_labels, col_labels=["No injury", "Injury"]),
        alpha=alpha, name="Severity x time of day")
    note = "time of day binned as " + ", ".join(tod_labels) + " (assumed binning)"
    out.append(dataclasses.replace(tod_test, notes=tod_test.notes + (note,)))
    return out


def battery_markdown(results: list[TestResult]) -> str:
    lines = ["| Test | Chi-square | df | p | Reject at alpha |", "|---|---|---|---|---|"]
    for t in results:
        lines.append(f"| {t.name} | {t.statistic:.2f} | {t.df} | {format_p(t.p_value)} | "
                     f"{'yes' if t.reject_null else 'no'} |")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class NbOutcome:
    fit: FitResult
    imputation: ImputationReport
    vmr: float


def run_nb(ds: CrashDataset) -> NbOutcome:
    imputed, rep = impute_damage(ds)
    design = build_design(imputed)
    return NbOutcome(fit_negative_binomial(design), rep, overdispersion_ratio(design.y))


@dataclass(frozen=True)
class ForestOutcome:
    model: ForestModel
    report: ClassificationReport
    importance: dict[str, float]
    n_train: int
    n_test: int


def run_forest(ds: CrashDataset, seed: int, params: ForestParams | None = None,
               test_fraction: float = 0.2, n_jobs: int = 1) -> ForestOutcome:
    feats = build_features(ds)
    train, test = stratified_split(feats, test_fraction, substream_seed(seed, "split"))
    model = train_forest(train, params, substream_seed(seed, "forest"), n_jobs)
    labels, _ = predict(model, test)
    return ForestOutcome(model, classification_report(labels, test.y), feature_importance(model),
                         len(train), len(test))


@dataclass(frozen=True)
class ReportOptions:
    seed: int = 42
    alpha: float = 0.05
    n_permutations: int = 999
    segment_length: float = 0.1
    window: float = 0.5
    test_fraction: float = 0.2
    forest: ForestParams = field(default_factory=ForestParams)
    n_jobs: int = 1
    corridor: CorridorSpec | None = None
    hsm_expected: float | None = None
    landmarks: dict | None = None


_CHARTS = (
    ("hour", "Crashes by hour of day", "Hour"),
    ("accident_type", "Crashes by accident type", "Accident type"),
    ("month", "Crashes by month", "Month"),
    ("milepost_bin", "Crashes by milepost (0.5 mi bins)", "Milepost (mi)"),
)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def build_report(ds: CrashDataset, opts: ReportOptions | None = None,
                 source: dict | None = None) -> dict[str, bytes]:
    """Run every analysis; return ``{relative path: content}`` in a stable order."""
    o = opts or ReportOptions()
    files: dict[str, bytes] = {}
    results: dict = {"schema_version": SCHEMA_VERSION, "seed": o.seed, "crashlab_version": __version__,
                     "n_records": len(ds), "source": source or {}}
    md: list[str] = [
        "# Corridor crash analysis report",
        "",
        f"Records: {len(ds)}; corridor length {ds.corridor_length:g} mi; "
        f"study period {ds.study_years[0]}-{ds.study_years[1]}; seed {o.seed}.",
        "",
    ]

    # descriptive
    md += ["## Temporal and categorical distributions", ""]
    years = count_by(ds, "year")
    md += ["| Year | Crashes |", "|---|---|"]
    md += [f"| {b} | {c} |" for b, c in zip(years.bins, years.counts)]
    md += [f"| Total | {years.total} |", ""]
    tables: dict[str, CountTable] = {"year": years}
    for dim, title, xlab in _CHARTS:
        t = count_by(ds, dim, width=o.window)
        tables[dim] = t
        files[f"figures/{dim}.svg"] = render_svg_bar(t, ChartStyle(title=title, x_label=xlab)).encode()
        md += [f"![{title}](figures/{dim}.svg)", ""]
    for dim in ("weekday", "light", "weather", "road_surface"):
        tables[dim] = count_by(ds, dim)
    for dim, t in tables.items():
        files[f"tables/{dim}.csv"] = t.to_csv().encode()
    results["counts"] = {dim: t.as_dict() for dim, t in tables.items()}

    # spatial
    md += ["## Spatial hotspots", ""]
    landmarks = o.landmarks if o.landmarks is not None else load_landmarks()
    spots = hotspot_table(ds, o.window, 5, landmarks)
    md += [hotspot_markdown(spots)]
    profile = corridor_kde(ds)
    files["figures/density.svg"] = density_svg(profile, spots, ds.corridor_length).encode()
    files["tables/density.csv"] = profile.to_csv().encode()
    md += [f"Kernel density bandwidth (Silverman): {profile.bandwidth:.3f} mi; "
           f"density peak at milepost {profile.argmax:.2f}.", "",
           "![Kernel density](figures/density.svg)", ""]
    clusters = dbscan_1d(ds.column("milepost"))
    sizes = clusters.sizes()
    md += [f"DBSCAN (eps 0.5 mi, minPts 3): {clusters.n_clusters} clusters, "
           f"{clusters.n_noise} noise points; sizes {', '.join(str(sizes[k]) for k in sorted(sizes))}.", ""]
    grid = build_segment_grid(ds, o.segment_length)
    files["tables/segments.csv"] = grid.to_csv().encode()
    moran = morans_i(grid)
    perm_p = morans_i_permutation(grid, o.n_permutations, substream_seed(o.seed, "moran"), o.n_jobs)
    md += [
        "| Moran's I | E[I] | z | p (analytic) | p (permutation) | Segments | W |",
        "|---|---|---|---|---|---|---|",
        f"| {moran.I:.3f} | {moran.expected:.4f} | {moran.z:.2f} | {format_p(moran.p_value)} | "
        f"{perm_p:.4f} ({o.n_permutations} perms) | {moran.n} | {moran.W:g} |",
        "",
    ]
    results["hotspots"] = [s.to_json_obj() for s in spots]
    results["kde"] = {"bandwidth": profile.bandwidth, "argmax": profile.argmax, "mass": profile.mass()}
    results["dbscan"] = {"n_clusters": clusters.n_clusters, "n_noise": clusters.n_noise,
                         "sizes": {str(k): v for k, v in sorted(sizes.items())}}
    mj = moran.to_json_obj()
    mj.update(permutation_p=perm_p, n_permutations=o.n_permutations, mean_count=grid.mean)
    results["moran"] = mj

    # tests
    md += ["## Chi-square test battery", ""]
    battery = test_battery(ds, o.alpha)
    md += [battery_markdown(battery)]
    results["tests"] = [t.to_json_obj() for t in battery]

    # NB regression
    md += ["## Property damage: negative binomial regression", ""]
    try:
        nb = run_nb(ds)
        rows = irr_table(nb.fit)
        md += [f"Damage variance-to-mean ratio (thousands of USD, n-1 variance): {nb.vmr:.2f}. "
               f"Imputed damage values: {len(nb.imputation.imputed_ids)}. "
               f"Dispersion alpha = {nb.fit.alpha:.3f}.", "", irr_markdown(rows, nb.fit.n)]
        results["nb"] = {"vmr": nb.vmr, "fit": nb.fit.to_json_obj(), "imputation": nb.imputation.to_dict()}
    except CrashLabError as exc:
        md += [f"Skipped: {exc}", ""]
        results["nb"] = {"error": str(exc)}

    # forest
    md += ["## Injury classification: random forest", ""]
    try:
        rf = run_forest(ds, o.seed, o.forest, o.test_fraction, o.n_jobs)
        md += [f"{rf.model.n_trees} trees, max depth {o.forest.max_depth}, balanced class weights; "
               f"{rf.n_train} training / {rf.n_test} test rows.", "",
               rf.report.metrics_markdown(), rf.report.confusion_markdown()]
        files["figures/importance.svg"] = importance_svg(rf.importance).encode()
        top = sorted(rf.importance.items(), key=lambda kv: (-kv[1], kv[0]))[:5]
        md += ["| Feature | Importance |", "|---|---|"] + [f"| {k} | {v:.3f} |" for k, v in top]
        md += ["", "![Feature importance](figures/importance.svg)", ""]
        results["forest"] = {"metrics": rf.report.to_json_obj(), "importance": rf.importance,
                             "n_train": rf.n_train, "n_test": rf.n_test}
    except CrashLabError as exc:
        md += [f"Skipped: {exc}", ""]
        results["forest"] = {"error": str(exc)}

    # HSM
    md += ["## HSM predicted vs observed", ""]
    corridor = o.corridor or load_corridor()
    obs_years = years.counts if len(years.counts) == corridor.study_years else None
    hsm = predict_corridor(corridor, len(ds), expected_override=o.hsm_expected,
                           observed_by_year=obs_years, alpha=o.alpha)
    md += [hsm.to_markdown()]
    results["hsm"] = hsm.to_json_obj()

    files["report.md"] = ("\n".join(md).rstrip() + "\n").encode()
    files["results.json"] = _json_bytes(results)
    return files

