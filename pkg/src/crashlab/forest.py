"""Random-forest classifier for injury occurrence, written against numpy only.

Trees are grown on bootstrap resamples with class-weighted Gini impurity;
class weights are "balanced" per bootstrap sample (``n / (2 * n_c)``).
Tree ``i`` draws all of its randomness from ``SeedSequence([seed, i])`` so
a forest is identical whatever the number of worker threads.
"""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import LengthMismatch, NoSplits, SchemaMismatch, SingleClass
from .ingest import CrashDataset, Light, RoadSurface, Weather

MODEL_VERSION = 1
_SEASONS = ("Winter", "Spring", "Summer", "Fall")


def season_of(month: int) -> str:
    return _SEASONS[(month % 12) // 3]


@dataclass(frozen=True)
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    features: tuple[str, ...]
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=int)
        if X.ndim != 2 or X.shape[0] != y.size or X.shape[1] != len(self.features):
            raise ValueError("X, y and feature names disagree in shape")
        if not np.all(np.isfinite(X)):
            raise ValueError("feature matrix has missing cells; impute first")
        if not np.all(np.isin(y, (0, 1))):
            raise ValueError("labels must be 0/1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return int(self.y.size)

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=int)
        ids = tuple(self.ids[i] for i in rows) if self.ids else ()
        return FeatureMatrix(self.X[rows], self.y[rows], self.features, ids)


def build_features(ds: CrashDataset) -> FeatureMatrix:
    """Per-accident features; missing speed takes the global median."""
    recs = ds.records
    speeds = [r.speed_max for r in recs if r.speed_max is not None]
    fill = float(np.median(speeds)) if speeds else 0.0
    names = ["milepost", "time_min", "weekday", "speed_max", "num_vehicles"]
    cols = [
        [r.milepost for r in recs],
        [r.time for r in recs],
        [r.date.weekday() for r in recs],
        [r.speed_max if r.speed_max is not None else fill for r in recs],
        [r.num_vehicles for r in recs],
    ]
    for prefix, enum_cls, attr in (("surface", RoadSurface, "road_surface"),
                                   ("light", Light, "light"),
                                   ("weather", Weather, "weather")):
        for member in enum_cls:
            names.append(f"{prefix}_{member.value}")
            cols.append([getattr(r, attr) is member for r in recs])
    for s in _SEASONS:
        names.append(f"season_{s}")
        cols.append([season_of(r.date.month) == s for r in recs])
    X = np.array(cols, dtype=float).T
    y = np.array([1 if r.injured else 0 for r in recs])
    return FeatureMatrix(X, y, tuple(names), tuple(r.crash_id for r in recs))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(
    features: FeatureMatrix, test_fraction: float = 0.2, seed: int = 0
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Per-class test counts are ``round(n_c * test_fraction)`` (half up)."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    classes = np.unique(features.y)
    if classes.size < 2:
        raise SingleClass("both classes are needed for a stratified split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5117]))
    test_rows = []
    for c in (0, 1):
        rows = np.flatnonzero(features.y == c)
        k = _round_half_up(rows.size * test_fraction)
        test_rows.extend(rng.permutation(rows)[:k].tolist())
    test_rows = np.sort(np.array(test_rows, dtype=int))
    train_rows = np.setdiff1d(np.arange(len(features)), test_rows)
    return features.take(train_rows), features.take(test_rows)


# --------------------------------------------------------------------------
# trees
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = 10
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: int | None = None  # None -> floor(sqrt(p))


@dataclass
class Tree:
    feature: list[int] = field(default_factory=list)  # -1 marks a leaf
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[list[float]] = field(default_factory=list)  # class-weight sums (w0, w1)
    decrease: list[float] = field(default_factory=list)  # weighted impurity decrease of the split

    def _add(self, value) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append([float(value[0]), float(value[1])])
        self.decrease.append(0.0)
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        active = feat[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, feat[n]] <= thr[n]
            node[rows] = np.where(go_left, left[n], right[n])
            active = feat[node] >= 0
        return node

    def class1_fraction(self, X: np.ndarray) -> np.ndarray:
        v = np.asarray(self.value)[self.apply(X)]
        tot = v.sum(axis=1)
        return np.divide(v[:, 1], tot, out=np.full(tot.shape, 0.5), where=tot > 0)

    def importances(self, n_features: int) -> np.ndarray:
        imp = np.zeros(n_features)
        for f, d in zip(self.feature, self.decrease):
            if f >= 0:
                imp[f] += d
        return imp

    def to_dict(self) -> dict:
        return asdict(self)


def _gini(w0, w1):
    tot = w0 + w1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, 1.0 - (w0 * w0 + w1 * w1) / (tot * tot), 0.0)


def _best_split(xcol, y, w, min_leaf):
    """Best threshold on one feature: ``(decrease, threshold)`` or ``None``."""
    order = np.argsort(xcol, kind="stable")
    xs = xcol[order]
    if xs[0] == xs[-1]:
        return None
    w0 = np.where(y[order] == 0, w[order], 0.0)
    w1 = np.where(y[order] == 1, w[order], 0.0)
    c0 = np.cumsum(w0)[:-1]
    c1 = np.cumsum(w1)[:-1]
    t0, t1 = w0.sum(), w1.sum()
    n = xs.size
    n_left = np.arange(1, n)
    valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    wl = c0 + c1
    wr = (t0 + t1) - wl
    parent = (t0 + t1) * _gini(np.array(t0), np.array(t1))
    dec = parent - wl * _gini(c0, c1) - wr * _gini(t0 - c0, t1 - c1)
    dec = np.where(valid, dec, -np.inf)
    i = int(np.argmax(dec))
    return float(dec[i]), float((xs[i] + xs[i + 1]) / 2.0)


def grow_tree(X, y, w, params: ForestParams, max_features: int, rng: np.random.Generator) -> Tree:
    tree = Tree()
    p = X.shape[1]
    max_depth = params.max_depth if params.max_depth is not None else np.inf

    def build(rows, depth) -> int:
        yy, ww = y[rows], w[rows]
        value = (float(ww[yy == 0].sum()), float(ww[yy == 1].sum()))
        node = tree._add(value)
        if (depth >= max_depth or rows.size < params.min_samples_split
                or value[0] == 0.0 or value[1] == 0.0):
            return node
        best = None
        visited = 0
        for f in rng.permutation(p):
            if visited >= max_features and best is not None:
                break
            found = _best_split(X[rows, f], yy, ww, params.min_samples_leaf)
            if found is None:
                continue
            visited += 1
            if best is None or found[0] > best[0]:
                best = (found[0], found[1], int(f))
        if best is None:
            return node
        dec, thr, f = best
        mask = X[rows, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.decrease[node] = max(dec, 0.0)
        tree.left[node] = build(rows[mask], depth + 1)
        tree.right[node] = build(rows[~mask], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return tree


def balanced_weights(y: np.ndarray) -> np.ndarray:
    """Per-sample weight ``n / (2 * n_c)``; an absent class gets no weight."""
    n = y.size
    counts = np.bincount(y, minlength=2).astype(float)
    cw = np.divide(n, 2.0 * counts, out=np.zeros(2), where=counts > 0)
    return cw[y]


def _fit_one(X, y, params: ForestParams, max_features: int, seed: int, index: int) -> tuple[Tree, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    boot = rng.integers(0, y.size, size=y.size)
    Xb, yb = X[boot], y[boot]
    return grow_tree(Xb, yb, balanced_weights(yb), params, max_features, rng), boot


@dataclass
class ForestModel:
    trees: list[Tree]
    features: tuple[str, ...]
    params: ForestParams
    max_features: int
    seed: int
    class_weight: str = "balanced"
    bootstrap_unique_fraction: float = float("nan")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def to_json_obj(self) -> dict:
        return {
            "model_version": MODEL_VERSION,
            "seed": self.seed,
            "features": list(self.features),
            "params": asdict(self.params),
            "max_features": self.max_features,
            "class_weight": self.class_weight,
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        d = json.loads(text)
        if d.get("model_version") != MODEL_VERSION:
            raise SchemaMismatch(f"unsupported model version {d.get('model_version')}")
        trees = [Tree(**t) for t in d["trees"]]
        return cls(trees, tuple(d["features"]), ForestParams(**d["params"]),
                   d["max_features"], d["seed"], d["class_weight"])


def train_forest(
    train: FeatureMatrix, params: ForestParams | None = None, seed: int = 0, n_jobs: int = 1
) -> ForestModel:
    params = params or ForestParams()
    if len(train) == 0:
        raise ValueError("empty training set")
    if np.unique(train.y).size < 2:
        raise SingleClass("training labels contain a single class")
    p = train.X.shape[1]
    max_features = params.max_features or max(1, int(math.isqrt(p)))
    fit = lambda i: _fit_one(train.X, train.y, params, max_features, seed, i)  # noqa: E731
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(fit, range(params.n_trees)))
    else:
        results = [fit(i) for i in range(params.n_trees)]
    uniq = float(np.mean([np.unique(b).size / b.size for _, b in results]))
    return ForestModel([t for t, _ in results], train.features, params, max_features, seed,
                       bootstrap_unique_fraction=uniq)


def predict_scores(model: ForestModel, rows: FeatureMatrix) -> np.ndarray:
    if tuple(rows.features) != tuple(model.features):
        raise SchemaMismatch("feature columns differ from the training schema")
    return np.mean([t.class1_fraction(rows.X) for t in model.trees], axis=0)


def predict(model: ForestModel, rows: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Labels and class-1 scores; a score of exactly 0.5 is called an injury."""
    scores = predict_scores(model, rows)
    return (scores >= 0.5).astype(int), scores


def feature_importance(model: ForestModel) -> dict[str, float]:
    """Mean decrease in impurity, normalised per tree, averaged, renormalised."""
    p = len(model.features)
    per_tree = []
    for t in model.trees:
        imp = t.importances(p)
        s = imp.sum()
        if s > 0:
            per_tree.append(imp / s)
    if not per_tree:
        raise NoSplits("no tree in the forest has a split")
    avg = np.sum(per_tree, axis=0) / len(model.trees)
    avg = avg / avg.sum()
    return {name: float(v) for name, v in zip(model.features, avg)}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassificationReport:
    tn: int
    fp: int
    fn: int
    tp: int
    zero_division: tuple[str, ...] = ()

    @classmethod
    def from_confusion(cls, tn: int, fp: int, fn: int, tp: int) -> "ClassificationReport":
        flags = []
        if tp + fp == 0:
            flags.append("precision_1")
        if tp + fn == 0:
            flags.append("recall_1")
        if tn + fn == 0:
            flags.append("precision_0")
        if tn + fp == 0:
            flags.append("recall_0")
        return cls(tn, fp, fn, tp, tuple(flags))

    @property
    def n(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def accuracy(self) -> float:
        return (self.tn + self.tp) / self.n

    @staticmethod
    def _ratio(a: int, b: int) -> float:
        return a / b if b else 0.0

    def precision(self, cls: int = 1) -> float:
        return self._ratio(self.tp, self.tp + self.fp) if cls == 1 else self._ratio(self.tn, self.tn + self.fn)

    def recall(self, cls: int = 1) -> float:
        return self._ratio(self.tp, self.tp + self.fn) if cls == 1 else self._ratio(self.tn, self.tn + self.fp)

    def f1(self, cls: int = 1) -> float:
        p, r = self.precision(cls), self.recall(cls)
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def macro(self) -> dict[str, float]:
        return {
            "precision": (self.precision(0) + self.precision(1)) / 2,
            "recall": (self.recall(0) + self.recall(1)) / 2,
            "f1": (self.f1(0) + self.f1(1)) / 2,
        }

    def to_json_obj(self) -> dict:
        return {
            "confusion": {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp},
            "accuracy": self.accuracy,
            "class_0": {"precision": self.precision(0), "recall": self.recall(0), "f1": self.f1(0)},
            "class_1": {
                "precision": self.precision(1), "recall": self.recall(1), "f1": self.f1(1),
                "precision_fraction": f"{self.tp}/{self.tp + self.fp}",
                "recall_fraction": f"{self.tp}/{self.tp + self.fn}",
            },
            "macro": self.macro,
            "zero_division": list(self.zero_division),
        }

    def metrics_markdown(self) -> str:
        acc = self.accuracy
        m = self.macro
        rows = [
            "| Class | Accuracy | Precision | Recall | F1-Score |",
            "|---|---|---|---|---|",
            f"| No Injury (0) | {acc:.2f} | {self.precision(0):.2f} | {self.recall(0):.2f} | {self.f1(0):.2f} |",
            f"| Injury (1+) | {acc:.2f} | {self.precision(1):.2f} | {self.recall(1):.2f} | {self.f1(1):.2f} |",
            f"| Overall | {acc:.2f} | {m['precision']:.2f} | {m['recall']:.2f} | {m['f1']:.2f} |",
        ]
        return "\n".join(rows) + "\n"

    def confusion_markdown(self) -> str:
        return "\n".join([
            "| Actual \\ Predicted | No Injury | Injury |",
            "|---|---|---|",
            f"| No Injury (0) | {self.tn} | {self.fp} |",
            f"| Injury (1) | {self.fn} | {self.tp} |",
            "",
            f"Accuracy: {100 * self.accuracy:.1f}% ({self.tn + self.tp}/{self.n})  ",
            f"Precision: {100 * self.precision(1):.1f}% ({self.tp}/{self.tp + self.fp})  ",
            f"Recall: {100 * self.recall(1):.1f}% ({self.tp}/{self.tp + self.fn})",
        ]) + "\n"


def classification_report(predicted: Sequence[int], actual: Sequence[int]) -> ClassificationReport:
    pred = np.asarray(predicted, dtype=int)
    act = np.asarray(actual, dtype=int)
    if pred.size != act.size:
        raise LengthMismatch("predicted and actual differ in length")
    if pred.size == 0:
        raise LengthMismatch("no labels")
    tn = int(np.sum((pred == 0) & (act == 0)))
    fp = int(np.sum((pred == 1) & (act == 0)))
    fn = int(np.sum((pred == 0) & (act == 1)))
    tp = int(np.sum((pred == 1) & (act == 1)))
    return ClassificationReport.from_confusion(tn, fp, fn, tp)


# --------------------------------------------------------------------------
# optional grid search
# --------------------------------------------------------------------------

DEFAULT_GRID = {
    "max_depth": (5, 10, 15),
    "min_samples_split": (2, 5, 10),
    "min_samples_leaf": (1, 3, 5),
}


def stratified_folds(y: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    folds = [[] for _ in range(k)]
    for c in (0, 1):
        rows = rng.permutation(np.flatnonzero(y == c))
        for i, r in enumerate(rows):
            folds[i % k].append(int(r))
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def tune(
    train: FeatureMatrix,
    grid: dict | None = None,
    folds: int = 5,
    seed: int = 0,
    n_trees: int = 100,
    n_jobs: int = 1,
) -> tuple[ForestParams, list[tuple[dict, float]]]:
    """Grid search by stratified k-fold mean accuracy; returns best params and all scores."""
    grid = grid or DEFAULT_GRID
    keys = sorted(grid)
    parts = stratified_folds(train.y, folds, seed)
    results = []
    best = None
    for combo in itertools.product(*(grid[k] for k in keys)):
        cfg = dict(zip(keys, combo))
        params = ForestParams(n_trees=n_trees, **cfg)
        accs = []
        for i, test_rows in enumerate(parts):
            train_rows = np.setdiff1d(np.arange(len(train)), test_rows)
            model = train_forest(train.take(train_rows), params, seed + i, n_jobs)
            labels, _ = predict(model, train.take(test_rows))
            accs.append(float(np.mean(labels == train.y[test_rows])))
        score = float(np.mean(accs))
        results.append((cfg, score))
        if best is None or score > best[1]:
            best = (params, score)
    return best[0], results
