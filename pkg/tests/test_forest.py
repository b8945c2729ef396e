import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crashlab.errors import LengthMismatch, NoSplits, SchemaMismatch, SingleClass
from crashlab.forest import (
    ClassificationReport, FeatureMatrix, ForestModel, ForestParams, _best_split, balanced_weights, build_features,
    classification_report, feature_importance, grow_tree, predict, predict_scores, season_of, stratified_split,
    train_forest, tune,
)


def _separable(n=20):
    x = np.linspace(-1, 1, n)
    x = x[x != 0]
    return FeatureMatrix(x[:, None], (x > 0).astype(int), ("x",))


def brute_best_split(x, y, w, min_leaf):
    """Enumerate every midpoint and score the weighted Gini decrease directly."""
    def impurity(mask):
        tot = w[mask].sum()
        if tot == 0:
            return 0.0
        p1 = w[mask & (y == 1)].sum() / tot
        return tot * (1 - p1 ** 2 - (1 - p1) ** 2)

    everything = np.ones(x.size, bool)
    parent = impurity(everything)
    best = None
    vals = np.unique(x)
    for a, b in zip(vals[:-1], vals[1:]):
        thr = (a + b) / 2
        left = x <= thr
        if left.sum() < min_leaf or (~left).sum() < min_leaf:
            continue
        dec = parent - impurity(left) - impurity(~left)
        if best is None or dec > best[0] + 1e-12:
            best = (dec, thr)
    return best


class TestSplitSearch:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 1), st.integers(1, 4)), min_size=2, max_size=30),
           st.integers(1, 4))
    def test_matches_brute_force(self, rows, min_leaf):
        x = np.array([r[0] for r in rows], float)
        y = np.array([r[1] for r in rows])
        w = np.array([r[2] for r in rows], float)
        fast = _best_split(x, y, w, min_leaf)
        slow = brute_best_split(x, y, w, min_leaf)
        if slow is None:
            assert fast is None
        else:
            assert fast[0] == pytest.approx(slow[0], abs=1e-9)
            # a different threshold is acceptable only when it ties on the decrease
            left = x <= fast[1]
            assert left.sum() >= min_leaf and (~left).sum() >= min_leaf


class TestSplit:
    def test_corpus_split_counts(self, corpus):
        fm = build_features(corpus)
        train, test = stratified_split(fm, 0.2, seed=1)
        assert len(test) == 33 and len(train) == 130
        for c in (0, 1):
            n_c = int(np.sum(fm.y == c))
            assert int(np.sum(test.y == c)) == int(np.floor(n_c * 0.2 + 0.5))

    def test_small(self):
        fm = FeatureMatrix(np.arange(10.0)[:, None], [0] * 5 + [1] * 5, ("x",))
        _, test = stratified_split(fm, 0.2, seed=0)
        assert sorted(test.y.tolist()) == [0, 1]

    def test_seed_contract(self, corpus):
        fm = build_features(corpus)
        a = stratified_split(fm, 0.2, 3)[1]
        b = stratified_split(fm, 0.2, 3)[1]
        c = stratified_split(fm, 0.2, 4)[1]
        assert a.ids == b.ids and a.ids != c.ids
        assert np.bincount(a.y).tolist() == np.bincount(c.y).tolist()

    def test_disjoint_cover(self, corpus):
        fm = build_features(corpus)
        train, test = stratified_split(fm, 0.2, 0)
        assert set(train.ids).isdisjoint(test.ids) and len(set(train.ids) | set(test.ids)) == 163

    def test_single_class(self):
        with pytest.raises(SingleClass):
            stratified_split(FeatureMatrix(np.zeros((4, 1)), [1, 1, 1, 1], ("x",)))
        with pytest.raises(ValueError):
            stratified_split(_separable(), 1.0)


class TestFeatures:
    def test_columns(self, corpus):
        fm = build_features(corpus)
        assert fm.features[:5] == ("milepost", "time_min", "weekday", "speed_max", "num_vehicles")
        assert len(fm) == 163 and np.all(np.isfinite(fm.X))
        assert fm.y.sum() == sum(r.injured for r in corpus)
        seasons = fm.X[:, [fm.features.index(f"season_{s}") for s in ("Winter", "Spring", "Summer", "Fall")]]
        assert np.all(seasons.sum(axis=1) == 1)

    def test_season(self):
        assert [season_of(m) for m in (12, 1, 3, 6, 9, 11)] == ["Winter", "Winter", "Spring", "Summer", "Fall", "Fall"]


class TestTraining:
    def test_separable(self):
        fm = _separable()
        model = train_forest(fm, ForestParams(n_trees=10, max_depth=None), seed=0)
        labels, _ = predict(model, fm)
        assert np.array_equal(labels, fm.y)
        assert feature_importance(model) == {"x": 1.0}

    def test_constant_features_give_tied_leaves(self):
        fm = FeatureMatrix(np.ones((12, 2)), [0] * 8 + [1] * 4, ("a", "b"))
        model = train_forest(fm, ForestParams(n_trees=5), seed=0)
        assert all(t.n_nodes == 1 for t in model.trees)
        labels, scores = predict(model, fm)
        assert np.allclose(scores, 0.5) and np.all(labels == 1)
        with pytest.raises(NoSplits):
            feature_importance(model)

    def test_single_class(self):
        with pytest.raises(SingleClass):
            train_forest(FeatureMatrix(np.zeros((3, 1)), [0, 0, 0], ("x",)))

    def test_balanced_weights(self):
        w = balanced_weights(np.array([0, 0, 0, 1]))
        assert w.tolist() == [4 / 6] * 3 + [2.0]
        assert w[:3].sum() == pytest.approx(w[3:].sum())

    def test_determinism_and_threads(self, corpus):
        train, _ = stratified_split(build_features(corpus), 0.2, 0)
        params = ForestParams(n_trees=30)
        a = train_forest(train, params, seed=9, n_jobs=1).to_json()
        b = train_forest(train, params, seed=9, n_jobs=1).to_json()
        c = train_forest(train, params, seed=9, n_jobs=8).to_json()
        assert a == b == c
        assert a != train_forest(train, params, seed=10).to_json()

    def test_bootstrap_unique_fraction(self, corpus):
        train, _ = stratified_split(build_features(corpus), 0.2, 0)
        assert len(train) == 130
        model = train_forest(train, ForestParams(n_trees=100, max_depth=2), seed=0)
        assert abs(model.bootstrap_unique_fraction - (1 - (1 - 1 / 130) ** 130)) <= 0.05

    def test_duplicated_tree_keeps_scores(self, corpus):
        fm = build_features(corpus)
        model = train_forest(fm, ForestParams(n_trees=7), seed=2)
        dup = ForestModel(model.trees + model.trees, model.features, model.params, model.max_features, model.seed)
        assert np.allclose(predict_scores(model, fm), predict_scores(dup, fm), rtol=0, atol=1e-15)

    def test_structure_and_importance(self, corpus):
        fm = build_features(corpus)
        model = train_forest(fm, ForestParams(n_trees=20), seed=5)
        for t in model.trees:
            reached = {0}
            for i, f in enumerate(t.feature):
                if f >= 0:
                    assert t.left[i] > i and t.right[i] > i
                    reached.update((t.left[i], t.right[i]))
            assert reached == set(range(t.n_nodes))
        imp = feature_importance(model)
        assert all(v >= 0 for v in imp.values())
        assert sum(imp.values()) == pytest.approx(1.0, abs=1e-9)

    def test_json_round_trip(self, corpus):
        fm = build_features(corpus)
        model = train_forest(fm, ForestParams(n_trees=5), seed=1)
        back = ForestModel.from_json(model.to_json())
        assert back.to_json() == model.to_json()
        assert np.array_equal(predict_scores(back, fm), predict_scores(model, fm))
        with pytest.raises(SchemaMismatch):
            ForestModel.from_json(model.to_json().replace('"model_version":1', '"model_version":99'))

    def test_schema_mismatch_on_predict(self):
        model = train_forest(_separable(), ForestParams(n_trees=2), seed=0)
        with pytest.raises(SchemaMismatch):
            predict(model, FeatureMatrix(np.zeros((1, 1)), [0], ("other",)))

    def test_tune_small_grid(self, corpus):
        train, _ = stratified_split(build_features(corpus), 0.2, 0)
        best, scores = tune(train, {"max_depth": (2, 5), "min_samples_leaf": (1,), "min_samples_split": (2,)},
                            folds=3, n_trees=5)
        assert len(scores) == 2
        assert best.max_depth in (2, 5) and best.n_trees == 5
        assert max(s for _, s in scores) == dict(((c["max_depth"], s) for c, s in scores))[best.max_depth]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=4, max_size=30, unique=True),
       st.integers(0, 2 ** 16))
def test_unlimited_depth_fits_training_data(points, seed):
    # distinct rows and a full-data tree (no bootstrap) must reproduce every label
    X = np.array(points, float)
    y = (np.arange(len(points)) % 2).astype(int)
    params = ForestParams(n_trees=1, max_depth=None)
    tree = grow_tree(X, y, balanced_weights(y), params, 1, np.random.default_rng(seed))
    assert np.array_equal((tree.class1_fraction(X) >= 0.5).astype(int), y)


class TestReport:
    def test_fixed_confusion_matrix(self):
        r = ClassificationReport.from_confusion(18, 4, 7, 4)
        assert r.n == 33
        assert r.accuracy == pytest.approx(0.667, abs=0.005)
        assert r.precision(1) == 0.5
        assert r.recall(1) == pytest.approx(0.364, abs=0.005)
        assert r.f1(1) == pytest.approx(0.42, abs=0.005)
        assert r.to_json_obj()["class_1"]["precision_fraction"] == "4/8"
        assert "66.7% (22/33)" in r.confusion_markdown()

    def test_from_labels(self):
        pred = [0] * 18 + [1] * 4 + [0] * 7 + [1] * 4
        act = [0] * 22 + [1] * 11
        assert classification_report(pred, act) == ClassificationReport.from_confusion(18, 4, 7, 4)

    def test_all_correct(self):
        r = classification_report([0, 1, 1], [0, 1, 1])
        assert r.accuracy == 1.0 and r.f1(0) == r.f1(1) == 1.0

    def test_zero_division(self):
        r = classification_report([0, 0], [0, 0])
        assert r.precision(1) == 0.0 and r.recall(1) == 0.0
        assert "precision_1" in r.zero_division and "recall_1" in r.zero_division

    def test_length(self):
        with pytest.raises(LengthMismatch):
            classification_report([0], [0, 1])

    @given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
    def test_self_consistency(self, tn, fp, fn, tp):
        if tn + fp + fn + tp == 0:
            return
        r = ClassificationReport.from_confusion(tn, fp, fn, tp)
        pred = [0] * tn + [1] * fp + [0] * fn + [1] * tp
        act = [0] * (tn + fp) + [1] * (fn + tp)
        assert classification_report(pred, act) == r
        for v in (r.accuracy, r.precision(0), r.precision(1), r.recall(0), r.recall(1), r.f1(0), r.f1(1)):
            assert 0.0 <= v <= 1.0
