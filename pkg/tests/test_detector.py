import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stealthbench import detector as det
from stealthbench.fingerprint import Fingerprint


def gaussian(n, d=5, seed=0):
    return np.random.default_rng(seed).standard_normal((n, d))


@pytest.fixture(scope="module")
def model():
    return det.fit(gaussian(1000), seed=1)


def test_normalizer_values():
    assert det.average_path_normalizer(0) == 0.0
    assert det.average_path_normalizer(1) == 0.0
    assert det.average_path_normalizer(2) == 1.0
    # mpmath, 30 digits: 2(ln 255 + 0.5772156649) - 2*255/256
    assert det.average_path_normalizer(256) == pytest.approx(10.24477092, abs=1e-8)
    assert det.average_path_normalizer(256) == pytest.approx(10.244, abs=1e-3)


def test_normalizer_array_matches_scalar():
    sizes = np.arange(0, 40)
    expect = [det.average_path_normalizer(int(n)) for n in sizes]
    assert np.allclose(det._c_array(sizes), expect)


def test_tree_invariants():
    X = gaussian(256, seed=2)
    tree = det.build_tree(X, 8, np.random.default_rng(0))
    assert tree.depth() <= 8
    # Every split lies strictly inside the range of the points reaching it.
    stack = [(0, np.arange(len(X)))]
    while stack:
        node, idx = stack.pop()
        f = tree.feature[node]
        if f < 0:
            assert tree.size[node] == len(idx)
            continue
        vals = X[idx, f]
        assert vals.min() < tree.split[node] <= vals.max()
        left = vals < tree.split[node]
        stack += [(tree.left[node], idx[left]), (tree.right[node], idx[~left])]


def test_training_flag_rate(model):
    flagged = model.is_anomaly(gaussian(1000)).mean()
    assert 0.03 <= flagged <= 0.07
    assert flagged <= 0.05


def test_heldout_flag_rate(model):
    assert abs(model.is_anomaly(gaussian(4000, seed=9)).mean() - 0.05) <= 0.03


def test_determinism():
    a = det.fit(gaussian(600), seed=4)
    b = det.fit(gaussian(600), seed=4)
    X = gaussian(50, seed=5)
    assert a.threshold == b.threshold
    assert np.array_equal(a.score_many(X), b.score_many(X))


def test_row_order_does_not_matter():
    X = gaussian(600)
    perm = np.random.default_rng(3).permutation(len(X))
    a, b = det.fit(X, seed=4), det.fit(X[perm], seed=4)
    Q = gaussian(50, seed=5)
    assert np.array_equal(a.score_many(Q), b.score_many(Q))


def test_full_subsample():
    X = gaussian(300)
    m = det.fit(X, subsample_size=300, n_trees=5)
    assert all(t.size[0] == 300 for t in m.trees)


def test_scores_in_unit_interval(model):
    X = np.vstack([gaussian(200, seed=6), 1e6 * np.ones((1, 5)), np.zeros((1, 5))])
    s = model.score_many(X)
    assert np.all((s > 0) & (s < 1))


def test_far_point_outscores_median():
    X = gaussian(500, d=2)
    m = det.fit(X, seed=0)
    far = det.score(m, np.array([100.0, 100.0]))
    assert far > np.median(m.score_many(X))


def test_score_pure(model):
    x = Fingerprint(gaussian(1)[0])
    assert det.score(model, x) == det.score(model, x)


def test_score_half_at_normalizer():
    # One leaf-only tree: path length c(size); with size = psi the score is 1/2.
    tree = det.IsolationTree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
                             np.array([256]), 8)
    m = det.IsolationForestModel([tree], 256, 0.05, threshold=0.5, n_features=1)
    assert det.score(m, np.array([0.0])) == pytest.approx(0.5)
    # Boundary tie goes to normal.
    assert det.predict(m, np.array([0.0])) == "normal"


def test_score_antimonotone_in_path_length(model):
    X = gaussian(300, seed=11)
    order = np.argsort(model.mean_path_length(X))
    assert np.all(np.diff(model.score_many(X)[order]) <= 0)


def test_duplicate_leaves_other_paths_alone():
    X = gaussian(256, seed=12)
    tree = det.build_tree(X, 8, np.random.default_rng(1))
    base = tree.with_leaf_counts(X)
    dup = tree.with_leaf_counts(np.vstack([X, X[:1]]))
    leaf, _ = tree.leaf_index(X)
    others = leaf != leaf[0]
    assert np.array_equal(base.path_length(X)[others], dup.path_length(X)[others])


@pytest.mark.parametrize("kwargs,match", [
    (dict(subsample_size=2000), "training rows"),
    (dict(contamination=0.0), "contamination"),
    (dict(contamination=0.6), "contamination"),
])
def test_fit_errors(kwargs, match):
    with pytest.raises(det.DetectorError, match=match):
        det.fit(gaussian(500), **kwargs)


def test_fit_rejects_constant_and_attack_rows():
    with pytest.raises(det.DetectorError, match="constant"):
        det.fit(np.ones((300, 3)))
    rows = [Fingerprint(v, "profile_4") for v in gaussian(300)]
    with pytest.raises(det.DetectorError, match="normal"):
        det.fit(rows)


def test_schema_mismatch(model):
    with pytest.raises(det.DetectorError):
        det.score(model, np.zeros(3))


def test_json_roundtrip(model, tmp_path):
    model.save(tmp_path / "m.json")
    back = det.IsolationForestModel.load(tmp_path / "m.json")
    X = gaussian(100, seed=7)
    assert back.threshold == model.threshold
    assert np.array_equal(back.score_many(X), model.score_many(X))


class Oracle:
    def __init__(self, flags):
        self.flags = np.asarray(flags)

    def is_anomaly(self, X):
        return self.flags[: len(X)]


def test_evaluate_definitions():
    rows = [Fingerprint(np.zeros(2), "normal")] * 4
    rep = det.evaluate(Oracle([False] * 4), rows)
    assert rep.normal_tnr == 1.0 and rep.fnr == {}

    rows = [Fingerprint(np.zeros(2), "profile_4")] * 3 + [Fingerprint(np.zeros(2), "normal")]
    rep = det.evaluate(Oracle([False, False, False, True]), rows)
    assert rep.fnr == {4: 1.0}
    assert rep.normal_tnr == 0.0


def test_evaluate_needs_labels():
    with pytest.raises(det.DetectorError):
        det.evaluate(Oracle([False]), [Fingerprint(np.zeros(2))])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.01, 0.05, 0.1, 0.25]))
def test_threshold_quantile_property(seed, contamination):
    X = gaussian(400, d=3, seed=seed)
    m = det.fit(X, n_trees=20, contamination=contamination, seed=seed)
    flagged = m.is_anomaly(X).mean()
    assert flagged <= contamination + 1e-12
    # Ties at the threshold are the only way to flag fewer.
    ties = np.mean(m.score_many(X) == m.threshold)
    assert flagged >= contamination - ties - 1.0 / len(X)


def test_height_limit():
    m = det.fit(gaussian(400), subsample_size=100, n_trees=10)
    assert all(t.height_limit == math.ceil(math.log2(100)) for t in m.trees)
