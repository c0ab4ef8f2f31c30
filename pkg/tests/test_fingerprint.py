import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planted import planted_5, planted_6, planted_10, planted_103
from stealthbench.fingerprint import (
    DROPPED_CONSTANT,
    DROPPED_CORRELATED,
    DROPPED_DUPLICATE,
    DROPPED_OVERFLOW,
    DROPPED_TEMPORAL,
    DROPPED_VOLATILE,
    RETAINED,
    FeatureSelectionError,
    Fingerprint,
    FingerprintSchema,
    IngestError,
    PipelineConfig,
    RawDataset,
    coefficient_of_variation,
    drop_correlated,
    drop_degenerate,
    drop_volatile,
    ingest_csv,
    run_pipeline,
    write_csv,
)

TAGS = {RETAINED, DROPPED_DUPLICATE, DROPPED_CONSTANT, DROPPED_TEMPORAL, DROPPED_VOLATILE,
        DROPPED_CORRELATED, DROPPED_OVERFLOW}


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- ingestion ----------------------------------------------------------------


def test_ingest_basic(tmp_path):
    p = write(tmp_path, "timestamp,label,f1,f2\n0,normal,1,2\n5,profile_4,3,4\n10,,5,6\n")
    ds = ingest_csv(p)
    assert ds.columns == ["f1", "f2"]
    assert ds.values.shape == (3, 2)
    assert ds.labels == ["normal", "profile_4", "unlabeled"]
    assert ds.timestamps == [0.0, 5.0, 10.0]
    assert ds.values[:, 0].tolist() == [1.0, 3.0, 5.0]


def test_ingest_constant_column_is_fine(tmp_path):
    p = write(tmp_path, "f1,f2\n0.0,1\n0.0,2\n")
    assert ingest_csv(p).column("f1").tolist() == [0.0, 0.0]


@pytest.mark.parametrize("text,needle", [
    ("f1,f2\n1,NaN\n", "row 2, column 'f2'"),
    ("f1,f2\n1,2\n1,abc\n", "row 3, column 'f2'"),
    ("f1,f2\n1,inf\n", "non-finite"),
    ("f1,f2\n1,2,3\n", "row 2 has 3 cells"),
    ("f1,f1\n1,2\n", "duplicate column"),
    ("f1,\n1,2\n", "empty column name"),
    ("", "missing header"),
    ("label,f1\nweird,1\n", "unknown label"),
])
def test_ingest_errors(tmp_path, text, needle):
    with pytest.raises(IngestError, match=needle):
        ingest_csv(write(tmp_path, text))


def test_ingest_missing_file(tmp_path):
    with pytest.raises(IngestError):
        ingest_csv(tmp_path / "nope.csv")


def test_conforming_roundtrip(tmp_path):
    fps = [Fingerprint(np.array([1.5, -2.0]), "normal", 3.0),
           Fingerprint(np.array([0.1, 1e-9]), "profile_2", 8.0)]
    write_csv(tmp_path / "x.csv", ["a", "b"], fps)
    schema, back = ingest_csv(tmp_path / "x.csv", schema_mode="conforming")
    assert schema.feature_names == ["a", "b"]
    for f, g in zip(fps, back):
        assert np.array_equal(f.values, g.values) and f.label == g.label and f.timestamp == g.timestamp


def test_fingerprint_rejects_nonfinite():
    with pytest.raises(ValueError):
        Fingerprint(np.array([1.0, np.nan]))


def test_schema_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        FingerprintSchema(["a", "a"])
    with pytest.raises(ValueError):
        FingerprintSchema(["a"], window_seconds=0)
    s = FingerprintSchema(["a", "b"], 5.0, {"a": RETAINED, "b": RETAINED})
    s.save(tmp_path / "s.json")
    assert FingerprintSchema.load(tmp_path / "s.json") == s


# --- stages -------------------------------------------------------------------


def ds_of(**cols):
    names = list(cols)
    return RawDataset(names, np.column_stack([np.asarray(cols[n], dtype=float) for n in names]))


def test_degenerate_examples():
    x = np.arange(5.0)
    y = np.array([3.0, 1, 4, 1, 5])
    assert drop_degenerate(ds_of(a=x, a2=x, b=y)).columns == ["a", "b"]
    assert drop_degenerate(ds_of(a=x, c=np.full(5, 7.3))).columns == ["a"]


def test_degenerate_planted_10():
    ds, temporal = planted_10()
    assert drop_degenerate(ds, temporal).columns == ["a", "b", "c", "d", "e", "f"]


def test_degenerate_all_removed():
    with pytest.raises(FeatureSelectionError):
        drop_degenerate(ds_of(c=np.ones(4)))


def test_volatile_examples():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(1000)
    z = (z - z.mean()) / z.std()
    ds = ds_of(steady=100 + z, wild=1 + 10 * z)
    cv = coefficient_of_variation(ds)
    assert cv == pytest.approx([0.01, 10.0])
    assert drop_volatile(ds, 0.5).columns == ["steady"]


def test_volatile_zero_mean_counts_as_volatile():
    ds = ds_of(zero=[-1.0, 1.0], ok=[10.0, 11.0])
    assert np.isinf(coefficient_of_variation(ds)[0])
    assert drop_volatile(ds, 0.5).columns == ["ok"]


def test_volatile_planted_5():
    assert drop_volatile(planted_5(), 0.5).columns == ["k0", "k1", "k2"]


def test_volatile_errors():
    with pytest.raises(FeatureSelectionError):
        drop_volatile(ds_of(v=[-1.0, 1.0]), 0.5)
    with pytest.raises(ValueError):
        drop_volatile(ds_of(v=[1.0, 2.0]), 0.0)


def test_correlated_examples():
    x = np.array([0.3, 1.2, -0.7, 2.2, 0.0])
    assert drop_correlated(ds_of(x=x, y=2 * x + 1)).columns == ["x"]
    assert drop_correlated(ds_of(x=x, y=-x)).columns == ["x"]


def test_correlated_planted_6():
    ds = planted_6()
    corr = np.corrcoef(ds.values, rowvar=False)
    assert corr[0, 2] == pytest.approx(0.995, abs=1e-12)
    assert corr[1, 4] == pytest.approx(0.90, abs=1e-12)
    assert drop_correlated(ds, 0.99).columns == ["p", "q", "u", "q_cousin", "w"]


def brute_force_max_offdiag(values):
    c = np.abs(np.corrcoef(values, rowvar=False))
    np.fill_diagonal(c, 0.0)
    return c.max()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 0.999))
def test_correlated_output_has_no_strong_pair(seed, thr):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((60, 4))
    mix = base @ rng.standard_normal((4, 9))  # 9 columns with shared factors
    out = drop_correlated(RawDataset([f"c{i}" for i in range(9)], mix), thr)
    if len(out.columns) > 1:
        assert brute_force_max_offdiag(out.values) <= thr + 1e-12


# --- pipeline -----------------------------------------------------------------


def test_pipeline_planted_103():
    ds, temporal, clean = planted_103()
    res = run_pipeline(ds, PipelineConfig(temporal=temporal, cv_threshold=0.5))
    assert sorted(res.schema.feature_names) == sorted(clean)
    assert res.attrition == {"input": 103, "degenerate": 30, "volatile": 23,
                             "correlated": 0, "overflow": 0}
    # Survivors keep their input order.
    order = [ds.columns.index(n) for n in res.schema.feature_names]
    assert order == sorted(order)
    assert set(res.schema.provenance) == set(ds.columns)
    assert set(res.schema.provenance.values()) <= TAGS
    assert sum(v == RETAINED for v in res.schema.provenance.values()) == 50


def test_pipeline_identity_on_clean():
    ds, _, clean = planted_103()
    only = ds.select([ds.columns.index(n) for n in clean])
    res = run_pipeline(only, PipelineConfig(cv_threshold=0.5))
    assert res.schema.feature_names == only.columns


def test_pipeline_filters_disabled():
    ds = planted_5()
    res = run_pipeline(ds, PipelineConfig(cv_threshold=1e9, corr_threshold=1.0, target_count=None))
    assert res.schema.feature_names == ds.columns


def test_pipeline_overflow_keeps_lowest_cv():
    ds, _, clean = planted_103()
    only = ds.select([ds.columns.index(n) for n in clean])
    res = run_pipeline(only, PipelineConfig(target_count=10))
    cv = coefficient_of_variation(only)
    expect = [only.columns[i] for i in sorted(np.argsort(cv, kind="stable")[:10])]
    assert res.schema.feature_names == expect
    assert list(res.schema.provenance.values()).count(DROPPED_OVERFLOW) == 40


def test_pipeline_too_few_reports_attrition():
    ds = planted_5()
    with pytest.raises(FeatureSelectionError, match="volatile=2"):
        run_pipeline(ds, PipelineConfig(target_count=4))


def test_pipeline_deterministic():
    ds, temporal, _ = planted_103(seed=3)
    cfg = PipelineConfig(temporal=temporal)
    a, b = run_pipeline(ds, cfg), run_pipeline(ds, cfg)
    assert a.schema == b.schema


def test_pipeline_values_untouched():
    ds, temporal, _ = planted_103(seed=1)
    res = run_pipeline(ds, PipelineConfig(temporal=temporal))
    idx = [ds.columns.index(n) for n in res.schema.feature_names]
    got = np.vstack([fp.values for fp in res.fingerprints])
    assert np.array_equal(got, ds.values[:, idx])
