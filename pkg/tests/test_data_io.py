import numpy as np
import pytest

from layerlab.data_io import (
    ColumnKind,
    RawTable,
    load_csv,
    load_schema,
    preprocess,
    standardize_by_support,
    subsample_table,
)
from layerlab.errors import IngestionError
from layerlab.prior import Table


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_numeric_round_trip(tmp_path):
    p = write(tmp_path, "a,b,y\n1.5,-2,0\n0.1,3e-5,1\n7,0.3333333333333333,1\n")
    raw = load_csv(p, "y")
    assert raw.columns["a"].tolist() == [1.5, 0.1, 7.0]
    assert raw.columns["b"].tolist() == [-2.0, 3e-5, 0.3333333333333333]
    assert raw.y.tolist() == [0, 1, 1]
    assert raw.kinds == {"a": ColumnKind.NUMERIC, "b": ColumnKind.NUMERIC}


def test_categorical_inference_and_quoting(tmp_path):
    p = write(tmp_path, 'c,n,y\na,1,yes\n"b",2,no\na,,yes\n')
    raw = load_csv(p, "y")
    assert raw.kinds["c"] is ColumnKind.CATEGORICAL and raw.kinds["n"] is ColumnKind.NUMERIC
    assert raw.columns["c"] == ["a", "b", "a"]
    assert np.isnan(raw.columns["n"][2])
    assert raw.classes == ("no", "yes") and raw.y.tolist() == [1, 0, 1]


def test_three_class_target_rejected_with_class_list(tmp_path):
    p = write(tmp_path, "x,y\n1,a\n2,b\n3,c\n")
    with pytest.raises(IngestionError, match=r"\['a', 'b', 'c'\]"):
        load_csv(p, "y")


def test_ingestion_errors_carry_location(tmp_path):
    with pytest.raises(IngestionError, match="target column 'z'"):
        load_csv(write(tmp_path, "x,y\n1,0\n2,1\n"), "z")
    with pytest.raises(IngestionError, match="line 3"):
        load_csv(write(tmp_path, "x,y\n1,0\n2,1,9\n"), "y")
    with pytest.raises(IngestionError, match="line 3.*'y'"):
        load_csv(write(tmp_path, "x,y\n1,0\n2,\n"), "y")
    with pytest.raises(IngestionError, match="not found"):
        load_csv(tmp_path / "missing.csv", "y")


def test_schema_forces_kinds_and_sentinels(tmp_path):
    schema = write(tmp_path, "columns:\n  code: categorical\n  v: {kind: numeric, missing: ['-999']}\n", "s.yaml")
    p = write(tmp_path, "code,v,y\n10,1,0\n20,-999,1\n10,3,1\n")
    raw = load_csv(p, "y", load_schema(schema))
    assert raw.kinds["code"] is ColumnKind.CATEGORICAL and raw.columns["code"] == ["10", "20", "10"]
    assert np.isnan(raw.columns["v"][1])
    with pytest.raises(IngestionError, match="line 2"):
        load_csv(write(tmp_path, "v,y\nabc,0\n1,1\n", "bad.csv"), "y", {"v": load_schema(schema)["v"]})


def _raw(columns, kinds, n):
    return RawTable(columns, kinds, np.arange(n) % 2, "y", ("0", "1"))


def test_standardization_examples():
    t = preprocess(_raw({"a": np.array([1.0, 2.0, 3.0]), "k": np.array([7.0, 7.0, 7.0])},
                        {"a": ColumnKind.NUMERIC, "k": ColumnKind.NUMERIC}, 3))
    assert abs(t.X[:, 0].mean()) < 1e-15 and abs(t.X[:, 0].var() - 1) < 1e-15
    assert t.X[:, 1].tolist() == [0.0, 0.0, 0.0]


def test_first_appearance_codes():
    t = preprocess(_raw({"c": ["x", "y", "x", "z"]}, {"c": ColumnKind.CATEGORICAL}, 4))
    codes = np.array([0.0, 1.0, 0.0, 2.0])
    assert np.allclose(t.X[:, 0], (codes - codes.mean()) / codes.std(), rtol=0, atol=1e-15)


def test_imputation_and_dropped_columns():
    cols = {
        "n": np.array([1.0, np.nan, 3.0, 5.0]),
        "c": ["p", None, "q", "p"],
        "gone": np.array([np.nan] * 4),
    }
    kinds = {"n": ColumnKind.NUMERIC, "c": ColumnKind.CATEGORICAL, "gone": ColumnKind.NUMERIC}
    t = preprocess(_raw(cols, kinds, 4))
    assert t.feature_names == ["n", "c"] and t.X.shape == (4, 2)
    assert any("gone" in note for note in t.notes)
    filled = np.array([1.0, 3.0, 3.0, 5.0])
    assert np.allclose(t.X[:, 0], (filled - filled.mean()) / filled.std(), atol=1e-15)
    codes = np.array([0.0, 2.0, 1.0, 0.0])  # missing gets its own trailing code
    assert np.allclose(t.X[:, 1], (codes - codes.mean()) / codes.std(), atol=1e-15)


def test_preprocess_is_idempotent_and_preserves_rows(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["a,b,c,y"] + [f"{rng.normal(5, 3):.6f},{rng.choice(['u', 'v', 'w', ''])},{9},{i % 2}" for i in range(50)]
    once = preprocess(load_csv(write(tmp_path, "\n".join(lines) + "\n"), "y"))
    twice = preprocess(RawTable.from_table(once))
    assert once.X.shape == (50, 3)
    assert np.max(np.abs(once.X - twice.X)) <= 1e-12


def test_support_only_statistics():
    rng = np.random.default_rng(1)
    sx, tx = rng.normal(3, 2, (20, 3)), rng.normal(100, 50, (10, 3))
    a, b = standardize_by_support(sx, tx)
    assert np.allclose(a.mean(axis=0), 0, atol=1e-12) and np.allclose(a.std(axis=0), 1)
    assert np.allclose(b, (tx - sx.mean(axis=0)) / sx.std(axis=0))
    # changing target rows never changes support statistics
    a2, _ = standardize_by_support(sx, tx * 10)
    assert np.array_equal(a, a2)


def test_subsample_is_stratified_and_seeded():
    y = np.r_[np.zeros(300, int), np.ones(100, int)]
    t = Table(np.arange(400.0)[:, None], y)
    s1, s2 = subsample_table(t, 100, 3), subsample_table(t, 100, 3)
    assert s1.n_rows == 100 and s1.y.sum() == 25
    assert np.array_equal(s1.X, s2.X)
    assert subsample_table(t, 1000, 0) is t
