import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stretnet.data import (
    FlowSeries,
    Normalizer,
    fit_normalizer,
    load_flow,
    make_windows,
    prepare,
    save_flow,
    split_3_1_1,
    split_sizes,
    synthetic_series,
    zscore_fit,
)
from stretnet.graph import DataError
from stretnet.numerics import ConfigError


def test_text_and_binary_round_trip(tmp_path):
    series, _ = synthetic_series(3, 40, 1, "sine")
    for fmt, name in (("text", "f.csv"), ("bin", "f.bin")):
        save_flow(tmp_path / name, series, fmt)
        back = load_flow(tmp_path / name)
        assert np.array_equal(back.values, series.values)


def test_npz_first_channel(tmp_path):
    data = np.random.default_rng(0).uniform(size=(20, 4, 3))
    np.savez(tmp_path / "pems.npz", data=data)
    assert np.array_equal(load_flow(tmp_path / "pems.npz").values, data[:, :, 0])


def test_single_column_and_ragged(tmp_path):
    (tmp_path / "one.csv").write_text("1\n2\n3\n")
    assert load_flow(tmp_path / "one.csv").n_nodes == 1
    (tmp_path / "rag.csv").write_text("1,2\n3,4\n5\n")
    with pytest.raises(DataError, match=":3:"):
        load_flow(tmp_path / "rag.csv")


def test_binary_corruption(tmp_path):
    series, _ = synthetic_series(2, 10, 0, "sine")
    save_flow(tmp_path / "f.bin", series, "bin")
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(DataError):
        load_flow(tmp_path / "t.bin")


def test_nan_rejected_or_imputed(tmp_path):
    (tmp_path / "n.csv").write_text("nan,1\n2,nan\n3,4\n")
    with pytest.raises(DataError, match="time step 0"):
        load_flow(tmp_path / "n.csv")
    vals = load_flow(tmp_path / "n.csv", impute=True).values
    assert vals.tolist() == [[2, 1], [2, 1], [3, 4]]


def test_zscore():
    with pytest.raises(ConfigError):
        zscore_fit(np.full((5, 2), 3.0))
    x = np.random.default_rng(1).normal(5, 2, size=100)
    norm = zscore_fit(x)
    assert np.allclose(norm.invert(norm.apply(x)), x)
    z = norm.apply(x)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12


def test_window_counts_and_alignment():
    vals = np.arange(10.0).reshape(5, 2)
    ds = make_windows(FlowSeries(vals), 2, 1)
    assert len(ds) == 3
    assert ds.inputs[1, :, :, 0].tolist() == [[2, 4], [3, 5]]
    assert ds.targets[1, :, 0, 0].tolist() == [6, 7]
    assert len(make_windows(FlowSeries(vals), 3, 2)) == 1
    with pytest.raises(DataError):
        make_windows(FlowSeries(vals), 4, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6), st.integers(1, 6))
def test_windows_never_leak_targets(t_len, p, q):
    if t_len < p + q:
        return
    times = np.arange(float(t_len))[:, None]
    ds = make_windows(FlowSeries(times), p, q)
    assert len(ds) == t_len - p - q + 1
    assert np.all(ds.inputs.max(axis=(1, 2, 3)) < ds.targets.min(axis=(1, 2, 3)))
    assert np.all(ds.targets[:, 0, 0, 0] == ds.inputs[:, 0, -1, 0] + 1)


def test_split_examples():
    assert split_sizes(100) == (60, 20, 20)
    assert split_sizes(5) == (3, 1, 1)
    ds = make_windows(FlowSeries(np.arange(7.0)[:, None]), 2, 2)
    with pytest.raises(DataError):
        split_3_1_1(ds)


@settings(max_examples=80, deadline=None)
@given(st.integers(5, 5000))
def test_split_partitions_chronologically(count):
    a, b, c = split_sizes(count)
    assert a + b + c == count and min(a, b, c) >= 1
    assert a == count * 3 // 5 and b <= c


def test_split_order_and_contiguity():
    series, _ = synthetic_series(2, 130, 0, "sine")
    tr, va, te = prepare(series, 12, 12)
    assert tr.starts[-1] + 1 == va.starts[0] and va.starts[-1] + 1 == te.starts[0]
    tr2, va2, te2 = prepare(series, 12, 12, order=("train", "test", "val"))
    assert np.array_equal(tr2.starts, tr.starts)
    assert te2.starts[0] < va2.starts[0]


def test_normalizer_uses_only_train_rows():
    vals = np.concatenate([np.random.default_rng(2).normal(size=(65, 1)), np.full((35, 1), 1e6)])
    series = FlowSeries(vals)
    tr, _, _ = prepare(series, 2, 2)
    last = tr.starts[-1] + 4
    assert last <= 65
    assert tr.normalizer == zscore_fit(vals[:last])
    assert fit_normalizer(series, tr) == tr.normalizer


def test_synthetic_determinism_and_kinds():
    a, da = synthetic_series(8, 300, 7, "sine")
    b, db = synthetic_series(8, 300, 7, "sine")
    assert np.array_equal(a.values, b.values) and da == db
    c, _ = synthetic_series(4, 50, 0, "constant")
    assert np.all(c.values == c.values[0])
    d, _ = synthetic_series(4, 500, 0, "diffusion")
    assert np.isfinite(d.values).all()
    with pytest.raises(ConfigError):
        synthetic_series(4, 10, 0, "nope")


def test_diffusion_is_driven_upstream():
    series, dist = synthetic_series(6, 4000, 3, "diffusion")
    z = series.values - series.values.mean(0)
    up = np.mean([np.corrcoef(z[1:, (i + 1) % 6], z[:-1, i])[0, 1] for i in range(6)])
    down = np.mean([np.corrcoef(z[1:, i], z[:-1, (i + 1) % 6])[0, 1] for i in range(6)])
    assert up > 0.5 and up > down
    assert all(j == (i + 1) % 6 for i, j, _ in dist)


def test_normalizer_sentinel():
    norm = Normalizer(mean=1000.0, std=10.0)
    assert norm.apply(1010.0) == 1.0 and norm.invert(1.0) == 1010.0
