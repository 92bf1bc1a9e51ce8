import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import linear_interp
from tandem.data import (DataError, Dataset, SplitSpec, TimeSeriesSample, inject_missingness,
                         load_dataset, make_separable, normalize, read_mask_file, rescale_length,
                         split, split_indices, write_dataset)

ROOT = Path(__file__).resolve().parents[1]


def write_manifest(tmp_path, csv_text, **fields):
    (tmp_path / "d.csv").write_text(csv_text)
    manifest = {"csv": "d.csv", "layout": "wide", "d": 1, "C": 2, "label_column": "label", **fields}
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    return tmp_path / "m.json"


def test_toy_dataset_round_trips(tmp_path):
    ds = load_dataset(ROOT / "data/toy/manifest.json")
    assert len(ds) == 2 and ds.d == 2
    assert ds.samples[0].length == 5 and ds.samples[1].length == 3
    assert ds.samples[0].mask[2, 0] == 0
    write_dataset(ds, tmp_path / "toy.csv")
    manifest = json.loads((ROOT / "data/toy/manifest.json").read_text())
    manifest["classes"] = ["1", "2"]
    (tmp_path / "m.json").write_text(json.dumps({**manifest, "csv": "toy.csv"}))
    back = load_dataset(tmp_path / "m.json")
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.values, b.values) and np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.times, b.times) and a.label == b.label


def test_long_layout_round_trip(tmp_path):
    ds = inject_missingness(make_separable(n=4, T=6, d=2, seed=3), 0.3, 1)
    write_dataset(ds, tmp_path / "long.csv", layout="long")
    (tmp_path / "m.json").write_text(json.dumps({"csv": "long.csv", "layout": "long", "d": 2, "C": 2}))
    back = load_dataset(tmp_path / "m.json")
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.x_tilde, b.x_tilde) and np.array_equal(a.mask, b.mask)


def test_gunpoint_shape():
    ds = load_dataset(ROOT / "data/gunpoint/manifest.json")
    assert (len(ds), ds.C, ds.d) == (200, 2, 1)
    assert {s.length for s in ds.samples} == {150}
    assert sorted(Counter(ds.labels.tolist())) == [1, 2]


@pytest.mark.parametrize("text,match", [
    ("sample_id,channel_id,label,v_1\n", "no samples"),
    ("", "no samples"),
    ("sample_id,channel_id,label,v_1,v_2\n0,0,1,1.0,abc\n", "row 2"),
    ("sample_id,channel_id,label,v_1\n0,0,1,1.0\n1,0,7,2.0\n", "row 3.*label"),
])
def test_load_errors(tmp_path, text, match):
    with pytest.raises(DataError, match=match):
        load_dataset(write_manifest(tmp_path, text))


def test_ragged_channels(tmp_path):
    text = "sample_id,channel_id,label,v_1\n0,0,1,1.0\n0,1,1,2.0\n1,0,2,3.0\n"
    with pytest.raises(DataError, match="row 4.*channels"):
        load_dataset(write_manifest(tmp_path, text, d=2))


def test_times_and_x_tilde():
    s = TimeSeriesSample(np.array([[1.0], [2.0]]), np.array([[1.0], [0.0]]), np.array([0.0, 1.0]), 1)
    assert np.array_equal(s.x_tilde, [[1.0], [0.0]])
    with pytest.raises(DataError):
        TimeSeriesSample(np.zeros((2, 1)), np.ones((2, 1)), np.array([0.5, 0.5]), 1)


def test_injection_examples():
    ds = make_separable(n=6, T=10, d=3, seed=0)
    zero = inject_missingness(ds, 0.0, 1)
    assert all(np.array_equal(s.x_tilde, s.values) for s in zero.samples)
    masked = inject_missingness(ds, 0.3, 1)
    for s in masked.samples:
        assert np.array_equal((s.mask == 0).sum(axis=0), [3, 3, 3])
    again = inject_missingness(ds, 0.3, 1)
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(masked.samples, again.samples))
    other = inject_missingness(ds, 0.3, 2)
    assert any(not np.array_equal(a.mask, b.mask) for a, b in zip(masked.samples, other.samples))


def test_injection_errors_and_per_timestep():
    ds = make_separable(n=2, T=3, d=2)
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(DataError):
            inject_missingness(ds, bad, 0)
    with pytest.raises(DataError, match="no observation"):
        inject_missingness(make_separable(n=2, T=1, d=1), 0.7, 0)
    step = inject_missingness(make_separable(n=3, T=10, d=2), 0.5, 0, per="timestep")
    for s in step.samples:
        assert np.array_equal(s.mask[:, 0], s.mask[:, 1]) and (s.mask[:, 0] == 0).sum() == 5
    with pytest.raises(DataError):
        inject_missingness(step, 0.3, 0)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(2, 60), rate=st.sampled_from([0.0, 0.3, 0.5, 0.7]), seed=st.integers(0, 99))
def test_injection_count_exact(T, rate, seed):
    ds = make_separable(n=2, T=T, d=2, seed=seed)
    k = int(np.floor(rate * T + 0.5))
    if T - k < 1:
        return
    for s in inject_missingness(ds, rate, seed).samples:
        assert np.array_equal(s.mask.sum(axis=0), [T - k, T - k])


def test_mask_file_round_trip(tmp_path):
    ds = make_separable(n=5, T=8, d=2)
    masked = inject_missingness(ds, 0.5, 3)
    write_dataset(masked, tmp_path / "mask.csv", mask_only=True)
    back = read_mask_file(tmp_path / "mask.csv", ds)
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(masked.samples, back.samples))


def test_split_sizes_and_partition():
    ds = make_separable(n=100, T=5, d=1)
    tr, va, te = split_indices(ds, SplitSpec(seed=0))
    assert (len(tr), len(va), len(te)) == (70, 15, 15)
    assert sorted(tr + va + te) == list(range(100))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(10, 120), seed=st.integers(0, 1000), skew=st.integers(3, 9))
def test_split_stratified_and_deterministic(n, seed, skew):
    labels = [1 if i % skew else 2 for i in range(n)]
    if min(Counter(labels).values()) < 3:
        return
    ds = Dataset([TimeSeriesSample(np.zeros((2, 1)), np.ones((2, 1)), np.array([0.0, 1.0]), l)
                  for l in labels], C=2, d=1)
    parts = split_indices(ds, SplitSpec(seed=seed))
    assert parts == split_indices(ds, SplitSpec(seed=seed))
    assert sorted(sum(parts, [])) == list(range(n))
    share = Counter(labels)[2] / n
    for p in parts:
        got = sum(labels[i] == 2 for i in p)
        assert abs(got - share * len(p)) <= 1 + 1e-9


def test_split_errors():
    with pytest.raises(DataError):
        split(make_separable(n=8, T=3, d=1), SplitSpec())
    base = make_separable(n=12, T=3, d=1).samples
    lopsided = Dataset([TimeSeriesSample(x.values, x.mask, x.times, 2 if i < 2 else 1)
                        for i, x in enumerate(base)], C=2, d=1)
    assert Counter(lopsided.labels.tolist())[2] == 2
    with pytest.raises(DataError, match="at least 3"):
        split(lopsided, SplitSpec())
    with pytest.raises(DataError):
        SplitSpec(0.5, 0.2, 0.2)


def test_rescale_examples():
    s = make_separable(n=1, T=7, d=2).samples[0]
    assert rescale_length(s, 7) is s
    ramp = TimeSeriesSample(np.linspace(0, 1, 5)[:, None], np.ones((5, 1)), np.linspace(0, 1, 5), 1)
    out = rescale_length(ramp, 9)
    np.testing.assert_allclose(out.values[:, 0], np.linspace(0, 1, 9), atol=1e-15)
    np.testing.assert_array_equal(out.times, np.linspace(0, 1, 9))


def test_rescale_against_interpolation_oracle():
    rng = np.random.default_rng(4)
    times = np.sort(np.r_[0.0, rng.uniform(0, 1, 10), 1.0])
    values = rng.normal(size=(12, 2))
    mask = (rng.random((12, 2)) > 0.3).astype(float)
    mask[0] = 1
    s = TimeSeriesSample(values, mask, times, 1)
    out = rescale_length(s, 20)
    grid = np.linspace(0, 1, 20)
    for c in range(2):
        obs = mask[:, c] > 0
        np.testing.assert_allclose(out.values[:, c], linear_interp(grid, times[obs], values[obs, c]),
                                   atol=1e-12)
    for k, t in enumerate(grid):
        nearest = int(np.argmin(np.abs(times - t)))
        assert np.array_equal(out.mask[k], mask[nearest])


def test_normalize_examples():
    ds = inject_missingness(make_separable(n=40, T=6, d=2, seed=2), 0.3, 0)
    tr, va, te = split(ds, SplitSpec(seed=0))
    ntr, nva, nte, (mean, sd) = normalize(tr, va, te)
    for c in range(2):
        obs = np.concatenate([s.values[s.mask[:, c] > 0, c] for s in ntr.samples])
        assert abs(obs.mean()) < 1e-9 and abs(obs.std() - 1) < 1e-9
    for s in ntr.samples + nva.samples + nte.samples:
        assert np.all(s.values[s.mask == 0] == 0)
    shifted = va.with_samples([TimeSeriesSample(s.values + 100, s.mask, s.times, s.label)
                               for s in va.samples])
    _, nsh, _, (m2, sd2) = normalize(tr, shifted, te)
    assert np.array_equal(m2, mean) and np.array_equal(sd2, sd)
    for a, b in zip(nsh.samples, nva.samples):
        obs = a.mask > 0
        np.testing.assert_allclose(a.values[obs] - b.values[obs], (100 / sd[None, :] *
                                   np.ones_like(a.values))[obs], rtol=1e-9)


def test_constant_channel_uses_floor():
    samples = [TimeSeriesSample(np.full((4, 1), 0.1), np.ones((4, 1)), np.linspace(0, 1, 4), 1 + i % 2)
               for i in range(10)]
    ds = Dataset(samples, C=2, d=1)
    ntr, _, _, (mean, sd) = normalize(ds, ds, ds)
    assert sd[0] == 1e-8
    assert all(np.all(s.values == 0) for s in ntr.samples)
