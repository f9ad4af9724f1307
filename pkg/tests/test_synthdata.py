import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradmatch import synthdata as sd


def test_gen_linear_shape_and_determinism():
    cfg = sd.LinearGenConfig(n=1000, d=10, coef_std=3.0, noise_std=1.0, seed=7)
    a, ta = sd.gen_linear(cfg)
    b, tb = sd.gen_linear(cfg)
    assert a.X.shape == (1000, 10) and a.y.shape == (1000, 1)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert ta.tobytes() == tb.tobytes()
    assert np.allclose(a.y[:, 0] - a.X @ ta, a.y[:, 0] - b.X @ tb)


def test_gen_linear_noiseless_line():
    data, theta = sd.gen_linear(sd.LinearGenConfig(n=50, d=1, noise_std=0.0, seed=3))
    assert np.allclose(data.y[:, 0], theta[0] * data.X[:, 0], rtol=0, atol=1e-14)


def test_gen_linear_fixed_design_redraws_only_theta_and_noise():
    base, _ = sd.gen_linear(sd.LinearGenConfig(n=20, d=3, seed=1))
    other, _ = sd.gen_linear(sd.LinearGenConfig(n=20, d=3, seed=2), X=base.X)
    assert np.array_equal(other.X, base.X) and not np.array_equal(other.y, base.y)


@pytest.mark.parametrize("n,d", [(0, 3), (3, 0)])
def test_gen_linear_rejects_empty(n, d):
    with pytest.raises(sd.ConfigError):
        sd.gen_linear(sd.LinearGenConfig(n=n, d=d))


def test_gen_linear_moments():
    data, _ = sd.gen_linear(sd.LinearGenConfig(n=10_000, d=4, seed=11))
    n = data.n
    assert np.all(np.abs(data.X.mean(0)) < 5 / np.sqrt(n))
    # std of the sample variance of N(0,1) is about sqrt(2/n)
    assert np.all(np.abs(data.X.var(0) - 1) < 5 * np.sqrt(2 / n))


def test_box_muller_moments():
    z = sd.normal(sd.stream(5, "moments"), 200_001)
    assert z.shape == (200_001,)
    assert abs(z.mean()) < 5 / np.sqrt(z.size)
    assert abs(z.std() - 1) < 0.01
    assert abs(np.mean(np.abs(z) < 1.0) - 0.6826894921) < 0.005


def test_streams_are_label_dependent():
    a = sd.stream(1, "a").random(4)
    assert np.array_equal(a, sd.stream(1, "a").random(4))
    assert not np.array_equal(a, sd.stream(1, "b").random(4))
    assert not np.array_equal(a, sd.stream(2, "a").random(4))
    assert sd.derive_seed(1, "x") == sd.derive_seed(1, "x") != sd.derive_seed(1, "y")


def test_gen_blobs_far_clusters_are_separable():
    data = sd.gen_blobs(4, 2, 2, 10.0, seed=0)
    labels = data.y.argmax(1)
    assert sorted(np.bincount(labels)) == [2, 2]
    w = np.array([1.0, -1.0])
    margin = data.X @ w
    assert (margin[labels == 0].min() > margin[labels == 1].max())


def test_gen_blobs_zero_separation_identical_classes():
    data = sd.gen_blobs(3000, 3, 3, 0.0, seed=1)
    labels = data.y.argmax(1)
    means = np.array([data.X[labels == c].mean(0) for c in range(3)])
    assert np.abs(means).max() < 5 / np.sqrt(1000)


def test_gen_blobs_linear_classifier_beats_chance():
    data = sd.gen_blobs(600, 20, 3, 2.0, seed=2)
    train, test = sd.train_test_split(data, 0.3, seed=0)
    # ridge classifier on one-hot targets as an independent oracle
    Xa = np.column_stack([train.X, np.ones(train.n)])
    W = np.linalg.solve(Xa.T @ Xa + 1e-2 * np.eye(Xa.shape[1]), Xa.T @ train.y)
    pred = (np.column_stack([test.X, np.ones(test.n)]) @ W).argmax(1)
    assert np.mean(pred == test.y.argmax(1)) > 0.5


def test_gen_blobs_errors():
    with pytest.raises(sd.ConfigError):
        sd.gen_blobs(2, 5, 3, 1.0, 0)
    with pytest.raises(sd.ConfigError):
        sd.gen_blobs(10, 5, 1, 1.0, 0)


def test_bootstrap_single_row():
    data = sd.Dataset(np.array([[1.0, 2.0]]), np.array([3.0]))
    boot = sd.resample_bootstrap(data, 0)
    assert np.array_equal(boot.X, data.X) and np.array_equal(boot.y, data.y)


def test_bootstrap_distinct_fraction():
    data = sd.Dataset(np.arange(1000.0)[:, None], np.zeros(1000))
    fracs = [np.unique(sd.resample_bootstrap(data, s).X).size / 1000 for s in range(20)]
    assert abs(np.mean(fracs) - (1 - np.exp(-1))) < 0.03
    assert all(abs(f - 0.632) < 0.03 for f in fracs)


@given(st.integers(1, 40), st.integers(1, 4), st.integers(0, 10**6))
def test_bootstrap_preserves_shape_and_is_deterministic(n, d, seed):
    data = sd.Dataset(np.arange(n * d, dtype=float).reshape(n, d), np.arange(n, dtype=float))
    a, b = sd.resample_bootstrap(data, seed), sd.resample_bootstrap(data, seed)
    assert a.X.shape == data.X.shape and np.array_equal(a.X, b.X)
    assert str(seed) in a.id and data.id in a.id


def test_split_sizes_and_partition():
    data = sd.Dataset(np.arange(10.0)[:, None], np.arange(10.0))
    tr, te = sd.train_test_split(data, 0.2, 0)
    assert (tr.n, te.n) == (8, 2)
    assert sorted(np.concatenate([tr.X[:, 0], te.X[:, 0]])) == list(range(10))
    full, empty = sd.train_test_split(data, 0.0, 0)
    assert full.n == 10 and empty.n == 0


@given(st.integers(1, 60), st.floats(0.0, 0.95), st.integers(0, 10**6))
def test_split_partition_property(n, frac, seed):
    data = sd.Dataset(np.arange(n, dtype=float)[:, None], np.zeros(n))
    tr, te = sd.train_test_split(data, frac, seed)
    assert tr.n == int(round(n * (1 - frac)))
    assert sorted(np.concatenate([tr.X[:, 0], te.X[:, 0]])) == list(range(n))


def _idx(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_idx_scaling_and_one_hot(tmp_path):
    img = tmp_path / "img"
    lab = tmp_path / "lab"
    img.write_bytes(_idx(0x803, (2, 2, 2), [0] * 4 + [255] * 4))
    lab.write_bytes(_idx(0x801, (2,), [1, 0]))
    data = sd.idx_load(img, lab)
    assert np.array_equal(data.X, [[0, 0, 0, 0], [1, 1, 1, 1]])
    assert np.array_equal(data.y, [[0, 1], [1, 0]])


def test_idx_big_endian_dims_hand_built(tmp_path):
    # one 2x3 image; dims 0x00000002 / 0x00000003 must not be read little-endian
    raw = bytes.fromhex("00000803" "00000001" "00000002" "00000003") + bytes([0, 51, 102, 153, 204, 255])
    (tmp_path / "i").write_bytes(raw)
    (tmp_path / "l").write_bytes(bytes.fromhex("00000801" "00000001") + bytes([4]))
    data = sd.idx_load(tmp_path / "i", tmp_path / "l", num_classes=10)
    assert data.X.shape == (1, 6)
    assert np.allclose(data.X[0], np.array([0, 51, 102, 153, 204, 255]) / 255)
    assert data.y[0].argmax() == 4 and data.y.shape == (1, 10)


def test_idx_errors_report_offsets(tmp_path):
    good_img = _idx(0x803, (2, 1, 1), [0, 1])
    (tmp_path / "i").write_bytes(good_img)
    (tmp_path / "l").write_bytes(_idx(0x801, (3,), [0, 1, 0]))
    with pytest.raises(sd.IdxParseError, match="does not match"):
        sd.idx_load(tmp_path / "i", tmp_path / "l")
    (tmp_path / "bad").write_bytes(_idx(0x802, (2, 1, 1), [0, 1]))
    with pytest.raises(sd.IdxParseError) as exc:
        sd.idx_load(tmp_path / "bad", tmp_path / "l")
    assert exc.value.offset == 0 and "byte offset 0" in str(exc.value)
    (tmp_path / "short").write_bytes(good_img[:-1])
    with pytest.raises(sd.IdxParseError, match="truncated"):
        sd.idx_load(tmp_path / "short", tmp_path / "l")


def test_dataset_rejects_non_finite():
    with pytest.raises(sd.ConfigError):
        sd.Dataset(np.array([[np.nan]]), np.array([1.0]))
    with pytest.raises(sd.ConfigError):
        sd.Dataset(np.ones((2, 1)), np.ones(3))
