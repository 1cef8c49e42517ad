import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfvi_bnn._rng import stream
from mfvi_bnn.data import (
    Dataset,
    FormatError,
    TeacherDistribution,
    TeacherSpec,
    batches,
    load_csv_regression,
    load_idx,
    partition_indices,
    split,
    synth_blobs,
    synth_teacher_regression,
    write_idx,
    zscore,
)
from mfvi_bnn.elbo import estimate_data_term
from mfvi_bnn.model import Activation, Loss
from mfvi_bnn.variational import VariationalPosterior, softplus_inverse


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


@pytest.fixture
def idx_pair(tmp_path):
    # two 2x3 images built byte by byte
    pixels = [0, 255, 51, 102, 153, 204, 255, 0, 0, 1, 2, 3]
    (tmp_path / "img").write_bytes(idx_bytes(0x803, (2, 2, 3), pixels))
    (tmp_path / "lab").write_bytes(idx_bytes(0x801, (2,), [7, 0]))
    return tmp_path / "img", tmp_path / "lab"


def test_load_idx_fixture(idx_pair):
    ds = load_idx(*idx_pair)
    assert ds.p == 2 and ds.d_x == 6 and ds.n_classes == 10
    np.testing.assert_allclose(ds.features[0], [0, 1, 0.2, 0.4, 0.6, 0.8], rtol=1e-15)
    np.testing.assert_allclose(ds.features[1], np.array([255, 0, 0, 1, 2, 3]) / 255, rtol=1e-15)
    np.testing.assert_array_equal(ds.targets, [8, 1])
    assert ds.metadata["pixel_scaling"] == "x/255"


def test_write_idx_round_trip(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, (3, 4, 5)).astype(np.uint8)
    write_idx(tmp_path / "i", images)
    write_idx(tmp_path / "l", np.array([1, 2, 3], dtype=np.uint8))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(ds.features * 255, images.reshape(3, -1))


def test_idx_bad_magic(tmp_path, idx_pair):
    (tmp_path / "bad").write_bytes(idx_bytes(0x801, (2, 2, 3), [0] * 12))
    with pytest.raises(FormatError, match="expected 0x00000803, found 0x00000801"):
        load_idx(tmp_path / "bad", idx_pair[1])


def test_idx_truncated_and_trailing(tmp_path, idx_pair):
    (tmp_path / "short").write_bytes(idx_bytes(0x803, (2, 2, 3), [0] * 11))
    with pytest.raises(FormatError, match="truncated payload at byte 27"):
        load_idx(tmp_path / "short", idx_pair[1])
    (tmp_path / "hdr").write_bytes(struct.pack(">I", 0x803) + b"\x00\x00")
    with pytest.raises(FormatError, match="truncated header"):
        load_idx(tmp_path / "hdr", idx_pair[1])
    (tmp_path / "long").write_bytes(idx_bytes(0x803, (2, 2, 3), [0] * 13))
    with pytest.raises(FormatError, match="trailing"):
        load_idx(tmp_path / "long", idx_pair[1])
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(FormatError, match="byte 0"):
        load_idx(tmp_path / "empty", idx_pair[1])


def test_idx_count_mismatch(tmp_path, idx_pair):
    (tmp_path / "lab3").write_bytes(idx_bytes(0x801, (3,), [1, 2, 3]))
    with pytest.raises(FormatError, match="2 images but"):
        load_idx(idx_pair[0], tmp_path / "lab3")


def write_csv(path, text):
    path.write_text(text)
    return path


def test_csv_fixture_zscores(tmp_path):
    path = write_csv(tmp_path / "d.csv", "x1,c,y,x2\n1,5,10,2\n2,5,20,4\n3,5,30,9\n")
    ds = load_csv_regression(path, "y")
    std1 = np.sqrt(2 / 3)
    np.testing.assert_allclose(ds.features[:, 0], [-1 / std1, 0, 1 / std1], rtol=1e-14)
    # constant column: centered, scale 1
    np.testing.assert_array_equal(ds.features[:, 1], [0, 0, 0])
    mean2, std2 = 5.0, np.sqrt(((2 - 5) ** 2 + (4 - 5) ** 2 + (9 - 5) ** 2) / 3)
    np.testing.assert_allclose(ds.features[:, 2], (np.array([2, 4, 9]) - mean2) / std2, rtol=1e-14)
    np.testing.assert_array_equal(ds.targets, [[10], [20], [30]])
    assert ds.metadata["feature_columns"] == ["x1", "c", "x2"]
    assert ds.metadata["normalization"]["scale"][1] == 1.0


def test_csv_errors(tmp_path):
    with pytest.raises(FormatError, match="row 3, column 'b'"):
        load_csv_regression(write_csv(tmp_path / "a.csv", "a,b\n1,2\n3,x\n"), "a")
    with pytest.raises(FormatError, match="not in header"):
        load_csv_regression(write_csv(tmp_path / "b.csv", "a,b\n1,2\n"), "y")
    with pytest.raises(FormatError, match="empty"):
        load_csv_regression(write_csv(tmp_path / "c.csv", ""), "y")
    with pytest.raises(FormatError, match="row 2 has 1 cells"):
        load_csv_regression(write_csv(tmp_path / "d.csv", "a,b\n1\n"), "a")


@given(st.integers(0, 1000))
def test_normalization_round_trip(seed):
    X = np.random.default_rng(seed).normal(3.0, 5.0, (10, 3))
    norm = zscore(X)
    np.testing.assert_allclose(norm.invert(norm.apply(X)), X, rtol=1e-12, atol=1e-12)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset([[np.inf]], [1], 2)
    with pytest.raises(ValueError):
        Dataset([[0.0], [1.0]], [1, 3], 2)
    with pytest.raises(ValueError):
        Dataset([[0.0], [1.0]], [[1.0]])
    ds = Dataset([[0.0, 1.0]], [2], 3).with_bias()
    np.testing.assert_array_equal(ds.features, [[0.0, 1.0, 1.0]])


def test_teacher_realizable_case():
    spec = TeacherSpec(n_teacher=5, d_x=3, d_y=2, noise_std=0.0, seed=4)
    ds = synth_teacher_regression(spec, 50, 1.0, stream(0, 1))
    teacher = TeacherDistribution(spec)
    tiny = softplus_inverse(1e-12)
    student = VariationalPosterior(teacher.a, np.full_like(teacher.a, tiny), teacher.b, np.full_like(teacher.b, tiny))
    value, _ = estimate_data_term(student, ds.features, ds.targets, Loss.SQUARE, Activation.RELU, 1, 0)
    assert value == pytest.approx(0.0, abs=1e-18)


def test_teacher_determinism_and_noise_level():
    spec = TeacherSpec(noise_std=0.3, seed=2)
    a = synth_teacher_regression(spec, 20, 1.0, stream(5, 1))
    b = synth_teacher_regression(spec, 20, 1.0, stream(5, 1))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.targets, b.targets)
    teacher = TeacherDistribution(spec)
    X, Y = teacher.sample(50_000, stream(0, 2))
    resid = Y - teacher.mean_function(X)
    assert resid.var() == pytest.approx(0.09, rel=0.03)
    with pytest.raises(ValueError):
        TeacherSpec(noise_std=-1.0)


def test_blobs_counts_determinism_and_validation():
    ds = synth_blobs(30, 3, 2, 2.0, stream(0, 1))
    assert np.bincount(ds.targets).tolist() == [0, 30, 30, 30]
    again = synth_blobs(30, 3, 2, 2.0, stream(0, 1))
    np.testing.assert_array_equal(ds.features, again.features)
    with pytest.raises(ValueError):
        synth_blobs(10, 2, 2, 0.0, stream(0, 1))
    with pytest.raises(ValueError):
        synth_blobs(10, 5, 2, 1.0, stream(0, 1))


def test_blobs_linearly_separable_by_lda():
    ds = synth_blobs(500, 2, 3, 10.0, stream(1, 1))
    X, y = ds.features, ds.targets
    m1, m2 = X[y == 1].mean(0), X[y == 2].mean(0)
    S = np.cov(X[y == 1].T) + np.cov(X[y == 2].T)
    w = np.linalg.solve(S, m2 - m1)
    c = w @ (m1 + m2) / 2
    pred = np.where(X @ w > c, 2, 1)
    assert np.mean(pred == y) > 0.99


def test_split_disjoint_exhaustive():
    ds = synth_blobs(10, 2, 2, 1.0, stream(0, 1))
    train, test = split(ds, 0.75, stream(0, 2))
    assert train.p == 15 and test.p == 5
    rows = np.vstack([train.features, test.features])
    assert sorted(map(tuple, rows)) == sorted(map(tuple, ds.features))
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            split(ds, bad, 0)
    with pytest.raises(ValueError):
        split(Dataset([[0.0], [1.0]], [1, 2], 2), 0.1, 0)


@given(st.integers(1, 60), st.data())
def test_partition_cells(p, data):
    L = data.draw(st.integers(1, p))
    cells = partition_indices(p, L, np.random.default_rng(p))
    assert len(cells) == L
    sizes = [c.size for c in cells]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(np.concatenate(cells).tolist()) == list(range(p))


def test_batches_edge_cases():
    ds = synth_blobs(3, 2, 2, 1.0, stream(0, 1))
    whole = batches(ds, 1, 0)
    assert len(whole) == 1 and sorted(map(tuple, whole[0].features)) == sorted(map(tuple, ds.features))
    assert all(b.p == 1 for b in batches(ds, ds.p, 0))
    with pytest.raises(ValueError):
        batches(ds, ds.p + 1, 0)
