import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sroc_lab.errors import NonFiniteError, NpyFormatError, ShapeMismatchError
from sroc_lab.manifest import SampleRecord, save_manifest
from sroc_lab.tensors import (
    EmbeddingSet,
    FeatureLevel,
    align_and_concat,
    concat_pooled_levels,
    global_average_pool,
    load_array_npy,
    load_embedding_set,
    save_array_npy,
)

from conftest import make_set, write_fixture


# ---------------------------------------------------------------------------
# NPY serialization


def test_npy_header_is_128_bytes_for_tiny_tensor(tmp_path):
    path = tmp_path / "tiny.npy"
    save_array_npy(np.array([[0.0]], dtype=np.float32), path)
    blob = path.read_bytes()
    assert len(blob) == 128 + 4
    # numpy itself is the format oracle
    arr = np.load(path)
    assert arr.shape == (1, 1) and arr.dtype == np.float32


def test_npy_zero_tensor_roundtrip(tmp_path):
    arr = np.zeros((2, 3), dtype=np.float32)
    path = tmp_path / "z.npy"
    save_array_npy(arr, path)
    np.testing.assert_array_equal(load_array_npy(path), arr)


def test_npy_write_then_numpy_reads_identically(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((4, 5, 6, 7)).astype(np.float32)
    path = tmp_path / "a.npy"
    save_array_npy(arr, path)
    np.testing.assert_array_equal(np.load(path), arr)  # oracle: numpy reader
    np.testing.assert_array_equal(load_array_npy(path), arr)


def test_npy_numpy_write_then_our_reader(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((3, 2, 2, 5)).astype(np.float32)
    path = tmp_path / "b.npy"
    np.save(path, arr)  # oracle: numpy writer
    np.testing.assert_array_equal(load_array_npy(path), arr)


@settings(max_examples=30, deadline=None)
@given(
    shape=st.lists(st.integers(1, 6), min_size=1, max_size=4),
    seed=st.integers(0, 2**31),
)
def test_npy_roundtrip_bit_exact(tmp_path_factory, shape, seed):
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal(shape).astype(np.float32)
    path = tmp_path_factory.mktemp("npy") / "r.npy"
    save_array_npy(arr, path)
    back = load_array_npy(path)
    assert back.dtype == np.float32
    assert back.tobytes() == arr.tobytes()


def test_npy_large_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    arr = rng.standard_normal((100, 100, 100)).astype(np.float32)  # 1e6 elems
    path = tmp_path / "big.npy"
    save_array_npy(arr, path)
    assert load_array_npy(path).tobytes() == arr.tobytes()


def test_npy_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "bad.npy"
    path.write_bytes(b"NOTNPY" + b"\x00" * 64)
    with pytest.raises(NpyFormatError) as exc:
        load_array_npy(path)
    assert exc.value.offset == 0


def test_npy_truncated_data_reports_offset(tmp_path):
    path = tmp_path / "trunc.npy"
    save_array_npy(np.ones((4, 4), dtype=np.float32), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(NpyFormatError) as exc:
        load_array_npy(path)
    assert exc.value.offset == 128  # data section start


def test_npy_garbled_header_dict(tmp_path):
    path = tmp_path / "garbled.npy"
    save_array_npy(np.ones((2, 2), dtype=np.float32), path)
    blob = bytearray(path.read_bytes())
    blob[12] = ord("#")
    path.write_bytes(bytes(blob))
    with pytest.raises(NpyFormatError):
        load_array_npy(path)


def test_save_rejects_empty():
    with pytest.raises(ValueError):
        save_array_npy(np.zeros((0, 3), dtype=np.float32), "/tmp/never.npy")


# ---------------------------------------------------------------------------
# load_embedding_set


def test_load_embedding_set_consistent(tmp_path):
    rng = np.random.default_rng(2)
    manifest, paths = write_fixture(tmp_path, rng, 3, [(2, 2, 3), (1, 1, 4)])
    eset = load_embedding_set(manifest, paths)
    assert eset.n == 3
    assert [lvl.channels for lvl in eset.levels] == [3, 4]
    assert eset.sample_ids == ("s000", "s001", "s002")


def test_load_embedding_set_n_mismatch(tmp_path):
    rng = np.random.default_rng(3)
    manifest, paths = write_fixture(tmp_path, rng, 3, [(2, 2, 3)])
    extra = tmp_path / "bad.npy"
    save_array_npy(rng.standard_normal((4, 2, 2, 3)).astype(np.float32), extra)
    with pytest.raises(ShapeMismatchError) as exc:
        load_embedding_set(manifest, [paths[0], extra])
    assert "bad.npy" in str(exc.value)


def test_load_embedding_set_rejects_nan(tmp_path):
    rng = np.random.default_rng(4)
    manifest, paths = write_fixture(tmp_path, rng, 2, [(2, 2, 2)])
    arr = load_array_npy(paths[0])
    arr[1, 0, 1, 0] = np.nan
    save_array_npy(arr, paths[0])
    with pytest.raises(NonFiniteError) as exc:
        load_embedding_set(manifest, paths)
    assert "(1, 0, 1, 0)" in str(exc.value)


def test_manifest_count_must_match(tmp_path):
    rng = np.random.default_rng(5)
    manifest, paths = write_fixture(tmp_path, rng, 3, [(2, 2, 3)])
    records = [SampleRecord(id=f"x{i}", split="train") for i in range(5)]
    save_manifest(records, manifest)
    with pytest.raises(ShapeMismatchError):
        load_embedding_set(manifest, paths)


# ---------------------------------------------------------------------------
# Pooling


def test_gap_constant_tensor():
    lvl = FeatureLevel(0, np.full((2, 3, 4, 5), 2.5, dtype=np.float32))
    np.testing.assert_allclose(global_average_pool(lvl), 2.5)


def test_gap_degenerate_grid_is_identity():
    rng = np.random.default_rng(6)
    data = rng.standard_normal((4, 1, 1, 7)).astype(np.float32)
    lvl = FeatureLevel(0, data)
    np.testing.assert_array_equal(
        global_average_pool(lvl), data[:, 0, 0, :].astype(np.float64)
    )


def test_gap_matches_double_loop():
    rng = np.random.default_rng(7)
    data = rng.standard_normal((2, 3, 3, 4)).astype(np.float32)
    got = global_average_pool(FeatureLevel(0, data))
    expected = np.zeros((2, 4))
    for n in range(2):
        for c in range(4):
            acc = 0.0
            for i in range(3):
                for j in range(3):
                    acc += float(data[n, i, j, c])
            expected[n, c] = acc / 9.0
    np.testing.assert_allclose(got, expected, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_gap_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    y = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    lhs = global_average_pool(FeatureLevel(0, (a * x + b * y).astype(np.float32)))
    rhs = a * global_average_pool(FeatureLevel(0, x)) + b * global_average_pool(
        FeatureLevel(0, y)
    )
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)


def test_concat_single_level_equals_gap():
    rng = np.random.default_rng(8)
    eset = make_set(rng, 3, [(2, 2, 4)])
    np.testing.assert_array_equal(
        concat_pooled_levels(eset), global_average_pool(eset.levels[0])
    )


def test_concat_blockwise_ordering():
    rng = np.random.default_rng(9)
    eset = make_set(rng, 2, [(2, 2, 2), (3, 3, 3)])
    pooled = concat_pooled_levels(eset)
    assert pooled.shape == (2, 5)
    np.testing.assert_array_equal(pooled[:, :2], global_average_pool(eset.levels[0]))
    np.testing.assert_array_equal(pooled[:, 2:], global_average_pool(eset.levels[1]))


def test_concat_three_levels_compositional():
    rng = np.random.default_rng(10)
    eset = make_set(rng, 4, [(2, 3, 2), (4, 4, 3), (1, 2, 4)])
    pooled = concat_pooled_levels(eset)
    offset = 0
    for lvl in eset.levels:
        np.testing.assert_array_equal(
            pooled[:, offset : offset + lvl.channels], global_average_pool(lvl)
        )
        offset += lvl.channels
    assert eset.pooled is pooled  # cached


# ---------------------------------------------------------------------------
# Alignment


def test_align_single_level_unchanged():
    rng = np.random.default_rng(11)
    eset = make_set(rng, 2, [(3, 3, 4)])
    grid = align_and_concat(eset)
    np.testing.assert_array_equal(grid.data, eset.levels[0].data)


def test_align_replicates_2x2_blocks():
    data = np.arange(2 * 2 * 2 * 1, dtype=np.float32).reshape(2, 2, 2, 1)
    fine = np.zeros((2, 4, 4, 1), dtype=np.float32)
    eset = EmbeddingSet(
        sample_ids=("a", "b"),
        levels=(FeatureLevel(0, fine), FeatureLevel(1, data)),
    )
    grid = align_and_concat(eset)
    assert grid.data.shape == (2, 4, 4, 2)
    coarse_up = grid.data[..., 1]
    for i in range(4):
        for j in range(4):
            np.testing.assert_array_equal(
                coarse_up[:, i, j], data[:, i // 2, j // 2, 0]
            )


def test_align_concat_matches_manual_assembly():
    rng = np.random.default_rng(12)
    eset = make_set(rng, 3, [(4, 4, 2), (2, 2, 3)])
    grid = align_and_concat(eset)
    assert (grid.height, grid.width, grid.channels) == (4, 4, 5)
    a, b = eset.levels
    for n in range(3):
        for i in range(4):
            for j in range(4):
                expected = np.concatenate(
                    [a.data[n, i, j], b.data[n, i // 2, j // 2]]
                )
                np.testing.assert_array_equal(grid.data[n, i, j], expected)


def test_align_preserves_replication_weighted_sums():
    rng = np.random.default_rng(13)
    eset = make_set(rng, 2, [(4, 4, 1), (2, 2, 2)])
    grid = align_and_concat(eset)
    # each coarse patch appears in a 2x2 block of the fine grid
    coarse_sum = eset.levels[1].data.sum(axis=(1, 2), dtype=np.float64)
    fine_sum = grid.data[..., 1:].sum(axis=(1, 2), dtype=np.float64) / 4.0
    np.testing.assert_allclose(fine_sum, coarse_sum, rtol=1e-6)


# ---------------------------------------------------------------------------
# Subsetting


def test_subset_reorders_everything():
    rng = np.random.default_rng(14)
    eset = make_set(rng, 5, [(2, 2, 3)])
    concat_pooled_levels(eset)
    sub = eset.subset([3, 0])
    assert sub.sample_ids == ("s003", "s000")
    np.testing.assert_array_equal(sub.levels[0].data[0], eset.levels[0].data[3])
    np.testing.assert_array_equal(sub.pooled[1], eset.pooled[0])
