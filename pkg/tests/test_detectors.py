import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sroc_lab.detectors import (
    DetectorConfig,
    DetectorKind,
    fit,
    image_scores,
    render_pixel_map,
    resize_bilinear,
    score_knn,
    score_mahalanobis,
    score_padim,
    score_patchcore,
    score_set,
)
from sroc_lab.errors import ConfigError, InsufficientDataError
from sroc_lab.gaussian import ledoit_wolf, mahalanobis_distance
from sroc_lab.tensors import (
    EmbeddingSet,
    FeatureLevel,
    align_and_concat,
    concat_pooled_levels,
    global_average_pool,
)

from conftest import make_set


def patchcore_cfg(**kw):
    kw.setdefault("kind", DetectorKind.PATCHCORE)
    return DetectorConfig(**kw)


# ---------------------------------------------------------------------------
# Config


def test_config_round_trip():
    cfg = DetectorConfig.from_json('{"kind": "padim", "k": 3}')
    assert cfg.kind is DetectorKind.PADIM and cfg.k == 3
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        DetectorConfig.from_dict({"kind": "knn", "bogus": 1})


def test_kind_parse():
    assert DetectorKind.parse("PatchCore") is DetectorKind.PATCHCORE
    with pytest.raises(ConfigError):
        DetectorKind.parse("svm")


# ---------------------------------------------------------------------------
# Fitting errors


def test_padim_needs_two_samples():
    rng = np.random.default_rng(0)
    train = make_set(rng, 1, [(2, 2, 3)])
    with pytest.raises(InsufficientDataError, match="PADIM"):
        fit(DetectorKind.PADIM, train)


def test_knn_k_exceeding_train_size():
    rng = np.random.default_rng(1)
    train = make_set(rng, 3, [(2, 2, 3)])
    with pytest.raises(InsufficientDataError, match="KNN"):
        fit(DetectorKind.KNN, train, DetectorConfig(kind=DetectorKind.KNN, k=5))


def test_patchcore_bank_size():
    rng = np.random.default_rng(2)
    train = make_set(rng, 4, [(3, 2, 2), (3, 2, 3)])
    det = fit(DetectorKind.PATCHCORE, train, patchcore_cfg(k=2))
    assert det.payload.bank.size == 4 * 3 * 2


# ---------------------------------------------------------------------------
# KNN / SPADE


def test_knn_training_image_scores_zero_with_k1():
    rng = np.random.default_rng(3)
    train = make_set(rng, 4, [(2, 2, 3)])
    det = fit(DetectorKind.KNN, train, DetectorConfig(kind=DetectorKind.KNN, k=1))
    pooled = concat_pooled_levels(train)
    m = score_knn(det, pooled[2])
    assert m.image_score == pytest.approx(0.0, abs=1e-12)


def test_knn_hand_case():
    # train pooled vectors (0,) and (2,): query at 1 -> (1+1)/2 = 1
    data = np.zeros((2, 1, 1, 1), dtype=np.float32)
    data[1] = 2.0
    train = EmbeddingSet(sample_ids=("a", "b"), levels=(FeatureLevel(0, data),))
    det = fit(DetectorKind.KNN, train, DetectorConfig(kind=DetectorKind.KNN, k=2))
    m = score_knn(det, np.array([1.0]))
    assert m.image_score == pytest.approx(1.0)


def brute_knn_score(train_pooled, y, k):
    d2 = np.sort(((train_pooled - y) ** 2).sum(axis=1))
    return d2[:k].mean()


def test_knn_matches_formula_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(6, 30))
        train = make_set(rng, n, [(2, 3, 4), (1, 1, 5)])
        det = fit(DetectorKind.KNN, train)
        pooled = concat_pooled_levels(train)
        y_set = make_set(rng, 3, [(2, 3, 4), (1, 1, 5)])
        y_pooled = concat_pooled_levels(y_set)
        for i in range(3):
            got = score_knn(det, y_pooled[i]).image_score
            assert got == pytest.approx(brute_knn_score(pooled, y_pooled[i], 5), rel=1e-10)


def test_spade_pixel_map_oracle():
    rng = np.random.default_rng(5)
    train = make_set(rng, 8, [(4, 4, 3), (2, 2, 2)])
    det = fit(DetectorKind.KNN, train, DetectorConfig(kind=DetectorKind.KNN, k=3))
    test = make_set(rng, 1, [(4, 4, 3), (2, 2, 2)])
    pooled_train = concat_pooled_levels(train)
    pooled_test = concat_pooled_levels(test)
    y_levels = [lvl.data[0] for lvl in test.levels]
    m = score_knn(det, pooled_test[0], y_levels=y_levels)

    # oracle: retrieve neighbors by pooled distance, average per-position
    # squared distances per level, upsample bilinearly to the fine grid, sum
    d2 = ((pooled_train - pooled_test[0]) ** 2).sum(axis=1)
    neighbor_rows = np.argsort(d2, kind="stable")[:3]
    expected = np.zeros((4, 4))
    for lvl, y_feat in zip(train.levels, y_levels):
        per_level = np.zeros(lvl.data.shape[1:3])
        for i in range(lvl.data.shape[1]):
            for j in range(lvl.data.shape[2]):
                acc = 0.0
                for r in neighbor_rows:
                    diff = lvl.data[r, i, j].astype(np.float64) - y_feat[i, j]
                    acc += (diff**2).sum()
                per_level[i, j] = acc / 3
        expected += resize_bilinear(per_level, (4, 4))
    np.testing.assert_allclose(m.grid_scores, expected, rtol=1e-8)


def test_knn_duplicate_training_image_never_raises_score():
    rng = np.random.default_rng(6)
    train = make_set(rng, 6, [(2, 2, 3)])
    dup = train.subset([0, 1, 2, 3, 4, 5, 0])
    test = make_set(rng, 5, [(2, 2, 3)])
    det_a = fit(DetectorKind.KNN, train)
    det_b = fit(DetectorKind.KNN, dup)
    scores_a = image_scores(score_set(det_a, test))
    scores_b = image_scores(score_set(det_b, test))
    assert (scores_b <= scores_a + 1e-12).all()


# ---------------------------------------------------------------------------
# Mahalanobis


def test_mahalanobis_zero_at_level_means():
    rng = np.random.default_rng(7)
    train = make_set(rng, 20, [(2, 2, 3), (1, 1, 4)])
    det = fit(DetectorKind.MAHALANOBIS, train)
    y_levels = [gm.mean for gm in det.payload.level_models]
    assert score_mahalanobis(det, y_levels).image_score == pytest.approx(0.0, abs=1e-10)


def test_mahalanobis_single_level_equals_distance():
    rng = np.random.default_rng(8)
    train = make_set(rng, 15, [(2, 2, 4)])
    det = fit(DetectorKind.MAHALANOBIS, train)
    y = rng.standard_normal(4)
    expected = mahalanobis_distance(det.payload.level_models[0], y)
    assert score_mahalanobis(det, [y]).image_score == pytest.approx(expected, rel=1e-12)


def test_mahalanobis_sums_levels():
    rng = np.random.default_rng(9)
    train = make_set(rng, 25, [(2, 2, 3), (3, 3, 2), (1, 1, 5)])
    det = fit(DetectorKind.MAHALANOBIS, train)
    ys = [rng.standard_normal(c) for c in (3, 2, 5)]
    expected = sum(
        mahalanobis_distance(gm, y) for gm, y in zip(det.payload.level_models, ys)
    )
    assert score_mahalanobis(det, ys).image_score == pytest.approx(expected, rel=1e-12)


def test_mahalanobis_fit_equals_gap_ledoit():
    rng = np.random.default_rng(10)
    train = make_set(rng, 12, [(3, 3, 4)])
    det = fit(DetectorKind.MAHALANOBIS, train)
    direct = ledoit_wolf(global_average_pool(train.levels[0]))
    np.testing.assert_allclose(
        det.payload.level_models[0].covariance, direct.covariance, rtol=1e-12
    )


# ---------------------------------------------------------------------------
# PaDiM


def test_padim_zero_at_cell_means():
    rng = np.random.default_rng(11)
    train = make_set(rng, 10, [(2, 2, 3)])
    det = fit(DetectorKind.PADIM, train)
    grid = np.stack(
        [gm.mean for gm in det.payload.cell_models]
    ).reshape(2, 2, 3)
    m = score_padim(det, grid)
    assert m.image_score == pytest.approx(0.0, abs=1e-10)


def test_padim_matches_cellwise_oracle():
    rng = np.random.default_rng(12)
    train = make_set(rng, 14, [(3, 2, 2), (3, 2, 3)])
    det = fit(DetectorKind.PADIM, train)
    test = make_set(rng, 2, [(3, 2, 2), (3, 2, 3)])
    y_grid = align_and_concat(test).data[1]
    m = score_padim(det, y_grid)
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            gm = det.payload.cell_models[i * 2 + j]
            expected[i, j] = mahalanobis_distance(gm, y_grid[i, j])
    np.testing.assert_allclose(m.grid_scores, expected, rtol=1e-10)
    assert m.image_score == pytest.approx(expected.max(), rel=1e-12)


def test_padim_image_score_is_grid_max():
    rng = np.random.default_rng(13)
    train = make_set(rng, 9, [(2, 2, 4)])
    det = fit(DetectorKind.PADIM, train)
    test = make_set(rng, 4, [(2, 2, 4)])
    for m in score_set(det, test):
        assert m.image_score == m.grid_scores.max()


# ---------------------------------------------------------------------------
# PatchCore


def test_patchcore_self_match_scores_zero():
    rng = np.random.default_rng(14)
    train = make_set(rng, 5, [(2, 2, 3)])
    det = fit(
        DetectorKind.PATCHCORE,
        train,
        patchcore_cfg(k=1, nlist=1),
    )
    y_grid = align_and_concat(train).data[3]
    m = score_patchcore(det, y_grid)
    assert m.image_score == pytest.approx(0.0, abs=1e-12)


def test_patchcore_single_vector_bank():
    data = np.full((1, 1, 1, 2), 1.5, dtype=np.float32)
    train = EmbeddingSet(sample_ids=("only",), levels=(FeatureLevel(0, data),))
    det = fit(DetectorKind.PATCHCORE, train, patchcore_cfg(k=1, nlist=1))
    patch = np.array([[[3.0, 1.5]]])
    m = score_patchcore(det, patch)
    assert m.image_score == pytest.approx(2.25)  # (3-1.5)^2


def test_patchcore_matches_exact_oracle():
    rng = np.random.default_rng(15)
    train = make_set(rng, 6, [(3, 3, 2), (1, 1, 3)])
    det = fit(
        DetectorKind.PATCHCORE,
        train,
        patchcore_cfg(k=5, nlist=2, nprobe=2),  # exhaustive probing
    )
    test = make_set(rng, 2, [(3, 3, 2), (1, 1, 3)])
    grid = align_and_concat(test).data
    bank_vectors = det.payload.bank.vectors
    for s in range(2):
        m = score_patchcore(det, grid[s])
        expected = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                d2 = np.sort(((bank_vectors - grid[s, i, j]) ** 2).sum(axis=1))
                expected[i, j] = d2[:5].mean()
        np.testing.assert_allclose(m.grid_scores, expected, rtol=1e-10)
        assert m.image_score == pytest.approx(expected.max(), rel=1e-12)


# ---------------------------------------------------------------------------
# score_set plumbing


def test_score_set_empty():
    rng = np.random.default_rng(16)
    train = make_set(rng, 5, [(2, 2, 3)])
    det = fit(DetectorKind.KNN, train)
    empty = train.subset([])
    assert score_set(det, empty) == []


def test_score_set_matches_single_calls():
    rng = np.random.default_rng(17)
    train = make_set(rng, 8, [(2, 2, 3), (1, 1, 2)])
    test = make_set(rng, 4, [(2, 2, 3), (1, 1, 2)])
    det = fit(DetectorKind.MAHALANOBIS, train)
    batch = score_set(det, test)
    gaps = [global_average_pool(lvl) for lvl in test.levels]
    for i, m in enumerate(batch):
        single = score_mahalanobis(det, [g[i] for g in gaps])
        assert m.image_score == pytest.approx(single.image_score, rel=1e-12)


def test_all_kinds_nonnegative_finite():
    rng = np.random.default_rng(18)
    train = make_set(rng, 10, [(2, 2, 3), (1, 1, 4)])
    test = make_set(rng, 6, [(2, 2, 3), (1, 1, 4)])
    for kind in DetectorKind:
        det = fit(kind, train, DetectorConfig(kind=kind, k=3))
        scores = image_scores(score_set(det, test))
        assert np.isfinite(scores).all() and (scores >= 0).all()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_knn_invariant_under_train_permutation(seed):
    rng = np.random.default_rng(seed)
    train = make_set(rng, 9, [(2, 2, 3)])
    test = make_set(rng, 3, [(2, 2, 3)])
    perm = rng.permutation(9)
    det_a = fit(DetectorKind.KNN, train, DetectorConfig(kind=DetectorKind.KNN, k=3))
    det_b = fit(
        DetectorKind.KNN, train.subset(perm), DetectorConfig(kind=DetectorKind.KNN, k=3)
    )
    np.testing.assert_allclose(
        image_scores(score_set(det_a, test)),
        image_scores(score_set(det_b, test)),
        rtol=1e-12,
    )


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_gaussian_kinds_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    n, c = 20, 4
    data = rng.standard_normal((n, 1, 1, c)).astype(np.float32)
    test_data = rng.standard_normal((5, 1, 1, c)).astype(np.float32)
    Q, _ = np.linalg.qr(rng.standard_normal((c, c)))

    def eset(arr):
        return EmbeddingSet(
            sample_ids=tuple(f"s{i}" for i in range(arr.shape[0])),
            levels=(FeatureLevel(0, arr.astype(np.float32)),),
        )

    for kind in (DetectorKind.MAHALANOBIS, DetectorKind.PADIM):
        plain = image_scores(
            score_set(fit(kind, eset(data)), eset(test_data))
        )
        rotated = image_scores(
            score_set(fit(kind, eset(data @ Q)), eset(test_data @ Q))
        )
        np.testing.assert_allclose(rotated, plain, rtol=1e-5)


# ---------------------------------------------------------------------------
# Rendering


def test_resize_bilinear_identity():
    rng = np.random.default_rng(19)
    a = rng.standard_normal((5, 7))
    np.testing.assert_allclose(resize_bilinear(a, (5, 7)), a, rtol=1e-12)


def test_resize_bilinear_constant():
    a = np.full((3, 3), 2.0)
    np.testing.assert_allclose(resize_bilinear(a, (9, 12)), 2.0)


def test_resize_never_exceeds_range():
    rng = np.random.default_rng(20)
    a = rng.standard_normal((4, 4))
    up = resize_bilinear(a, (13, 9))
    assert up.max() <= a.max() + 1e-12 and up.min() >= a.min() - 1e-12


def test_render_smoothing_preserves_mean_roughly():
    rng = np.random.default_rng(21)
    grid = rng.random((6, 6))
    rendered = render_pixel_map(grid, (24, 24), smooth_sigma=2.0)
    assert rendered.shape == (24, 24)
    assert rendered.mean() == pytest.approx(
        resize_bilinear(grid, (24, 24)).mean(), rel=0.05
    )
