import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dejavu import matching as mt
from dejavu.features import ContractError


# --- brute-force oracles ---------------------------------------------------

def oracle_min_eigenvalues(img):
    gray = img @ np.array([0.299, 0.587, 0.114])
    h, w = gray.shape
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)

    def px(y, x):
        return gray[min(max(y, 0), h - 1), min(max(x, 0), w - 1)]

    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    gx[y, x] += kx[dy + 1, dx + 1] * px(y + dy, x + dx)
                    gy[y, x] += kx[dx + 1, dy + 1] * px(y + dy, x + dx)
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            m = np.zeros((2, 2))
            for yy in range(y - 1, y + 2):
                for xx in range(x - 1, x + 2):
                    if 0 <= yy < h and 0 <= xx < w:
                        g = np.array([gx[yy, xx], gy[yy, xx]])
                        m += np.outer(g, g)
            out[y, x] = np.linalg.eigvalsh(m)[0]
    return out


def oracle_match(src, dst, ratio):
    out = []
    for i, s in enumerate(src):
        d = [float(np.sqrt(np.sum((s - t) ** 2))) for t in dst]
        j = min(range(len(dst)), key=lambda k: d[k])
        back = [float(np.sqrt(np.sum((src[k] - dst[j]) ** 2))) for k in range(len(src))]
        if min(range(len(src)), key=lambda k: back[k]) != i:
            continue
        if len(dst) >= 2:
            second = sorted(d)[1]
            if second == 0 or d[j] / second > ratio:
                continue
        out.append((i, j))
    return out


# --- Shi-Tomasi ------------------------------------------------------------

def test_constant_image_has_no_corners():
    assert mt.shi_tomasi(np.full((12, 12, 3), 0.4)) == []


def test_square_corners():
    img = np.zeros((24, 24, 3))
    img[8:16, 8:16] = 1.0
    kps = mt.shi_tomasi(img, max_corners=4, min_distance=3.0)
    assert len(kps) == 4
    for cx, cy in [(8, 8), (15, 8), (8, 15), (15, 15)]:
        assert min(max(abs(k.x - cx), abs(k.y - cy)) for k in kps) <= 1


@pytest.mark.parametrize("seed", range(5))
def test_responses_match_oracle(seed):
    img = np.random.default_rng(seed).random((16, 16, 3))
    np.testing.assert_allclose(mt.min_eigenvalue_map(img), oracle_min_eigenvalues(img), rtol=0, atol=1e-9)


def test_corners_respect_min_distance_and_order():
    img = np.random.default_rng(9).random((20, 20, 3))
    kps = mt.shi_tomasi(img, max_corners=15, min_distance=4.0)
    assert 0 < len(kps) <= 15
    assert all(a.response >= b.response for a, b in zip(kps, kps[1:]))
    for i, a in enumerate(kps):
        for b in kps[i + 1:]:
            assert (a.x - b.x) ** 2 + (a.y - b.y) ** 2 >= 16


def test_tiny_image_rejected():
    with pytest.raises(ContractError):
        mt.shi_tomasi(np.zeros((2, 5, 3)))


# --- descriptors -----------------------------------------------------------

def test_descriptor_at_cell_centre():
    fmap = np.random.default_rng(0).normal(size=(8, 8, 5))
    # cell (2, 3) of a 4x-downsampled 32x32 image sits on pixel (13.5, 9.5)
    np.testing.assert_array_equal(mt.sample_descriptor(fmap, 13.5, 9.5, (32, 32)), fmap[2, 3])


def test_descriptor_midpoint():
    fmap = np.random.default_rng(1).normal(size=(8, 8, 5))
    np.testing.assert_allclose(mt.sample_descriptor(fmap, 15.5, 9.5, (32, 32)),
                               0.5 * (fmap[2, 3] + fmap[2, 4]), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 31), st.floats(0, 23), st.integers(0, 1000))
def test_descriptor_matches_separable_interp(x, y, seed):
    fmap = np.random.default_rng(seed).normal(size=(6, 8, 3))
    xs = (np.arange(8) + 0.5) * 4 - 0.5
    ys = (np.arange(6) + 0.5) * 4 - 0.5
    rows = np.array([[np.interp(x, xs, fmap[i, :, c]) for c in range(3)] for i in range(6)])
    expected = np.array([np.interp(y, ys, rows[:, c]) for c in range(3)])
    np.testing.assert_allclose(mt.sample_descriptor(fmap, x, y, (24, 32)), expected, atol=1e-12)


def test_descriptor_out_of_bounds():
    with pytest.raises(ContractError):
        mt.sample_descriptor(np.zeros((4, 4, 2)), 16.0, 2.0, (16, 16))


# --- matching --------------------------------------------------------------

def test_identity_matching():
    d = np.random.default_rng(2).normal(size=(10, 4))
    assert [(m.source, m.target) for m in mt.match_descriptors(d, d)] == [(i, i) for i in range(10)]


def test_equidistant_is_dropped():
    assert mt.match_descriptors([[0.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]]) == []


def test_single_candidate_skips_ratio():
    assert len(mt.match_descriptors([[0.0]], [[5.0]])) == 1


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    src, dst = rng.normal(size=(50, 6)), rng.normal(size=(50, 6))
    for ratio in (0.8, 0.95):
        got = [(m.source, m.target) for m in mt.match_descriptors(src, dst, ratio)]
        assert got == oracle_match(src, dst, ratio)


def test_mutual_nn_symmetric():
    rng = np.random.default_rng(3)
    src, dst = rng.normal(size=(40, 5)), rng.normal(size=(30, 5))
    fwd = {(m.source, m.target) for m in mt.match_descriptors(src, dst, ratio=1.0)}
    bwd = {(m.target, m.source) for m in mt.match_descriptors(dst, src, ratio=1.0)}
    assert fwd == bwd and fwd


def test_empty_descriptors_rejected():
    with pytest.raises(ContractError):
        mt.match_descriptors(np.zeros((0, 3)), np.zeros((2, 3)))


# --- RANSAC ----------------------------------------------------------------

H_TRUE = np.array([[1.05, 0.04, 3.0], [-0.03, 0.97, -2.0], [2e-4, -1e-4, 1.0]])
CORNERS = np.array([[0.0, 0.0], [63.0, 0.0], [0.0, 63.0], [63.0, 63.0]])


def planted(n, n_out, seed, noise=0.0):
    rng = np.random.default_rng(seed)
    src = rng.uniform(0, 64, size=(n, 2))
    dst = mt.apply_homography(H_TRUE, src) + rng.normal(scale=noise, size=(n, 2))
    out = rng.choice(n, n_out, replace=False)
    dst[out] += rng.uniform(15, 30, size=(n_out, 2)) * rng.choice([-1, 1], size=(n_out, 2))
    return src, dst, np.setdiff1d(np.arange(n), out)


def corner_error(h):
    return np.max(np.linalg.norm(mt.apply_homography(h, CORNERS) - mt.apply_homography(H_TRUE, CORNERS), axis=1))


def test_exact_recovery():
    src, dst, _ = planted(20, 0, 0)
    model = mt.ransac_homography(src, dst, seed=1)
    assert len(model.inliers) == 20
    assert corner_error(model.matrix) < 1e-6
    assert np.max(model.errors) < 1e-6


def test_outliers_are_removed_exactly():
    src, dst, inliers = planted(40, 12, 5)
    model = mt.ransac_homography(src, dst, iterations=1000, inlier_threshold=1.5, seed=3)
    np.testing.assert_array_equal(model.inliers, inliers)
    assert corner_error(model.matrix) < 0.5


def test_deterministic_given_seed():
    src, dst, _ = planted(30, 9, 6, noise=0.3)
    a = mt.ransac_homography(src, dst, seed=4)
    b = mt.ransac_homography(src, dst, seed=4)
    np.testing.assert_array_equal(a.matrix, b.matrix)


def test_translation_equivariance():
    src, dst, _ = planted(30, 6, 7, noise=0.3)
    t = np.array([[1, 0, 11.0], [0, 1, -4.0], [0, 0, 1]])
    a = mt.ransac_homography(src, dst, seed=2).matrix
    b = mt.ransac_homography(src, dst + [11.0, -4.0], seed=2).matrix
    expected = t @ a
    np.testing.assert_allclose(b, expected / expected[2, 2], atol=1e-6)


def test_collinear_never_yields_a_model():
    src = np.stack([np.arange(10.0), 2 * np.arange(10.0) + 1], axis=1)
    with pytest.raises(mt.NoConsensusError):
        mt.ransac_homography(src, src + 3.0, iterations=200)


def test_too_few_matches():
    with pytest.raises(ContractError):
        mt.ransac_homography(np.zeros((3, 2)), np.zeros((3, 2)))


def test_inlier_errors_within_threshold():
    src, dst, _ = planted(30, 9, 8, noise=0.4)
    model = mt.ransac_homography(src, dst, seed=0)
    assert np.all(model.errors[model.inliers] <= model.threshold)
    assert abs(np.linalg.det(model.matrix)) > 0


# --- pipeline --------------------------------------------------------------

def test_pipeline_outputs(tmp_path):
    rng = np.random.default_rng(11)
    img = np.zeros((32, 32, 3))
    for _ in range(8):
        y, x = rng.integers(0, 26, size=2)
        img[y:y + 5, x:x + 5] = rng.random(3)
    fmap = np.concatenate([img[::4, ::4], img[2::4, 2::4]], axis=2)
    result = mt.match_feature_maps(img, fmap, img, fmap)
    assert result.model is not None and len(result.model.inliers) >= 4
    mt.write_matches_csv(tmp_path / "m.csv", result)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["x1", "y1", "x2", "y2", "distance", "inlier"]
    assert len(rows) == len(result.matches) + 1
    canvas = mt.render_matches(img, img, result, scale=2)
    assert canvas.shape == (64, 128, 3)
    assert canvas.min() >= 0 and canvas.max() <= 1
