import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg
from sklearn.metrics.pairwise import polynomial_kernel

from triadapt.metrics import FeatureExtractor, extract_features, fid, geometry_error, kid, kid_bootstrap_se
from triadapt.renderer import gaussian_blur


def _fid_sqrtm(a, b):
    # independent route: matrix square root of the product
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = linalg.sqrtm(ca @ cb).real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2 * covmean))


def test_fid_matches_sqrtm_route(rng):
    a = rng.normal(size=(400, 6))
    b = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6)) * 0.5 + 0.3
    assert fid(a, b) == pytest.approx(_fid_sqrtm(a, b), rel=1e-8, abs=1e-9)


def test_fid_gaussian_closed_form():
    # oracle: isotropic Gaussians N(0, I) and N(m, s^2 I): |m|^2 + d (1 - s)^2
    rng = np.random.default_rng(3)
    d, s = 4, 2.0
    m = np.array([1.0, -0.5, 0.0, 0.25])
    a = rng.normal(size=(200_000, d))
    b = m + s * rng.normal(size=(200_000, d))
    assert fid(a, b) == pytest.approx(np.sum(m**2) + d * (1 - s) ** 2, rel=0.01)


def test_fid_self_is_zero_and_validation(rng):
    a = rng.normal(size=(50, 8))
    assert fid(a, a) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        fid(a, rng.normal(size=(50, 7)))
    with pytest.raises(ValueError):
        fid(a[:1], a)


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(3, 40), st.integers(3, 40))
def test_fid_symmetric_nonnegative(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 5)), rng.normal(size=(m, 5)) + 0.2
    f = fid(a, b)
    assert f >= 0.0
    assert f == pytest.approx(fid(b, a), rel=1e-9, abs=1e-9)


def _kid_loops(x, y):
    # independent route: explicit pair sums with sklearn's polynomial kernel
    d = x.shape[1]
    k = lambda u, v: polynomial_kernel(u, v, degree=3, gamma=1.0 / d, coef0=1.0)
    kxx, kyy, kxy = k(x, x), k(y, y), k(x, y)
    m, n = len(x), len(y)
    sxx = sum(kxx[i, j] for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(kyy[i, j] for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    return sxx + syy - 2 * kxy.mean()


def test_kid_matches_pairwise_loops(rng):
    x, y = rng.normal(size=(30, 4)), rng.normal(size=(25, 4)) + 0.5
    assert kid(x, y) == pytest.approx(_kid_loops(x, y), rel=1e-10)


def test_kid_blocks_and_symmetry(rng):
    x, y = rng.normal(size=(90, 4)), rng.normal(size=(70, 4)) + 0.1
    blocks = np.mean([_kid_loops(x[k * 30:(k + 1) * 30], y[k * 30:(k + 1) * 30]) for k in range(2)])
    assert kid(x, y, block_size=30) == pytest.approx(blocks, rel=1e-10)
    assert kid(x, y, block_size=30) == pytest.approx(kid(y, x, block_size=30), rel=1e-12)


def test_kid_unbiased_near_zero_for_same_distribution():
    rng = np.random.default_rng(0)
    vals = [kid(rng.normal(size=(100, 4)), rng.normal(size=(100, 4))) for _ in range(200)]
    assert abs(np.mean(vals)) < 3 * np.std(vals) / np.sqrt(len(vals))


def test_kid_bootstrap_se_positive(rng):
    x, y = rng.normal(size=(40, 3)), rng.normal(size=(40, 3)) + 1.0
    assert kid_bootstrap_se(x, y, n_boot=20) > 0


def test_feature_extractor_deterministic_and_seeded(rng):
    images = rng.random((5, 3, 16, 16)).astype(np.float32)
    a = FeatureExtractor(seed=0).fit_transform(images)
    b = extract_features(images, 0).features
    c = extract_features(images, 1).features
    assert a.shape == (5, 128) and np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert fid(extract_features(images), extract_features(images)) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError):
        FeatureExtractor().transform(np.zeros((2, 1, 16, 16), np.float32))


def test_geometry_error_oracles(rng):
    gt = rng.random((3, 16, 16)) + 2.0
    poses = rng.normal(size=(3, 2))
    shifted = [(gt[i] + 0.7 * (i + 1), poses[i] + [0.1, -0.2]) for i in range(3)]
    d_mse, p_mse = geometry_error(shifted, list(zip(gt, poses)))
    assert d_mse == pytest.approx(0.0, abs=1e-20)
    assert p_mse == pytest.approx(0.05)
    # without alignment or blur the error is the mean squared offset
    d_raw, _ = geometry_error(shifted, list(zip(gt, poses)), align_median=False, blur=False)
    assert d_raw == pytest.approx(np.mean([(0.7 * k) ** 2 for k in (1, 2, 3)]))
    noisy = gt + rng.normal(size=gt.shape)
    d_blur, _ = geometry_error(list(zip(noisy, poses)), list(zip(gt, poses)), align_median=False)
    expect = float(((gaussian_blur(torch_t(noisy), 15, 5.0) - gaussian_blur(torch_t(gt), 15, 5.0)) ** 2).mean())
    assert d_blur == pytest.approx(expect)
    with pytest.raises(ValueError):
        geometry_error([], [])
    with pytest.raises(ValueError):
        geometry_error(shifted[:2], list(zip(gt, poses)))


def torch_t(x):
    import torch
    return torch.as_tensor(x)
