import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

import oracles
from axialinterp import evalkit
from axialinterp.evalkit import (
    InceptionFeatures,
    bicubic_z,
    feature_fid,
    fid,
    frechet_distance,
    generated_indices,
    interpolate_z,
    interstack_report,
    psnr,
    psnr_from_rmse,
    render_table,
    rmse,
    ssim,
)
from axialinterp.volio import VolumeStack, normalize_stack

from conftest import random_stack


@pytest.mark.parametrize("value,expect", [(16.68, 23.69), (19.15, 22.49)])
def test_psnr_identity(value, expect):
    assert abs(psnr_from_rmse(value) - expect) <= 0.02


def test_identical_frames():
    a = np.random.default_rng(0).integers(0, 256, (32, 32))
    assert rmse(a, a) == 0
    assert psnr(a, a) == math.inf
    assert ssim(a, a) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (48, 40)).astype(np.float64)
    b = np.clip(a + rng.normal(0, 25, a.shape), 0, 255)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=255)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2**16))
def test_ssim_symmetric_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 256, (2, 24, 24)).astype(float)
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= s < 1


# -- FID ---------------------------------------------------------------------


def test_fid_identical_sets():
    f = np.random.default_rng(0).normal(size=(200, 16))
    assert feature_fid(f, f).value < 1e-6


def test_fid_equal_covariance_closed_form():
    rng = np.random.default_rng(1)
    d = 8
    a_ = rng.normal(size=(d, d))
    cov = a_ @ a_.T / d + np.eye(d)
    m = rng.normal(size=d)
    assert frechet_distance(np.zeros(d), cov, m, cov).value == pytest.approx(m @ m, rel=1e-6)
    x = rng.multivariate_normal(np.zeros(d), cov, size=200_000)
    y = rng.multivariate_normal(m, cov, size=200_000)
    assert feature_fid(x, y).value == pytest.approx(m @ m, rel=0.01)


def test_fid_diagonal_trace_term():
    rng = np.random.default_rng(2)
    va = rng.uniform(0.5, 3.0, 6)
    vb = rng.uniform(0.5, 3.0, 6)
    got = frechet_distance(np.zeros(6), np.diag(va), np.zeros(6), np.diag(vb)).value
    assert got == pytest.approx(oracles.frechet_diagonal_trace(va, vb), rel=0.01)


def test_fid_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(300, 5)), rng.normal(0.3, 1.2, size=(300, 5))
    assert feature_fid(x, y).value == pytest.approx(feature_fid(y, x).value, rel=1e-6)
    p = rng.permutation(300)
    assert feature_fid(x[p], y[p]).value == pytest.approx(feature_fid(x, y).value, rel=1e-9)


def test_fid_jitter_flagged(monkeypatch):
    calls = []
    real_sqrtm = evalkit.scipy.linalg.sqrtm

    def flaky(m):
        calls.append(1)
        return np.full_like(m, np.nan) if len(calls) == 1 else real_sqrtm(m)

    monkeypatch.setattr(evalkit.scipy.linalg, "sqrtm", flaky)
    res = frechet_distance(np.zeros(2), np.eye(2), np.zeros(2), np.eye(2))
    assert res.jittered and res.value < 1e-5


def test_fid_needs_two_frames():
    with pytest.raises(ValueError):
        fid([np.zeros((8, 8))], [np.zeros((8, 8))] * 3, extractor=lambda fr: np.stack([f.ravel() for f in fr]))


def test_fid_with_custom_extractor():
    rng = np.random.default_rng(4)
    frames = [rng.random((4, 4)) for _ in range(30)]

    def flat(fr):
        return np.stack([np.asarray(f).ravel() for f in fr])

    value, info = fid(frames, frames, extractor=flat)
    assert value < 1e-6 and info["jittered"] is False


def test_inception_requires_weights(monkeypatch):
    monkeypatch.delenv(evalkit.FID_WEIGHTS_ENV, raising=False)
    with pytest.raises(FileNotFoundError):
        InceptionFeatures()


def test_inception_untrained_features():
    ext = InceptionFeatures(allow_untrained=True)
    feats = ext([np.random.default_rng(0).random((64, 64)) for _ in range(2)])
    assert feats.shape == (2, 2048)
    assert ext.identity()["pretrained"] is False


# -- cubic baseline ----------------------------------------------------------


def test_linear_ramp_exact():
    z = np.arange(6, dtype=float)[:, None, None] * 10 + np.zeros((6, 3, 3))
    out = interpolate_z(z, 4)
    np.testing.assert_allclose(out[:, 0, 0], np.arange(21) * 2.5, atol=1e-12)


def test_bicubic_slice_count_and_originals():
    s = random_stack(18, 32)
    out = bicubic_z(s, 8)
    assert out.depth == 137
    np.testing.assert_array_equal(out.voxels[::8], s.voxels)
    assert out.spacing[2] == pytest.approx(s.spacing[2] / 8)


def test_bicubic_symmetric():
    rng = np.random.default_rng(0)
    half = rng.integers(0, 256, (4, 8, 8))
    vol = np.concatenate([half, half[-2::-1]]).astype(np.uint8)
    out = bicubic_z(VolumeStack(vol), 4)
    np.testing.assert_array_equal(out.voxels, out.voxels[::-1])


def test_bicubic_few_slices_linear():
    s = random_stack(3, 32)
    with pytest.warns(RuntimeWarning, match="linear"):
        out = bicubic_z(normalize_stack(s), 2)
    v = normalize_stack(s).voxels
    np.testing.assert_allclose(out.voxels[1], (v[0] + v[1]) / 2, atol=1e-6)


def test_bicubic_factor_guard():
    with pytest.raises(ValueError):
        bicubic_z(random_stack(5, 32), 3)


# -- reports -----------------------------------------------------------------


def test_report_perfect_prediction():
    s = random_stack(9, 32)
    rep = interstack_report(s, s, 1)
    assert rep.rmse == 0 and rep.ssim == pytest.approx(1.0) and rep.psnr_db == math.inf
    assert all(r["ssim"] == pytest.approx(1.0) for r in rep.per_gap)
    assert '"inf"' in rep.to_json()


def test_report_137_stride_7():
    gt = random_stack(137, 32, seed=1)
    pred = random_stack(137, 32, seed=2)
    rep = interstack_report(pred, gt, 7)
    assert len(rep.per_gap) == 17
    assert all(len(r["indices"]) == 7 for r in rep.per_gap)
    scored = [k for r in rep.per_gap for k in r["indices"]]
    assert 0 not in scored and 8 not in scored and 136 not in scored
    for row in rep.per_gap:
        assert row["psnr_db"] == pytest.approx(psnr_from_rmse(row["rmse"]))
    assert rep.psnr_db == pytest.approx(psnr_from_rmse(rep.rmse))


def test_stride_one_scores_odd_indices():
    assert generated_indices(9, 1) == [1, 3, 5, 7]
    with pytest.raises(ValueError):
        generated_indices(10, 1)


def test_report_depth_mismatch():
    with pytest.raises(ValueError, match="slices"):
        interstack_report(random_stack(9, 32), random_stack(7, 32), 1)


def test_report_rmse_is_mean_of_slices():
    gt = VolumeStack(np.zeros((5, 32, 32), np.uint8))
    vox = np.zeros((5, 32, 32), np.uint8)
    vox[1] = 10
    vox[3] = 20
    rep = interstack_report(VolumeStack(vox), gt, 1)
    assert rep.rmse == pytest.approx(15.0)


def test_render_table():
    text = render_table([{"method": "Bicubic", "params": None, "train_s": None, "predict_s": 0.1, "rmse": 16.68, "psnr_db": 23.69, "ssim": 0.5}])
    assert "RMSE" in text and "Bicubic" in text and "16.68" in text


def test_report_16bit_on_8bit_scale():
    gt = VolumeStack(np.zeros((3, 32, 32), np.uint16), 16)
    vox = np.zeros((3, 32, 32), np.uint16)
    vox[1] = 65535
    assert interstack_report(VolumeStack(vox, 16), gt, 1).rmse == pytest.approx(255.0)
