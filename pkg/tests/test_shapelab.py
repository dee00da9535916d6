import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

import oracles
from axialinterp.shapelab import (
    SHExpansion,
    SurfacePointCloud,
    boundary_voxels,
    extract_surface,
    fit_sh,
    match_labels,
    power_spectrum,
    real_sph_harm,
    roughness,
    roughness_table,
    smoothed_iou,
    to_spherical,
)
from axialinterp.synthetic import fibonacci_sphere, labeled_ball

SQRT_4PI = math.sqrt(4 * math.pi)


def unit_directions(n=2000):
    # fibonacci_sphere gives (x, y, z); clouds are (z, y, x) with the polar axis first
    return fibonacci_sphere(n)[:, ::-1].copy()


def radial_cloud(radius_fn, n=2000) -> SurfacePointCloud:
    d = unit_directions(n)
    _, polar, az = to_spherical(d, np.zeros(3))
    return SurfacePointCloud.from_points(d * radius_fn(polar, az)[:, None])


def y30_bump(eps=0.1):
    return lambda polar, az: 1 + eps * real_sph_harm(3, 0, polar, az)


# -- surface extraction ------------------------------------------------------


def test_cube_has_26_boundary_voxels():
    m = np.zeros((7, 7, 7), int)
    m[2:5, 2:5, 2:5] = 1
    idx = boundary_voxels(m, 1)
    assert len(idx) == 26
    assert [3, 3, 3] not in idx.tolist()
    with pytest.raises(ValueError, match="26 boundary points"):
        extract_surface(m, 1)
    assert len(extract_surface(m, 1, min_points=0).points) == 26


def test_single_voxel_rejected():
    m = np.zeros((5, 5, 5), int)
    m[2, 2, 2] = 4
    with pytest.raises(ValueError, match="1 boundary"):
        extract_surface(m, 4)


def test_absent_label():
    with pytest.raises(ValueError, match="not present"):
        extract_surface(np.zeros((4, 4, 4), int), 1)


def test_two_labels_disjoint():
    m = labeled_ball((30, 30, 30), (8, 15, 15), 5, 1)
    labeled_ball((30, 30, 30), (21, 15, 15), 5, 2, out=m)
    a = {tuple(p) for p in extract_surface(m, 1).points}
    b = {tuple(p) for p in extract_surface(m, 2).points}
    assert a and b and not a & b


def test_spacing_scales_points():
    m = labeled_ball((24, 24, 24), (12, 12, 12), 6)
    p1 = extract_surface(m, 1).points
    p2 = extract_surface(m, 1, spacing=(2.0, 1.0, 0.5)).points
    np.testing.assert_allclose(p2, p1 * [2.0, 1.0, 0.5])


def test_boundary_touching_contact():
    # a voxel touching another label counts as boundary even deep inside the union
    m = np.ones((5, 9, 9), int)
    m[:, :, 5:] = 2
    idx = boundary_voxels(m, 1)
    assert ([2, 4, 4] in idx.tolist()) and ([2, 4, 2] not in idx.tolist())


# -- harmonic basis ----------------------------------------------------------


def test_basis_orthonormal_by_quadrature():
    lm = [(l, m) for l in range(6) for m in range(-l, l + 1)]
    for u in lm:
        for v in lm:
            if u > v:
                continue
            got = oracles.sphere_quadrature(lambda p, a: real_sph_harm(*u, p, a) * real_sph_harm(*v, p, a), 16, 32)
            assert got == pytest.approx(float(u == v), abs=1e-10)


# -- fitting and roughness ---------------------------------------------------


def test_unit_sphere():
    e = fit_sh(radial_cloud(lambda p, a: np.ones_like(p)))
    assert e.f00 == pytest.approx(SQRT_4PI, abs=1e-2)
    assert all(abs(v) < 1e-2 for k, v in e.coeffs.items() if k != (0, 0))
    assert e.mean_radius == pytest.approx(1.0, abs=1e-3)
    assert roughness(e) < 1e-3
    assert len(e.as_array()) == 36


def test_y30_bump():
    e = fit_sh(radial_cloud(y30_bump(0.1)))
    assert e[3, 0] == pytest.approx(0.1, abs=1e-2)
    p = power_spectrum(e)
    assert p[3] == pytest.approx(0.01 / 7, rel=0.1)
    assert roughness(e) == pytest.approx(0.01, rel=0.1)


def test_y30_bump_quadrature_cross_check():
    f = y30_bump(0.1)
    coeffs = {(l, m): oracles.sphere_quadrature(lambda p, a: f(p, a) * real_sph_harm(l, m, p, a)) for l in range(6) for m in range(-l, l + 1)}
    quad = SHExpansion(coeffs)
    fitted = fit_sh(radial_cloud(f))
    assert power_spectrum(quad)[3] == pytest.approx(0.01 / 7, rel=1e-6)
    assert roughness(fitted) == pytest.approx(roughness(quad), rel=0.1)


@settings(deadline=None, max_examples=10)
@given(st.integers(0, 10_000))
def test_rotation_invariance(seed):
    cloud = radial_cloud(y30_bump(0.1))
    rot = Rotation.random(random_state=seed).as_matrix()
    rotated = SurfacePointCloud.from_points(cloud.points @ rot.T)
    assert abs(roughness(fit_sh(rotated)) - roughness(fit_sh(cloud))) < 1e-3


@settings(deadline=None, max_examples=10)
@given(st.floats(0.01, 100))
def test_scale_invariance(c):
    cloud = radial_cloud(y30_bump(0.2))
    e1 = fit_sh(cloud)
    e2 = fit_sh(cloud.scaled(c))
    np.testing.assert_allclose(e2.as_array(), c * e1.as_array(), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(power_spectrum(e2), power_spectrum(e1), rtol=1e-9, atol=1e-15)
    assert roughness(e2) == pytest.approx(roughness(e1), rel=1e-9)


def test_spectrum_nonnegative():
    rng = np.random.default_rng(0)
    e = fit_sh(SurfacePointCloud.from_points(unit_directions() * rng.uniform(0.8, 1.2, (2000, 1))))
    assert np.all(power_spectrum(e) >= 0) and roughness(e) >= 0


def test_zero_f00_rejected():
    coeffs = {(l, m): 0.0 for l in range(6) for m in range(-l, l + 1)}
    with pytest.raises(ValueError, match="f00"):
        power_spectrum(SHExpansion(coeffs))


def test_poor_coverage_rejected():
    d = unit_directions(4000)
    cap = d[d[:, 0] > 0.9]
    with pytest.raises(ValueError, match="condition number"):
        fit_sh(SurfacePointCloud(cap, 1, np.zeros(3)))


def test_voxel_ball_table():
    m = labeled_ball((40, 40, 40), (20, 20, 20), 12, 3)
    m[1, 1, 1] = 7
    rows = {r["label"]: r for r in roughness_table(m)}
    assert rows[3]["mean_radius"] == pytest.approx(12, rel=0.1)
    assert rows[3]["Ro"] < 0.01
    assert "error" in rows[7]


# -- label matching ----------------------------------------------------------


def two_blobs(shift=0):
    m = labeled_ball((30, 30, 30), (10, 10 + shift, 10), 5, 1)
    labeled_ball((30, 30, 30), (20, 20 + shift, 20), 6, 2, out=m)
    return m


def test_match_identity():
    m = two_blobs()
    rows = match_labels(m, m)
    assert [(r.label_a, r.label_b) for r in rows] == [(1, 1), (2, 2)]
    assert all(r.vol_a == r.vol_b == r.overlap and not r.tie for r in rows)


def test_match_shifted():
    b = np.where(two_blobs(1) == 1, 5, np.where(two_blobs(1) == 2, 9, 0))
    rows = match_labels(two_blobs(), b)
    assert [(r.label_a, r.label_b) for r in rows] == [(1, 5), (2, 9)]


def test_match_tie_and_unmatched():
    a = np.zeros((1, 4, 4), int)
    b = np.zeros((1, 4, 4), int)
    a[0, 0, :2] = 1
    b[0, 0, 0] = 8
    b[0, 0, 1] = 3
    a[0, 3, 3] = 2
    rows = match_labels(a, b)
    assert rows[0].label_b == 3 and rows[0].tie
    assert rows[1].label_b is None and rows[1].unmatched


def test_match_sixteen_cells():
    m = np.zeros((4, 40, 40), int)
    for k in range(16):
        y, x = divmod(k, 4)
        m[:, y * 10 + 2 : y * 10 + 8, x * 10 + 2 : x * 10 + 8] = k + 1
    rows = match_labels(m, m)
    assert len(rows) == 16 and all(r.label_a == r.label_b for r in rows)


def test_match_shape_mismatch():
    with pytest.raises(ValueError):
        match_labels(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 10_000))
def test_match_total_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 4, (4, 5, 5))
    b = rng.integers(0, 4, (4, 5, 5))
    rows = match_labels(a, b)
    assert [r.label_a for r in rows] == sorted(set(np.unique(a)) - {0})
    assert rows == match_labels(a, b)


# -- smoothed IoU ------------------------------------------------------------


def test_iou_identical():
    m = labeled_ball((20, 20, 20), (10, 10, 10), 4)
    assert smoothed_iou(m, m) == (1.0, False)
    assert smoothed_iou(m, m, 0, 0.0)[0] == 1.0


def test_iou_disjoint():
    a = labeled_ball((40, 40, 40), (8, 8, 8), 3)
    b = labeled_ball((40, 40, 40), (31, 31, 31), 3)
    assert smoothed_iou(a, b, dilate_r=1)[0] == 0.0


def test_iou_both_empty():
    z = np.zeros((5, 5, 5))
    assert smoothed_iou(z, z) == (1.0, True)


def test_iou_partial():
    a = labeled_ball((30, 30, 30), (15, 15, 12), 6)
    b = labeled_ball((30, 30, 30), (15, 15, 18), 6)
    v, _ = smoothed_iou(a, b, dilate_r=0, sigma=0.0)
    inter = np.logical_and(a, b).sum()
    assert v == pytest.approx(inter / np.logical_or(a, b).sum())
    assert 0 < smoothed_iou(a, b)[0] < 1
