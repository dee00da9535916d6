"""Shape analyses on label masks: spherical-harmonic roughness, overlap matching, smoothed IoU."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import sph_harm_y

log = logging.getLogger(__name__)

L_MAX = 5
MIN_POINTS = 50
MAX_CONDITION = 1e6
SH_CONVENTION = "real orthonormal, no Condon-Shortley phase"


@dataclass
class SurfacePointCloud:
    points: np.ndarray  # (N, 3) in (z, y, x) physical units
    label: int
    center: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")

    @classmethod
    def from_points(cls, points, label: int = 0) -> "SurfacePointCloud":
        points = np.asarray(points, dtype=np.float64)
        return cls(points, label, points.mean(axis=0))

    def scaled(self, factor: float) -> "SurfacePointCloud":
        return SurfacePointCloud(self.points * factor, self.label, self.center * factor)


@dataclass
class SHExpansion:
    coeffs: dict[tuple[int, int], float]
    l_max: int = L_MAX
    condition: float = 1.0
    residual_rms: float = 0.0

    @property
    def f00(self) -> float:
        return self.coeffs[0, 0]

    @property
    def mean_radius(self) -> float:
        return self.f00 / np.sqrt(4 * np.pi)

    def __getitem__(self, lm: tuple[int, int]) -> float:
        return self.coeffs[lm]

    def as_array(self) -> np.ndarray:
        return np.array([self.coeffs[l, m] for l in range(self.l_max + 1) for m in range(-l, l + 1)])


def _face_neighbour_differs(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, mode="constant", constant_values=-1)
    core = padded[1:-1, 1:-1, 1:-1]
    differs = np.zeros(mask.shape, dtype=bool)
    for axis in range(3):
        for shift in (-1, 1):
            differs |= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1] != core
    return differs


def boundary_voxels(mask: np.ndarray, label: int) -> np.ndarray:
    """(N, 3) indices of ``label`` voxels with at least one face neighbour of another label.

    Voxels on the array border count as touching the outside.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D label volume, got shape {mask.shape}")
    inside = mask == label
    if not inside.any():
        raise ValueError(f"label {label} is not present in the mask")
    return np.argwhere(inside & _face_neighbour_differs(mask))


def extract_surface(mask: np.ndarray, label: int, spacing=(1.0, 1.0, 1.0), min_points: int = MIN_POINTS) -> SurfacePointCloud:
    """Boundary voxels of one label, scaled to physical units (``spacing`` is (dz, dy, dx))."""
    idx = boundary_voxels(mask, label)
    if len(idx) < min_points:
        raise ValueError(f"label {label} has {len(idx)} boundary points; at least {min_points} are needed")
    pts = idx * np.asarray(spacing, dtype=np.float64)
    return SurfacePointCloud(pts, int(label), pts.mean(axis=0))


def real_sph_harm(l: int, m: int, polar: np.ndarray, azimuth: np.ndarray) -> np.ndarray:
    """Real orthonormal harmonic Y_lm (cos terms for m > 0, sin terms for m < 0)."""
    y = sph_harm_y(l, abs(m), polar, azimuth)
    # scipy includes the Condon-Shortley phase; (-1)^m strips it
    sign = (-1) ** abs(m)
    if m > 0:
        return np.sqrt(2) * sign * y.real
    if m < 0:
        return np.sqrt(2) * sign * y.imag
    return y.real


def sh_design(polar: np.ndarray, azimuth: np.ndarray, l_max: int = L_MAX) -> np.ndarray:
    cols = [real_sph_harm(l, m, polar, azimuth) for l in range(l_max + 1) for m in range(-l, l + 1)]
    return np.stack(cols, axis=1)


def to_spherical(points: np.ndarray, center: np.ndarray):
    """Radius, polar angle (from the first axis) and azimuth of ``points`` about ``center``."""
    d = np.asarray(points, dtype=np.float64) - center
    r = np.linalg.norm(d, axis=1)
    polar = np.arccos(np.clip(d[:, 0] / np.where(r > 0, r, 1), -1, 1))
    azimuth = np.arctan2(d[:, 1], d[:, 2])
    return r, polar, azimuth


def fit_sh(cloud: SurfacePointCloud, l_max: int = L_MAX) -> SHExpansion:
    """Least-squares fit of the radius function r(polar, azimuth) about the cloud's center."""
    r, polar, azimuth = to_spherical(cloud.points, cloud.center)
    n_coef = (l_max + 1) ** 2
    if len(r) < n_coef:
        raise ValueError(f"{len(r)} points cannot determine {n_coef} coefficients")
    A = sh_design(polar, azimuth, l_max)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise ValueError(f"angular coverage too poor for l_max={l_max}: design condition number {cond:.3g}")
    coef, *_ = np.linalg.lstsq(A, r, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - r) ** 2)))
    if resid > 0.05 * max(float(np.mean(r)), 1e-12):
        log.warning("label %s: radius fit residual %.3g; surface may not be star-shaped about its center", cloud.label, resid)
    keys = [(l, m) for l in range(l_max + 1) for m in range(-l, l + 1)]
    return SHExpansion(dict(zip(keys, map(float, coef))), l_max, cond, resid)


def power_spectrum(e: SHExpansion) -> np.ndarray:
    """``P_l = 4 pi / ((2l+1) f00^2) * sum_m f_lm^2`` for l = 0..l_max."""
    f00 = e.f00
    if f00 == 0:
        raise ValueError("f00 is zero; degenerate surface")
    return np.array(
        [4 * np.pi / ((2 * l + 1) * f00**2) * sum(e.coeffs[l, m] ** 2 for m in range(-l, l + 1)) for l in range(e.l_max + 1)]
    )


def roughness(e: SHExpansion, l_min: int = 3) -> float:
    """Total power in degrees ``l >= l_min``: ``sum (2l+1) P_l``."""
    p = power_spectrum(e)
    return float(sum((2 * l + 1) * p[l] for l in range(l_min, e.l_max + 1)))


def roughness_table(mask: np.ndarray, spacing=(1.0, 1.0, 1.0), l_max: int = L_MAX) -> list[dict]:
    """Per-label mean radius, power spectrum and roughness; labels that cannot be fitted are reported with an error."""
    rows = []
    for label in np.unique(mask):
        if label == 0:
            continue
        try:
            e = fit_sh(extract_surface(mask, int(label), spacing), l_max)
            p = power_spectrum(e)
            row = {"label": int(label), "mean_radius": e.mean_radius, "Ro": roughness(e)}
            row.update({f"P{l}": float(p[l]) for l in range(l_max + 1)})
        except ValueError as exc:
            row = {"label": int(label), "error": str(exc)}
        rows.append(row)
    return rows


# -- label matching --------------------------------------------------------


@dataclass
class MatchRow:
    label_a: int
    label_b: int | None
    vol_a: int
    vol_b: int
    overlap: int
    tie: bool = False
    unmatched: bool = False


def match_labels(mask_a: np.ndarray, mask_b: np.ndarray) -> list[MatchRow]:
    """Map every nonzero label of ``mask_a`` to the ``mask_b`` label it overlaps most.

    Ties go to the smaller B label and are flagged; labels with no overlap map to None.
    """
    mask_a = np.asarray(mask_a)
    mask_b = np.asarray(mask_b)
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    labels_a, vols_a = np.unique(mask_a[mask_a != 0], return_counts=True)
    labels_b, vols_b = np.unique(mask_b[mask_b != 0], return_counts=True)
    vol_b = dict(zip(labels_b.tolist(), vols_b.tolist()))
    both = (mask_a != 0) & (mask_b != 0)
    pairs, counts = np.unique(np.stack([mask_a[both], mask_b[both]]), axis=1, return_counts=True)
    overlaps: dict[int, dict[int, int]] = {}
    for (la, lb), c in zip(pairs.T.tolist(), counts.tolist()):
        overlaps.setdefault(la, {})[lb] = c
    rows = []
    for la, va in zip(labels_a.tolist(), vols_a.tolist()):
        cand = overlaps.get(la)
        if not cand:
            rows.append(MatchRow(la, None, va, 0, 0, unmatched=True))
            continue
        best = max(cand.values())
        winners = sorted(lb for lb, c in cand.items() if c == best)
        lb = winners[0]
        rows.append(MatchRow(la, lb, va, vol_b[lb], best, tie=len(winners) > 1))
    return rows


# -- smoothed IoU ----------------------------------------------------------


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    zz, yy, xx = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return zz**2 + yy**2 + xx**2 <= r * r


def smooth_mask(mask: np.ndarray, dilate_r: int = 2, sigma: float = 1.0, threshold: float = 0.5) -> np.ndarray:
    m = np.asarray(mask) != 0
    if dilate_r > 0:
        m = ndimage.binary_dilation(m, structure=ball(dilate_r) if m.ndim == 3 else ball(dilate_r)[dilate_r])
    if sigma > 0:
        return ndimage.gaussian_filter(m.astype(np.float64), sigma) >= threshold
    return m


def smoothed_iou(mask_a, mask_b, dilate_r: int = 2, sigma: float = 1.0, threshold: float = 0.5) -> tuple[float, bool]:
    """IoU after dilation, Gaussian smoothing and re-thresholding.

    Returns ``(iou, both_empty)``; two empty masks count as a perfect match.
    """
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    sa = smooth_mask(a, dilate_r, sigma, threshold)
    sb = smooth_mask(b, dilate_r, sigma, threshold)
    union = np.logical_or(sa, sb).sum()
    if union == 0:
        return 1.0, True
    return float(np.logical_and(sa, sb).sum() / union), False
