"""Image-quality metrics, the cubic z-interpolation baseline, and stack-level reports."""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.ndimage import correlate1d

from axialinterp.volio import VolumeStack

MAX_VALUE = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
FID_JITTER = 1e-6
FID_WEIGHTS_ENV = "AXIALINTERP_FID_WEIGHTS"


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr_from_rmse(value: float, max_value: float = MAX_VALUE) -> float:
    if value == 0:
        return math.inf
    return 20.0 * math.log10(max_value / value)


def psnr(a, b, max_value: float = MAX_VALUE) -> float:
    return psnr_from_rmse(rmse(a, b), max_value)


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _smooth(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(x, taps, axis=0, mode="reflect"), taps, axis=1, mode="reflect")


def ssim(a, b, data_range: float = MAX_VALUE) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Local statistics use population (not sample) variance; the mean skips a
    half-window border.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2D frames, got {a.shape} and {b.shape}")
    taps = _gaussian_taps()
    mu_a = _smooth(a, taps)
    mu_b = _smooth(b, taps)
    var_a = _smooth(a * a, taps) - mu_a**2
    var_b = _smooth(b * b, taps) - mu_b**2
    cov = _smooth(a * b, taps) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    pad = (SSIM_WINDOW - 1) // 2
    if min(a.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


# -- Frechet distance -------------------------------------------------------


@dataclass
class FrechetResult:
    value: float
    jittered: bool = False


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need at least two feature vectors to estimate a covariance")
    return features.mean(axis=0), np.cov(features, rowvar=False)


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> FrechetResult:
    """``||mu_a - mu_b||^2 + tr(A + B - 2 (A B)^(1/2))`` for Gaussian fits."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    diff = mu_a - mu_b
    jittered = False
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if not np.isfinite(covmean).all():
        jittered = True
        eye = np.eye(cov_a.shape[0]) * FID_JITTER
        covmean = scipy.linalg.sqrtm((cov_a + eye) @ (cov_b + eye))
    if np.iscomplexobj(covmean):
        if not np.allclose(np.diagonal(covmean).imag, 0, atol=1e-3):
            raise ValueError(f"matrix square root has a large imaginary part ({np.abs(covmean.imag).max():.3g})")
        covmean = covmean.real
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(covmean))
    return FrechetResult(max(value, 0.0), jittered)


def feature_fid(features_a: np.ndarray, features_b: np.ndarray) -> FrechetResult:
    return frechet_distance(*gaussian_stats(features_a), *gaussian_stats(features_b))


class InceptionFeatures:
    """2048-d pooled Inception-v3 features of grayscale frames.

    Weights are read from ``weights_path`` (or ``$AXIALINTERP_FID_WEIGHTS``);
    their SHA-256 identifies the extractor in every report. With
    ``allow_untrained=True`` and no weights, a seeded random initialization is
    used and the report is marked as not comparable.
    """

    name = "torchvision.inception_v3.pool3"

    def __init__(self, weights_path: str | Path | None = None, allow_untrained: bool = False, device: str = "cpu"):
        import torch
        import torchvision

        weights_path = weights_path or os.environ.get(FID_WEIGHTS_ENV)
        if not weights_path and not allow_untrained:
            raise FileNotFoundError(f"no Inception weights: pass weights_path or set ${FID_WEIGHTS_ENV}")
        torch_state = torch.random.get_rng_state()
        torch.manual_seed(0)
        net = torchvision.models.inception_v3(weights=None, aux_logits=False, init_weights=True)
        torch.random.set_rng_state(torch_state)
        if weights_path:
            raw = Path(weights_path).read_bytes()
            self.weights_hash = hashlib.sha256(raw).hexdigest()
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            state = {k: v for k, v in state.items() if not k.startswith("AuxLogits.")}
            net.load_state_dict(state)
            self.pretrained = True
        else:
            self.weights_hash = "untrained-seed-0"
            self.pretrained = False
        net.fc = torch.nn.Identity()
        self.net = net.eval().to(device)
        self.device = device

    def __call__(self, frames, batch_size: int = 16) -> np.ndarray:
        import torch
        import torch.nn.functional as F

        mean = torch.tensor([0.485, 0.456, 0.406], device=self.device).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225], device=self.device).view(1, 3, 1, 1)
        out = []
        frames = [np.asarray(f, dtype=np.float32) for f in frames]
        with torch.no_grad():
            for i in range(0, len(frames), batch_size):
                x = torch.from_numpy(np.stack(frames[i : i + batch_size]))[:, None].to(self.device)
                if x.max() > 1.0:
                    x = x / MAX_VALUE
                x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False).repeat(1, 3, 1, 1)
                out.append(self.net((x - mean) / std).cpu().numpy())
        return np.concatenate(out).astype(np.float64)

    def identity(self) -> dict:
        return {"extractor": self.name, "weights_sha256": self.weights_hash, "pretrained": self.pretrained}


def fid(set_a, set_b, extractor=None) -> tuple[float, dict]:
    """FID between two frame collections; returns the value and provenance info."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("each set needs at least two frames")
    extractor = extractor or InceptionFeatures()
    res = feature_fid(extractor(set_a), extractor(set_b))
    info = dict(extractor.identity()) if hasattr(extractor, "identity") else {"extractor": repr(extractor)}
    info["jittered"] = res.jittered
    return res.value, info


# -- cubic baseline ---------------------------------------------------------


def _catmull_rom(p0, p1, p2, p3, t: float):
    return 0.5 * (2 * p1 + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t * t + (-p0 + 3 * p1 - 3 * p2 + p3) * t**3)


def interpolate_z(volume: np.ndarray, factor: int) -> np.ndarray:
    """Catmull-Rom resampling along axis 0 with ``factor - 1`` new slices per gap.

    Missing end neighbours are linearly extrapolated, so linear profiles are
    reproduced exactly. Volumes of fewer than 4 slices fall back to linear.
    """
    v = np.asarray(volume, dtype=np.float64)
    n = v.shape[0]
    if n < 2:
        raise ValueError("need at least two slices to interpolate")
    out = np.empty(((n - 1) * factor + 1, *v.shape[1:]), dtype=np.float64)
    out[::factor] = v
    linear = n < 4
    if linear:
        warnings.warn(f"{n} slices is too few for cubic interpolation; using linear", RuntimeWarning, stacklevel=2)
    for i in range(n - 1):
        p1, p2 = v[i], v[i + 1]
        p0 = v[i - 1] if i > 0 else 2 * p1 - p2
        p3 = v[i + 2] if i + 2 < n else 2 * p2 - p1
        for j in range(1, factor):
            t = j / factor
            out[i * factor + j] = (1 - t) * p1 + t * p2 if linear else _catmull_rom(p0, p1, p2, p3, t)
    return out


def bicubic_z(stack: VolumeStack, factor: int) -> VolumeStack:
    """Cubic z-upsampling keeping the model's slice-count law ``factor * (n - 1) + 1``."""
    if factor not in (2, 4, 8):
        raise ValueError(f"factor must be 2, 4 or 8, got {factor}")
    data = interpolate_z(stack.voxels, factor)
    if stack.normalized:
        voxels = np.clip(data, 0.0, 1.0).astype(stack.voxels.dtype)
    else:
        top = 2**stack.bit_depth - 1
        voxels = np.clip(np.rint(data), 0, top).astype(stack.voxels.dtype)
        voxels[::factor] = stack.voxels
    spacing = stack.spacing
    if spacing is not None:
        spacing = (spacing[0], spacing[1], spacing[2] / factor)
    meta = dict(stack.metadata, method=f"catmull-rom-z x{factor}")
    return replace(stack, voxels=voxels, spacing=spacing, metadata=meta)


# -- reports ----------------------------------------------------------------


@dataclass
class MetricReport:
    rmse: float
    psnr_db: float
    ssim: float
    fid: float | None = None
    per_gap: list[dict] = field(default_factory=list)
    dataset: str = ""
    model: str = ""
    conventions: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        for k in ("psnr_db",):
            if math.isinf(d[k]):
                d[k] = "inf"
        for row in d["per_gap"]:
            if math.isinf(row["psnr_db"]):
                row["psnr_db"] = "inf"
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def metric_conventions() -> dict:
    return {
        "max_value": MAX_VALUE,
        "ssim_window": f"gaussian {SSIM_WINDOW}x{SSIM_WINDOW} sigma={SSIM_SIGMA}",
        "ssim_k": [SSIM_K1, SSIM_K2],
        "rmse_aggregate": "mean of per-slice RMSE; PSNR derived from the aggregate",
    }


def generated_indices(depth: int, stride: int) -> list[int]:
    """Indices of slices that were synthesized when ``stride`` slices fill each original gap."""
    period = stride + 1
    if (depth - 1) % period:
        raise ValueError(f"depth {depth} is not {period}*(n-1)+1 for stride {stride}")
    return [k for k in range(depth) if k % period]


def _to_8bit_domain(stack: VolumeStack) -> np.ndarray:
    if stack.normalized:
        return np.clip(stack.voxels, 0, 1).astype(np.float64) * MAX_VALUE
    # deeper stacks are rescaled so MAX = 255 keeps its meaning
    return stack.voxels.astype(np.float64) * (MAX_VALUE / (2**stack.bit_depth - 1))


def interstack_report(pred: VolumeStack, gt: VolumeStack, stride: int, dataset: str = "", model: str = "") -> MetricReport:
    """Average RMSE/PSNR/SSIM over generated slices only, with a per-gap breakdown."""
    if pred.depth != gt.depth:
        raise ValueError(f"prediction has {pred.depth} slices, ground truth {gt.depth}")
    if pred.voxels.shape != gt.voxels.shape:
        raise ValueError(f"shape mismatch {pred.voxels.shape} vs {gt.voxels.shape}")
    p = _to_8bit_domain(pred)
    g = _to_8bit_domain(gt)
    period = stride + 1
    per_gap = []
    all_rmse, all_ssim = [], []
    for gap in range((pred.depth - 1) // period):
        idx = list(range(gap * period + 1, (gap + 1) * period))
        r = [rmse(p[k], g[k]) for k in idx]
        s = [ssim(p[k], g[k]) for k in idx]
        all_rmse += r
        all_ssim += s
        mr = float(np.mean(r))
        per_gap.append({"gap": gap, "indices": idx, "rmse": mr, "psnr_db": psnr_from_rmse(mr), "ssim": float(np.mean(s))})
    if not per_gap:
        generated_indices(pred.depth, stride)
        raise ValueError("no generated slices to score")
    mean_rmse = float(np.mean(all_rmse))
    return MetricReport(
        rmse=mean_rmse,
        psnr_db=psnr_from_rmse(mean_rmse),
        ssim=float(np.mean(all_ssim)),
        per_gap=per_gap,
        dataset=dataset,
        model=model,
        conventions=metric_conventions(),
    )


def render_table(rows: list[dict]) -> str:
    """Plain-text benchmark table: method, parameters, runtimes, RMSE, PSNR, SSIM."""
    header = ["Method", "# Params (M)", "Training", "Prediction", "RMSE", "PSNR", "SSIM"]
    lines = []
    for r in rows:
        lines.append(
            [
                str(r.get("method", "")),
                "-" if r.get("params") is None else f"{r['params'] / 1e6:.2f}",
                "-" if r.get("train_s") is None else f"{r['train_s']:.2f}s",
                "-" if r.get("predict_s") is None else f"{r['predict_s']:.2f}s",
                f"{r['rmse']:.2f}",
                "inf" if math.isinf(r["psnr_db"]) else f"{r['psnr_db']:.2f}",
                f"{r['ssim']:.3f}",
            ]
        )
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    out += [fmt.format(*l) for l in lines]
    return "\n".join(out)
