"""Image-quality metrics over rendered frames.

All metrics are self-contained numpy: mean absolute error, peak
signal-to-noise ratio (capped), the classic windowed structural-similarity
index with an 11x11 Gaussian window, mean angular normal error in degrees,
and mask intersection-over-union.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------


def _region_values(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None):
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if region is None:
        return pred.reshape(-1), gt.reshape(-1)
    if region.shape != pred.shape[: region.ndim]:
        raise InvalidInputError("region mask does not match image dimensions")
    return pred[region].reshape(-1), gt[region].reshape(-1)


def l1_error(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    """Mean absolute difference over the region (all channels)."""
    p, g = _region_values(np.asarray(pred, float), np.asarray(gt, float), region)
    if p.size == 0:
        return 0.0
    return float(np.mean(np.abs(p - g)))


def psnr(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None,
         data_range: float = 1.0, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB, capped (identical images hit the cap)."""
    p, g = _region_values(np.asarray(pred, float), np.asarray(gt, float), region)
    if p.size == 0:
        return cap
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return cap
    return float(min(10.0 * np.log10(data_range**2 / mse), cap))


# ---------------------------------------------------------------------------
# structural similarity
# ---------------------------------------------------------------------------


def _gaussian_kernel(sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_separable(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Windowed local mean with symmetric (edge-repeating) boundary handling."""
    radius = len(kernel) // 2
    out = img
    for axis in range(2):
        padded = np.pad(
            out, [(radius, radius) if a == axis else (0, 0) for a in range(2)], mode="symmetric"
        )
        windows = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=axis)
        out = windows @ kernel
    return out


def ssim_map(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0,
             sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Per-pixel structural-similarity map of two single-channel images."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise InvalidInputError("structural similarity expects two equal 2D images")
    kernel = _gaussian_kernel(sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_p = _filter_separable(pred, kernel)
    mu_g = _filter_separable(gt, kernel)
    var_p = _filter_separable(pred * pred, kernel) - mu_p * mu_p
    var_g = _filter_separable(gt * gt, kernel) - mu_g * mu_g
    cov = _filter_separable(pred * gt, kernel) - mu_p * mu_g
    return ((2 * mu_p * mu_g + c1) * (2 * cov + c2)) / (
        (mu_p**2 + mu_g**2 + c1) * (var_p + var_g + c2)
    )


def ssim(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None,
         data_range: float = 1.0) -> float:
    """Mean structural similarity; multi-channel images average per-channel
    values. The window-radius border is excluded (its windows are padded),
    and an optional region restricts the average to its interior pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 3:
        vals = [ssim(pred[..., c], gt[..., c], region, data_range) for c in range(pred.shape[-1])]
        return float(np.mean(vals))
    h, w = pred.shape
    r = SSIM_RADIUS
    if h <= 2 * r or w <= 2 * r:
        raise InvalidInputError("image smaller than the similarity window border")
    interior = np.zeros((h, w), dtype=bool)
    interior[r : h - r, r : w - r] = True
    if region is not None:
        interior &= region
    if not interior.any():
        return 1.0
    return float(np.mean(ssim_map(pred, gt, data_range)[interior]))


# ---------------------------------------------------------------------------
# geometry metrics
# ---------------------------------------------------------------------------


def normal_angle_error_deg(pred_normal: np.ndarray, gt_normal: np.ndarray,
                           joint_mask: np.ndarray) -> float:
    """Mean angle in degrees between unit-normalized normals over the mask."""
    if pred_normal.shape != gt_normal.shape:
        raise InvalidInputError("normal map shapes differ")
    p = pred_normal[joint_mask]
    g = gt_normal[joint_mask]
    if p.size == 0:
        return 0.0
    p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    # chord form of the angle: exactly 0 for identical vectors and
    # well-conditioned near 0, unlike arccos of the dot product
    half_chord = np.clip(0.5 * np.linalg.norm(p - g, axis=-1), 0.0, 1.0)
    return float(np.degrees(np.mean(2.0 * np.arcsin(half_chord))))


def mask_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    if pred_mask.shape != gt_mask.shape:
        raise InvalidInputError("mask shapes differ")
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a & b) / union)


# ---------------------------------------------------------------------------
# frame-level report
# ---------------------------------------------------------------------------

REGION_POLICIES = ("gt", "intersection", "union", "full")


@dataclass
class FrameMetrics:
    l1: float
    psnr: float
    ssim: float
    normal_error: float
    iou: float
    frame_id: int = -1

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    frames: list[FrameMetrics] = field(default_factory=list)
    region: str = "gt"

    @property
    def aggregate(self) -> FrameMetrics:
        if not self.frames:
            return FrameMetrics(0.0, PSNR_CAP, 1.0, 0.0, 1.0)
        cols = np.array([[f.l1, f.psnr, f.ssim, f.normal_error, f.iou] for f in self.frames])
        return FrameMetrics(*(float(v) for v in cols.mean(axis=0)))

    def as_dict(self) -> dict:
        return {
            "region": self.region,
            "note": (
                "color metrics use the stated region policy; normal error is "
                "measured over the predicted/ground-truth mask intersection "
                "(no semantic face-interior parsing)"
            ),
            "aggregate": self.aggregate.as_dict(),
            "frames": [f.as_dict() for f in self.frames],
        }


def _select_region(policy: str, pred_mask: np.ndarray, gt_mask: np.ndarray) -> np.ndarray | None:
    if policy == "gt":
        return gt_mask
    if policy == "intersection":
        return pred_mask & gt_mask
    if policy == "union":
        return pred_mask | gt_mask
    if policy == "full":
        return None
    raise InvalidInputError(f"region policy must be one of {REGION_POLICIES}, got {policy!r}")


def compute_metrics(pred, gt, region: str = "gt", frame_id: int = -1) -> FrameMetrics:
    """Score a prediction against ground truth.

    `pred` and `gt` expose rgb/mask/normal (rendered bundles and dataset
    frames both do). RGB metrics run over the region policy; the angular
    normal error always uses the mask intersection.
    """
    pred_mask = np.asarray(pred.mask, dtype=bool)
    gt_mask = np.asarray(gt.mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise InvalidInputError("prediction and ground truth dimensions differ")
    sel = _select_region(region, pred_mask, gt_mask)
    both = pred_mask & gt_mask
    if pred.normal is None or gt.normal is None:
        angle = 0.0
    else:
        angle = normal_angle_error_deg(np.asarray(pred.normal), np.asarray(gt.normal), both)
    return FrameMetrics(
        l1=l1_error(pred.rgb, gt.rgb, sel),
        psnr=psnr(pred.rgb, gt.rgb, sel),
        ssim=ssim(pred.rgb, gt.rgb, sel),
        normal_error=angle,
        iou=mask_iou(pred_mask, gt_mask),
        frame_id=frame_id,
    )
