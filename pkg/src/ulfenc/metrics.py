"""Evaluation metrics (SSIM, PSNR, MAE, NMSE; full and brain-masked) and the
composite challenge score.

Conventions: SSIM uses a rectangular (uniform) 11x11x11 window with sample
covariance and constants C1 = 1e-4, C2 = 9e-4 (data range 1). The SSIM map is
averaged over fully-interior window centers only; a mask restricts which
centers count. Masked PSNR/MAE/NMSE restrict voxel sums to the mask. The
challenge score caps PSNR at 32 dB so a perfect reconstruction scores 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
SCORE_PSNR_CAP = 32.0


def _check_pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def _mask_flat(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match volume shape {shape}")
    sel = m > 0.5
    if not sel.any():
        raise ValueError("mask selects no voxels")
    return sel


def ssim3d(x, y, window: int = SSIM_WINDOW, mask=None) -> float:
    """Mean local SSIM over valid (fully interior) window centers.

    Local means/variances use a uniform box filter of the given odd window
    size; variances and covariance use the sample (n-1) normalization. With
    a mask, only window centers inside the mask contribute.
    """
    x, y = _check_pair(x, y)
    if x.ndim != 3:
        raise ValueError(f"expected 3D volumes, got ndim={x.ndim}")
    if window % 2 != 1 or window < 3:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if any(n < window for n in x.shape):
        raise ValueError(f"volume shape {x.shape} smaller than the {window}^3 window")

    n = window**3
    cov_norm = n / (n - 1)
    f = lambda a: ndimage.uniform_filter(a, size=window, mode="constant")
    ux, uy = f(x), f(y)
    vx = cov_norm * (f(x * x) - ux * ux)
    vy = cov_norm * (f(y * y) - uy * uy)
    vxy = cov_norm * (f(x * y) - ux * uy)

    num = (2 * ux * uy + SSIM_C1) * (2 * vxy + SSIM_C2)
    den = (ux**2 + uy**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    smap = num / den

    pad = window // 2
    interior = tuple(slice(pad, dim - pad) for dim in x.shape)
    smap = smap[interior]
    if mask is not None:
        sel = _mask_flat(mask, x.shape)[interior]
        if not sel.any():
            raise ValueError("mask contains no valid window centers")
        return float(smap[sel].mean())
    return float(smap.mean())


def psnr(x, y, data_range: float = 1.0, mask=None) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the volumes are identical."""
    x, y = _check_pair(x, y)
    sel = _mask_flat(mask, x.shape)
    d = (x - y) if sel is None else (x[sel] - y[sel])
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return float(10.0 * math.log10(data_range**2 / mse))


def mae(x, y, mask=None) -> float:
    x, y = _check_pair(x, y)
    sel = _mask_flat(mask, x.shape)
    d = np.abs(x - y)
    return float(d.mean() if sel is None else d[sel].mean())


def nmse(x, y, mask=None) -> float:
    """Squared error normalized by reference energy, over (masked) voxels."""
    x, y = _check_pair(x, y)
    sel = _mask_flat(mask, x.shape)
    if sel is not None:
        x, y = x[sel], y[sel]
    ref = float(np.sum(y * y))
    if ref <= 0.0:
        raise ValueError("nmse reference has zero energy")
    return float(np.sum((x - y) ** 2) / ref)


def challenge_score(ssim: float, psnr: float, mae: float, nmse: float) -> float:
    """0.7*SSIM + 0.1*PSNR/32 + 0.1*(1-MAE) + 0.1*(1-NMSE), PSNR capped at 32 dB."""
    psnr_used = min(float(psnr), SCORE_PSNR_CAP)
    return float(0.7 * ssim + 0.1 * psnr_used / SCORE_PSNR_CAP + 0.1 * (1.0 - mae) + 0.1 * (1.0 - nmse))


@dataclass
class MetricValues:
    ssim: float
    psnr: float
    mae: float
    nmse: float

    def to_json_dict(self) -> dict:
        return {"ssim": self.ssim, "psnr": self.psnr, "mae": self.mae, "nmse": self.nmse}

    @classmethod
    def from_json_dict(cls, d) -> "MetricValues":
        return cls(ssim=float(d["ssim"]), psnr=float(d["psnr"]), mae=float(d["mae"]), nmse=float(d["nmse"]))


@dataclass
class VolumeMetrics:
    subject_id: str
    contrast: str
    full: MetricValues
    masked: MetricValues

    def to_json_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "contrast": self.contrast,
            "full": self.full.to_json_dict(),
            "masked": self.masked.to_json_dict(),
        }


@dataclass
class MetricReport:
    """Per-volume metrics plus aggregate means and the challenge score.

    The score is computed from the masked aggregates (the masked values equal
    the full-volume ones when no mask was supplied).
    """

    entries: list[VolumeMetrics] = field(default_factory=list)
    aggregate_full: MetricValues | None = None
    aggregate_masked: MetricValues | None = None
    score: float = 0.0
    psnr_clipped: bool = False

    def to_json_dict(self) -> dict:
        return {
            "entries": [e.to_json_dict() for e in self.entries],
            "aggregate": {
                "full": self.aggregate_full.to_json_dict(),
                "masked": self.aggregate_masked.to_json_dict(),
            },
            "score": self.score,
            "psnr_clipped": self.psnr_clipped,
            "conventions": {
                "ssim_window": SSIM_WINDOW,
                "ssim_constants": [SSIM_C1, SSIM_C2],
                "ssim_masking": "window centers inside mask, interior windows only",
                "masked_voxel_metrics": "sums restricted to mask voxels",
                "score_psnr_cap_db": SCORE_PSNR_CAP,
                "score_inputs": "masked aggregates",
            },
        }

    @classmethod
    def from_json_dict(cls, d) -> "MetricReport":
        agg = d["aggregate"]
        report = cls(
            entries=[
                VolumeMetrics(
                    subject_id=e["subject_id"],
                    contrast=e["contrast"],
                    full=MetricValues.from_json_dict(e["full"]),
                    masked=MetricValues.from_json_dict(e["masked"]),
                )
                for e in d["entries"]
            ],
            aggregate_full=MetricValues.from_json_dict(agg["full"]),
            aggregate_masked=MetricValues.from_json_dict(agg["masked"]),
            score=float(d["score"]),
            psnr_clipped=bool(d["psnr_clipped"]),
        )
        return report


def volume_metrics(pred, ref, mask=None, subject_id: str = "", contrast: str = "") -> VolumeMetrics:
    """All four metrics for one prediction/reference pair, full and masked."""
    full = MetricValues(ssim=ssim3d(pred, ref), psnr=psnr(pred, ref), mae=mae(pred, ref), nmse=nmse(pred, ref))
    if mask is None:
        masked = MetricValues(**vars(full))
    else:
        masked = MetricValues(
            ssim=ssim3d(pred, ref, mask=mask),
            psnr=psnr(pred, ref, mask=mask),
            mae=mae(pred, ref, mask=mask),
            nmse=nmse(pred, ref, mask=mask),
        )
    return VolumeMetrics(subject_id=subject_id, contrast=contrast, full=full, masked=masked)


def _mean_values(values: list[MetricValues]) -> MetricValues:
    return MetricValues(
        ssim=float(np.mean([v.ssim for v in values])),
        psnr=float(np.mean([v.psnr for v in values])),
        mae=float(np.mean([v.mae for v in values])),
        nmse=float(np.mean([v.nmse for v in values])),
    )


def build_report(entries: list[VolumeMetrics]) -> MetricReport:
    """Aggregate per-volume metrics into means and the challenge score."""
    if not entries:
        raise ValueError("cannot build a report from zero entries")
    agg_full = _mean_values([e.full for e in entries])
    agg_masked = _mean_values([e.masked for e in entries])
    score = challenge_score(agg_masked.ssim, agg_masked.psnr, agg_masked.mae, agg_masked.nmse)
    return MetricReport(
        entries=entries,
        aggregate_full=agg_full,
        aggregate_masked=agg_masked,
        score=score,
        psnr_clipped=bool(agg_masked.psnr > SCORE_PSNR_CAP),
    )
