"""Reconstruction quality metrics: NRMSE, mean-detrended ROI NRMSE, SSIM, HFEN."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11^3 window
HFEN_SIGMA = 1.5
HFEN_SIZE = 15

# Published scores on the Sim2Snr1 challenge data, kept for reference only.
# Columns: NRMSE, detrend NRMSE (tissue, blood, DGM), SSIM, HFEN.
TABLE1_REFERENCE = {
    "L1-QSM": {"nrmse": 31.97, "roi": {"tissue": 34.18, "blood": 65.77, "dgm": 18.37},
               "ssim": 0.769, "hfen": 32.00},
    "MEDI": {"nrmse": 35.13, "roi": {"tissue": 33.35, "blood": 81.75, "dgm": 20.60},
             "ssim": 0.775, "hfen": 25.28},
    "AMP-PE (db1)": {"nrmse": 31.34, "roi": {"tissue": 34.02, "blood": 65.99, "dgm": 18.94},
                     "ssim": 0.802, "hfen": 30.92},
    "AMP-PE (db2)": {"nrmse": 32.43, "roi": {"tissue": 35.88, "blood": 67.20, "dgm": 20.42},
                     "ssim": 0.790, "hfen": 32.87},
}
ROI_ORDER = ("tissue", "blood", "dgm")


def _pair(x_hat, x):
    x_hat = np.asarray(getattr(x_hat, "data", x_hat), dtype=np.float64)
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ValueError(f"dims mismatch: {x_hat.shape} vs {x.shape}")
    return x_hat, x


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(getattr(mask, "data", mask)) > 0
    if m.shape != tuple(shape):
        raise ValueError(f"mask dims {m.shape} do not match {tuple(shape)}")
    if not m.any():
        raise ValueError("mask is empty")
    return m


def nrmse(x_hat, x, mask=None) -> float:
    """``100 * ||x_hat - x|| / ||x||`` over the mask, in percent."""
    x_hat, x = _pair(x_hat, x)
    m = _mask(mask, x.shape)
    ref = np.linalg.norm(x[m])
    if ref == 0:
        raise ValueError("ground truth has zero norm inside the mask")
    return float(100.0 * np.linalg.norm((x_hat - x)[m]) / ref)


def roi_nrmse(x_hat, x, rois: dict, detrend=True) -> dict:
    """NRMSE per named ROI, optionally after matching the ROI means ("mean-detrend")."""
    x_hat, x = _pair(x_hat, x)
    out = {}
    for name, roi in rois.items():
        m = _mask(roi, x.shape)
        est = x_hat[m]
        if detrend:
            est = est - est.mean() + x[m].mean()
        ref = np.linalg.norm(x[m])
        if ref == 0:
            raise ValueError(f"ROI {name!r}: ground truth has zero norm")
        out[name] = float(100.0 * np.linalg.norm(est - x[m]) / ref)
    return out


def robust_range(x, mask=None) -> float:
    """1st-99th percentile spread of ``x`` inside the mask."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.percentile(x[_mask(mask, x.shape)], [1, 99])
    return float(hi - lo)


def ssim_map(x_hat, x, dynamic_range) -> np.ndarray:
    """Local SSIM with an isotropic Gaussian window (sigma 1.5, 11^3 support)."""
    x_hat, x = _pair(x_hat, x)
    if not dynamic_range > 0:
        raise ValueError("dynamic range must be positive")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    def blur(a):
        return ndimage.gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA)

    mu_a, mu_b = blur(x_hat), blur(x)
    var_a = blur(x_hat * x_hat) - mu_a**2
    var_b = blur(x * x) - mu_b**2
    cov = blur(x_hat * x) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim3d(x_hat, x, mask=None, dynamic_range=None) -> float:
    """Mean local SSIM over masked voxels.

    ``dynamic_range`` defaults to :func:`robust_range` of the ground truth.
    """
    x_hat, x = _pair(x_hat, x)
    m = _mask(mask, x.shape)
    if dynamic_range is None:
        dynamic_range = robust_range(x, m)
    if not dynamic_range > 0:
        raise ValueError("degenerate dynamic range; pass dynamic_range explicitly")
    return float(ssim_map(x_hat, x, dynamic_range)[m].mean())


def log_kernel(size=HFEN_SIZE, sigma=HFEN_SIGMA) -> np.ndarray:
    """Zero-sum 3D Laplacian-of-Gaussian kernel of shape ``size^3``."""
    r = np.arange(size) - (size - 1) / 2
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    r2 = x**2 + y**2 + z**2
    g = np.exp(-r2 / (2 * sigma**2))
    g /= g.sum()
    k = g * (r2 - 3 * sigma**2) / sigma**4
    return k - k.mean()


def hfen(x_hat, x, mask=None) -> float:
    """NRMSE between LoG-filtered volumes, in percent."""
    x_hat, x = _pair(x_hat, x)
    m = _mask(mask, x.shape)
    k = log_kernel()
    fa = ndimage.convolve(x_hat, k, mode="reflect")
    fb = ndimage.convolve(x, k, mode="reflect")
    ref = np.linalg.norm(fb[m])
    if ref == 0:
        raise ValueError("filtered ground truth has zero norm")
    return float(100.0 * np.linalg.norm((fa - fb)[m]) / ref)


@dataclass
class MetricReport:
    nrmse_percent: float
    ssim: float
    hfen_percent: float
    roi_nrmse_percent: dict = field(default_factory=dict)

    def __post_init__(self):
        values = [self.nrmse_percent, self.hfen_percent, *self.roi_nrmse_percent.values()]
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise ValueError("error metrics must be finite and non-negative")
        if not (math.isfinite(self.ssim) and self.ssim <= 1.0 + 1e-12):
            raise ValueError(f"ssim must be finite and <= 1, got {self.ssim}")

    def to_json(self) -> dict:
        return {
            "nrmse_percent": self.nrmse_percent,
            "roi_nrmse_percent": dict(self.roi_nrmse_percent),
            "ssim": self.ssim,
            "hfen_percent": self.hfen_percent,
        }


def evaluate(x_hat, x, mask=None, rois=None, detrend=True) -> MetricReport:
    return MetricReport(
        nrmse_percent=nrmse(x_hat, x, mask),
        ssim=ssim3d(x_hat, x, mask),
        hfen_percent=hfen(x_hat, x, mask),
        roi_nrmse_percent=roi_nrmse(x_hat, x, rois, detrend) if rois else {},
    )


def format_table(rows: dict) -> str:
    """Plain-text table, one row per method, columns in the challenge order.

    ``rows`` maps a method name to a :class:`MetricReport` or to a dict shaped
    like the entries of :data:`TABLE1_REFERENCE`. Missing ROIs print as ``-``.
    """
    head = ["Method", "NRMSE", *(f"dt-{r}" for r in ROI_ORDER), "SSIM", "HFEN"]
    lines = [head]
    for name, rep in rows.items():
        if isinstance(rep, MetricReport):
            rep = {"nrmse": rep.nrmse_percent, "roi": rep.roi_nrmse_percent,
                   "ssim": rep.ssim, "hfen": rep.hfen_percent}
        roi = rep.get("roi", {})
        lines.append([
            name,
            f"{rep['nrmse']:.2f}",
            *(f"{roi[r]:.2f}" if r in roi else "-" for r in ROI_ORDER),
            f"{rep['ssim']:.3f}",
            f"{rep['hfen']:.2f}",
        ])
    widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)
