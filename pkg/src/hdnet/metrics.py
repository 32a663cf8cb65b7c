"""Image quality metrics on the 0-255 scale: MSE, foreground MSE, PSNR, SSIM.

Inputs are [1,3,H,W] images with values in [0,1]; every metric rescales by 255
internally so magnitudes line up with byte-image conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import ContractError, DimensionError
from .model import Mask

_PEAK = 255.0
_PSNR_CAP = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass
class MetricsReport:
    mse: float
    fmse: float
    psnr: float
    ssim: float
    n_images: int = 1

    def to_text(self) -> str:
        lines = [f"mse={self.mse:.6g}", f"fmse={self.fmse:.6g}",
                 f"psnr={self.psnr:.6g}", f"ssim={self.ssim:.6g}",
                 f"n_images={self.n_images}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
        return cls(mse=float(fields["mse"]), fmse=float(fields["fmse"]),
                   psnr=float(fields["psnr"]), ssim=float(fields["ssim"]),
                   n_images=int(fields.get("n_images", 1)))


def mean_report(reports) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ContractError("cannot average an empty report list")
    n = len(reports)
    return MetricsReport(mse=sum(r.mse for r in reports) / n,
                         fmse=sum(r.fmse for r in reports) / n,
                         psnr=sum(r.psnr for r in reports) / n,
                         ssim=sum(r.ssim for r in reports) / n,
                         n_images=sum(r.n_images for r in reports))


def _image(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 3:
        raise DimensionError(f"expected a [1,3,H,W] image, got shape {arr.shape}")
    return arr


def _pair(a, b):
    aa, bb = _image(a), _image(b)
    if aa.shape != bb.shape:
        raise DimensionError(f"image shapes disagree: {aa.shape} vs {bb.shape}")
    return aa * _PEAK, bb * _PEAK


def mse(a, b) -> float:
    aa, bb = _pair(a, b)
    return float(np.mean((aa - bb) ** 2))


def fmse(a, b, mask: Mask) -> float:
    aa, bb = _pair(a, b)
    if (mask.height, mask.width) != aa.shape[2:]:
        raise DimensionError(
            f"mask {mask.height}x{mask.width} does not match image "
            f"{aa.shape[2]}x{aa.shape[3]}")
    if mask.foreground_count == 0:
        raise ContractError("foreground MSE of an empty mask")
    sq = (aa - bb) ** 2
    total = float((sq * mask.values).sum())
    return total / (3.0 * mask.foreground_count)


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def psnr_from_mse(err: float) -> float:
    if err < _PEAK ** 2 * 1e-10:
        return _PSNR_CAP
    return float(10.0 * np.log10(_PEAK ** 2 / err))


def _gaussian_kernel() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    x = np.arange(_SSIM_WINDOW) - half
    k = np.exp(-(x ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable windowed average over valid positions of a [H,W] plane."""
    rows = sliding_window_view(img, _SSIM_WINDOW, axis=0) @ k
    return sliding_window_view(rows, _SSIM_WINDOW, axis=1) @ k


def ssim(a, b) -> float:
    """Single-scale structural similarity, averaged over channels and valid
    window positions; Gaussian window 11x11, sigma 1.5, dynamic range 255."""
    aa, bb = _pair(a, b)
    h, w = aa.shape[2:]
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ContractError(
            f"image {h}x{w} is smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    k = _gaussian_kernel()
    c1 = (_SSIM_K1 * _PEAK) ** 2
    c2 = (_SSIM_K2 * _PEAK) ** 2
    vals = []
    for c in range(3):
        x, y = aa[0, c], bb[0, c]
        mu_x = _filter_valid(x, k)
        mu_y = _filter_valid(y, k)
        var_x = _filter_valid(x * x, k) - mu_x ** 2
        var_y = _filter_valid(y * y, k) - mu_y ** 2
        cov = _filter_valid(x * y, k) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def compute_report(a, b, mask: Mask) -> MetricsReport:
    """All four metrics for one image pair."""
    err = mse(a, b)
    return MetricsReport(mse=err, fmse=fmse(a, b, mask), psnr=psnr_from_mse(err),
                         ssim=ssim(a, b), n_images=1)
