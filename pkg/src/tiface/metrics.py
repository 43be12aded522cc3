"""Full-region and masked-region PSNR/SSIM, evaluation reports and the linear ensemble."""
import csv
from dataclasses import dataclass, field as dc_field
import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputDomainError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
REPORT_COLUMNS = ("view", "psnr_full", "ssim_full", "psnr_masked", "ssim_masked")
DEFAULT_ENSEMBLE_WEIGHTS = (0.1, 0.6, 0.3)


def _check_pair(image, reference):
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise InputDomainError(f"image shape {a.shape} != reference shape {b.shape}")
    for x in (a, b):
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise InputDomainError("pixel values must lie in [0, 1]")
    return a, b


def _binary(mask, shape2d):
    m = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    if m.shape != shape2d:
        raise InputDomainError(f"mask shape {m.shape} != image shape {shape2d}")
    return m >= 0.5


def psnr(image, reference, mask=None):
    """``10 log10(1 / MSE)`` over all channels of the included pixels, capped at 99 dB."""
    a, b = _check_pair(image, reference)
    err = (a - b) ** 2
    if mask is not None:
        m = _binary(mask, a.shape[:2])
        if not m.any():
            raise InputDomainError("mask is empty")
        err = err[m]
    mse = float(np.mean(err))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def luma(image):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x
    return x[..., 0] * 0.299 + x[..., 1] * 0.587 + x[..., 2] * 0.114


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-r ** 2 / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    # separable Gaussian over 'valid' windows only
    y = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(y, g.size, axis=1) @ g


def ssim_map(image, reference):
    """Local SSIM at every valid window position on luma."""
    a, b = _check_pair(image, reference)
    x, y = luma(a), luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise InputDomainError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(image, reference, mask=None):
    """Mean local SSIM; with a mask, only windows whose center pixel is inside count."""
    s = ssim_map(image, reference)
    if mask is None:
        return float(s.mean())
    m = _binary(mask, np.shape(image)[:2])
    h = SSIM_WINDOW // 2
    centers = m[h:h + s.shape[0], h:h + s.shape[1]]
    if not centers.any():
        raise InputDomainError("mask contains no window centers")
    return float(s[centers].mean())


def ensemble(images, weights=DEFAULT_ENSEMBLE_WEIGHTS):
    """Pixel-wise weighted sum of renders, clamped to [0, 1]."""
    weights = [float(w) for w in weights]
    if len(images) != len(weights) or not images:
        raise InputDomainError("need one weight per image")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise InputDomainError(f"weights must sum to 1 (got {sum(weights)!r})")
    arrs = [np.asarray(im, dtype=np.float64) for im in images]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise InputDomainError("images must have equal dimensions")
    out = np.zeros_like(arrs[0])
    for w, a in zip(weights, arrs):
        out += w * a
    return np.clip(out, 0.0, 1.0)


@dataclass
class EvalReport:
    method: str
    views: list = dc_field(default_factory=list)
    psnr_full: list = dc_field(default_factory=list)
    ssim_full: list = dc_field(default_factory=list)
    psnr_masked: list = dc_field(default_factory=list)
    ssim_masked: list = dc_field(default_factory=list)

    def add(self, view, image, reference, mask=None):
        self.views.append(str(view))
        self.psnr_full.append(psnr(image, reference))
        self.ssim_full.append(ssim(image, reference))
        self.psnr_masked.append(psnr(image, reference, mask) if mask is not None else float("nan"))
        self.ssim_masked.append(ssim(image, reference, mask) if mask is not None else float("nan"))

    def means(self):
        return {k: float(np.mean(getattr(self, k))) if self.views else float("nan") for k in REPORT_COLUMNS[1:]}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for row in zip(self.views, self.psnr_full, self.ssim_full, self.psnr_masked, self.ssim_masked):
                w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])

    def write_json(self, path):
        summary = {"method": self.method, "n_views": len(self.views), "mean": self.means(), "views": self.views}
        Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
