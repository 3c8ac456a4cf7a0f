"""Full-reference image quality metrics for [0,1] intensity images."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# identical images; kept distinct from any finite dB value
PSNR_INF = math.inf

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8


def _pair(reference, candidate) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(candidate, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError(f"expected 2-D images, got shape {x.shape}")
    return x, y


def mse(reference, candidate) -> float:
    x, y = _pair(reference, candidate)
    return float(np.mean((x - y) ** 2))


def _db(err: float) -> float:
    return PSNR_INF if err == 0 else 10.0 * math.log10(1.0 / err)


def psnr(reference, candidate) -> float:
    return _db(mse(reference, candidate))


def ssim(reference, candidate, k1: float = SSIM_K1, k2: float = SSIM_K2,
         window: int = SSIM_WINDOW, dynamic_range: float = 1.0) -> float:
    """Mean SSIM over all valid stride-1 windows with uniform weights."""
    x, y = _pair(reference, candidate)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} window")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    def local_mean(a):
        return sliding_window_view(a, (window, window)).mean(axis=(2, 3))

    mx, my = local_mean(x), local_mean(y)
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cxy = local_mean(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def bef(image, block_size: int = 8) -> float:
    """Blocking effect factor of a single image.

    Compares the mean squared difference of horizontally and vertically
    adjacent pixel pairs that straddle a block boundary (D_B) against the
    pairs that do not (D_C)::

        BEF = eta * max(D_B - D_C, 0),  eta = log2(block_size) / log2(min(H, W))
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2 * block_size:
        raise ValueError(f"image {img.shape} too small for block size {block_size}")
    h, w = img.shape
    dh = np.diff(img, axis=1) ** 2  # pair (j, j+1), shape [H, W-1]
    dv = np.diff(img, axis=0) ** 2  # pair (i, i+1), shape [H-1, W]
    col_b = (np.arange(w - 1) + 1) % block_size == 0
    row_b = (np.arange(h - 1) + 1) % block_size == 0
    boundary_sum = dh[:, col_b].sum() + dv[row_b, :].sum()
    boundary_n = h * col_b.sum() + w * row_b.sum()
    inner_sum = dh[:, ~col_b].sum() + dv[~row_b, :].sum()
    inner_n = h * (~col_b).sum() + w * (~row_b).sum()
    d_b = boundary_sum / boundary_n
    d_c = inner_sum / inner_n
    eta = math.log2(block_size) / math.log2(min(h, w))
    return float(eta * max(d_b - d_c, 0.0))


def psnr_b(reference, candidate, block_size: int = 8) -> float:
    """PSNR with the candidate's blocking effect factor added to the MSE."""
    return _db(mse(reference, candidate) + bef(candidate, block_size))


def psnr_gain(restored_db: float, baseline_db: float) -> float:
    """Increase in dB of a restored image over its distorted baseline."""
    return restored_db - baseline_db


def _check_same_reference(restored_pair, baseline_pair) -> None:
    if not np.array_equal(np.asarray(restored_pair[0]), np.asarray(baseline_pair[0])):
        raise ValueError("restored and baseline pairs use different reference images")


def ipsnr(restored_pair, baseline_pair) -> float:
    """PSNR gain; each pair is ``(reference, candidate)`` and both share the reference."""
    _check_same_reference(restored_pair, baseline_pair)
    return psnr_gain(psnr(*restored_pair), psnr(*baseline_pair))


def ipsnr_b(restored_pair, baseline_pair) -> float:
    _check_same_reference(restored_pair, baseline_pair)
    return psnr_gain(psnr_b(*restored_pair), psnr_b(*baseline_pair))


def snap_to_8bit(image) -> np.ndarray:
    """Clamp to [0,1] and round to the nearest k/255."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5) / 255.0


@dataclass
class ImageMetrics:
    image: str
    psnr: float
    psnr_b: float
    ssim: float
    ipsnr: float | None = None
    ipsnr_b: float | None = None


@dataclass
class MetricReport:
    rows: list[ImageMetrics] = field(default_factory=list)

    def add(self, name: str, reference, candidate, baseline=None) -> ImageMetrics:
        row = ImageMetrics(name, psnr(reference, candidate), psnr_b(reference, candidate),
                           ssim(reference, candidate))
        if baseline is not None:
            row.ipsnr = psnr_gain(row.psnr, psnr(reference, baseline))
            row.ipsnr_b = psnr_gain(row.psnr_b, psnr_b(reference, baseline))
        self.rows.append(row)
        return row

    def mean(self, key: str) -> float | None:
        values = [getattr(r, key) for r in self.rows]
        if not values or any(v is None for v in values):
            return None
        return float(np.mean(values))

    @property
    def means(self) -> ImageMetrics:
        return ImageMetrics("MEAN", self.mean("psnr"), self.mean("psnr_b"), self.mean("ssim"),
                            self.mean("ipsnr"), self.mean("ipsnr_b"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "psnr", "psnr_b", "ssim", "ipsnr", "ipsnr_b"])
        for r in [*self.rows, self.means]:
            writer.writerow([r.image] + [_fmt(getattr(r, k)) for k in ("psnr", "psnr_b", "ssim", "ipsnr", "ipsnr_b")])
        return buf.getvalue()


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"
