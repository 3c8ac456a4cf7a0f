"""JPEG degradation simulator for luma images (block DCT, quantization, no entropy coding)."""

from __future__ import annotations

import numpy as np

# ITU-T T.81 Annex K, table K.1 (luminance)
BASE_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int32)


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)[:, None]
    n = np.arange(8)[None, :]
    m = np.cos((2 * n + 1) * k * np.pi / 16) * np.sqrt(2 / 8)
    m[0] /= np.sqrt(2)
    return m


DCT8 = _dct_matrix()


def check_quality(qf) -> int:
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be an integer in [1, 100], got {qf!r}")
    return int(qf)


def scale_table(base: np.ndarray, qf: int) -> np.ndarray:
    """IJG quality scaling of a quantization table."""
    qf = check_quality(qf)
    s = 5000 // qf if qf < 50 else 200 - 2 * qf
    scaled = (np.asarray(base, dtype=np.int64) * s + 50) // 100
    return np.clip(scaled, 1, 255).astype(np.int32)


def dct8(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes (each of size 8)."""
    return DCT8 @ block @ DCT8.T


def idct8(coeffs: np.ndarray) -> np.ndarray:
    return DCT8.T @ coeffs @ DCT8


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def degrade(luma: np.ndarray, qf: int, table: np.ndarray = BASE_LUMA_TABLE) -> np.ndarray:
    """Compress and decompress a [0,1] luma image; returns an image on the 8-bit grid.

    The input is first snapped to 8-bit. Sizes that are not multiples of 8
    are padded by edge replication and cropped back afterwards.
    """
    img = np.asarray(luma, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"degrade expects a non-empty 2-D image, got shape {img.shape}")
    q = scale_table(table, qf).astype(np.float64)
    h, w = img.shape
    ph, pw = -h % 8, -w % 8
    pix = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)
    if ph or pw:
        pix = np.pad(pix, ((0, ph), (0, pw)), mode="edge")
    H, W = pix.shape
    blocks = (pix - 128.0).reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coeffs = _round_half_away(dct8(blocks) / q) * q
    rec = idct8(coeffs).transpose(0, 2, 1, 3).reshape(H, W) + 128.0
    rec = np.clip(np.floor(rec + 0.5), 0.0, 255.0)[:h, :w]
    return rec / 255.0
