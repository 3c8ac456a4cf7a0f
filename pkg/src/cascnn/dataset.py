"""Luma patch datasets: Netpbm I/O, colour conversion, cut-outs, splits, synthetic images."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import check_quality, degrade
from .fileio import atomic_write_bytes

# ---------------------------------------------------------------------------
# Netpbm (binary P5/P6, maxval 255)

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


class NetpbmError(ValueError):
    pass


def read_netpbm(path) -> np.ndarray:
    """Read a binary PGM ([H,W] uint8) or PPM ([H,W,3] uint8)."""
    blob = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise NetpbmError(f"{path}: malformed header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r} (only P5/P6)")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise NetpbmError(f"{path}: non-numeric header field") from exc
    if maxval != 255:
        raise NetpbmError(f"{path}: maxval {maxval} unsupported (only 255)")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise NetpbmError(f"{path}: missing whitespace after header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    raster = blob[pos:pos + n]
    if len(raster) != n:
        raise NetpbmError(f"{path}: raster truncated ({len(raster)} of {n} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)


def encode_netpbm(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise NetpbmError(f"pixels must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def write_netpbm(path, pixels: np.ndarray) -> None:
    atomic_write_bytes(path, encode_netpbm(pixels))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 with round-half-up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255.0 + 0.5).astype(np.uint8)


def read_luma(path) -> np.ndarray:
    """Load an image as [0,1] luma; colour images are converted."""
    px = read_netpbm(path)
    return rgb_to_luma(px) if px.ndim == 3 else px.astype(np.float64) / 255.0


def write_luma(path, luma: np.ndarray) -> None:
    write_netpbm(path, to_uint8(luma))


# ---------------------------------------------------------------------------
# colour (full-range BT.601, JFIF convention)

def _check_rgb(rgb) -> np.ndarray:
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an [H,W,3] RGB image, got shape {arr.shape}")
    return arr.astype(np.float64)


def _round8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255)


def rgb_to_luma(rgb) -> np.ndarray:
    arr = _check_rgb(rgb)
    y = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    return _round8(y) / 255.0


def rgb_to_ycbcr(rgb) -> np.ndarray:
    """8-bit RGB -> 8-bit YCbCr planes as uint8 [H,W,3]."""
    r, g, b = np.moveaxis(_check_rgb(rgb), 2, 0)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([_round8(y), _round8(cb), _round8(cr)], axis=2).astype(np.uint8)


def ycbcr_to_rgb(ycc) -> np.ndarray:
    y, cb, cr = np.moveaxis(np.asarray(ycc, dtype=np.float64), 2, 0)
    r = y + 1.402 * (cr - 128)
    g = y - 0.344136 * (cb - 128) - 0.714136 * (cr - 128)
    b = y + 1.772 * (cb - 128)
    return np.stack([_round8(r), _round8(g), _round8(b)], axis=2).astype(np.uint8)


# ---------------------------------------------------------------------------
# patches and pairs

def extract_patches(image: np.ndarray, size: int = 120, stride: int | None = None,
                    count: int | None = None, seed: int = 0) -> list[np.ndarray]:
    """Cut square patches from an image.

    By default a non-overlapping grid (``stride = size``) scanned row-major
    from the top-left corner. With ``count`` set, that many cut-outs are
    placed at seeded random positions instead. Images smaller than ``size``
    in either dimension yield no patches.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    if h < size or w < size:
        return []
    if count is not None:
        rng = np.random.default_rng(seed)
        tops = rng.integers(0, h - size + 1, size=count)
        lefts = rng.integers(0, w - size + 1, size=count)
        return [img[t:t + size, l:l + size].copy() for t, l in zip(tops, lefts)]
    stride = size if stride is None else stride
    return [img[t:t + size, l:l + size].copy()
            for t in range(0, h - size + 1, stride)
            for l in range(0, w - size + 1, stride)]


@dataclass
class PatchSet:
    """Aligned (distorted, reference) luma patches with split tags."""

    distorted: np.ndarray  # [N,H,W] float32 in [0,1]
    reference: np.ndarray
    patch_ids: list[str]
    sources: list[str]
    splits: list[str]
    qf: int

    def __len__(self) -> int:
        return len(self.patch_ids)

    def subset(self, split: str) -> "PatchSet":
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return PatchSet(self.distorted[idx], self.reference[idx],
                        [self.patch_ids[i] for i in idx], [self.sources[i] for i in idx],
                        [split] * len(idx), self.qf)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """[B,1,H,W] float32 arrays (distorted, reference)."""
        idx = np.asarray(indices)
        return self.distorted[idx][:, None], self.reference[idx][:, None]


def assign_splits(n: int, ratios: Sequence[float], seed: int,
                  names: Sequence[str] = ("train", "val", "test")) -> list[str]:
    if n < 1:
        raise ValueError("nothing to split")
    if any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"invalid split ratios {ratios}")
    if len(ratios) > len(names):
        raise ValueError(f"at most {len(names)} split ratios supported")
    fracs = np.asarray(ratios, dtype=np.float64) / sum(ratios)
    counts = np.floor(fracs * n).astype(int)
    # hand out the remainder to the largest fractional parts, earlier splits first on ties
    rem = n - counts.sum()
    order = np.argsort(-(fracs * n - counts), kind="stable")
    counts[order[:rem]] += 1
    perm = np.random.default_rng(seed).permutation(n)
    labels = [""] * n
    start = 0
    for name, c in zip(names, counts):
        for i in perm[start:start + c]:
            labels[i] = name
        start += c
    return labels


def build_pairs(images: Sequence[np.ndarray], qf: int, ratios: Sequence[float] = (0.8, 0.2),
                seed: int = 0, sources: Sequence[str] | None = None) -> PatchSet:
    """Pair every reference patch with its degraded version and assign splits."""
    qf = check_quality(qf)
    if len(images) == 0:
        raise ValueError("build_pairs: no input patches")
    shape = np.asarray(images[0]).shape
    if any(np.asarray(im).shape != shape for im in images):
        raise ValueError("build_pairs: all patches must share one shape")
    sources = list(sources) if sources is not None else [f"img{i:05d}" for i in range(len(images))]
    ref = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    dist = np.stack([degrade(im, qf) for im in ref])
    ids = [f"p{i:06d}" for i in range(len(images))]
    return PatchSet(dist.astype(np.float32), ref.astype(np.float32), ids, sources,
                    assign_splits(len(images), ratios, seed), qf)


# ---------------------------------------------------------------------------
# on-disk datasets: <root>/manifest.csv, <root>/ref/<id>.pgm, <root>/dist/<id>.pgm

MANIFEST_FIELDS = ["patch_id", "source", "qf", "split"]


def write_manifest(path, patch_ids, sources, qfs, splits) -> None:
    rows = [",".join(MANIFEST_FIELDS)]
    for pid, src, qf, split in zip(patch_ids, sources, qfs, splits):
        rows.append(f"{pid},{src},{qf},{split}")
    atomic_write_bytes(path, ("\n".join(rows) + "\n").encode("utf-8"))


def read_manifest(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        return list(reader)


def save_patchset(root, ps: PatchSet) -> None:
    root = Path(root)
    (root / "ref").mkdir(parents=True, exist_ok=True)
    (root / "dist").mkdir(parents=True, exist_ok=True)
    for i, pid in enumerate(ps.patch_ids):
        write_luma(root / "ref" / f"{pid}.pgm", ps.reference[i])
        write_luma(root / "dist" / f"{pid}.pgm", ps.distorted[i])
    write_manifest(root / "manifest.csv", ps.patch_ids, ps.sources, [ps.qf] * len(ps), ps.splits)


def load_patchset(root) -> PatchSet:
    root = Path(root)
    rows = read_manifest(root / "manifest.csv")
    if not rows:
        raise ValueError(f"{root}: manifest lists no patches")
    qfs = {int(r["qf"]) for r in rows}
    if len(qfs) != 1:
        raise ValueError(f"{root}: mixed quality factors {sorted(qfs)} in one dataset")
    ref = np.stack([read_luma(root / "ref" / f"{r['patch_id']}.pgm") for r in rows]).astype(np.float32)
    dist = np.stack([read_luma(root / "dist" / f"{r['patch_id']}.pgm") for r in rows]).astype(np.float32)
    return PatchSet(dist, ref, [r["patch_id"] for r in rows], [r["source"] for r in rows],
                    [r["split"] for r in rows], qfs.pop())


def list_images(directory) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".pgm", ".ppm") and p.is_file())


# ---------------------------------------------------------------------------
# synthetic corpus

def synth_image(rng: np.random.Generator, size: int | tuple[int, int]) -> np.ndarray:
    """One image mixing smooth gradients, sinusoidal texture, hard edges and rectangles."""
    h, w = (size, size) if isinstance(size, int) else size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    img = rng.uniform(0.2, 0.8) + rng.uniform(-0.4, 0.4) * xx + rng.uniform(-0.4, 0.4) * yy

    for _ in range(rng.integers(1, 3)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 14)
        amp = rng.uniform(0.03, 0.15)
        img += amp * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))

    theta = rng.uniform(0, 2 * np.pi)
    offset = rng.uniform(-0.3, 0.3)
    step = (xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta) > offset
    img += rng.uniform(-0.35, 0.35) * step

    for _ in range(rng.integers(2, 6)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        rh, rw = rng.integers(max(2, h // 16), max(3, h // 3)), rng.integers(max(2, w // 16), max(3, w // 3))
        img[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0, 1)

    return np.floor(np.clip(img, 0, 1) * 255 + 0.5) / 255.0


def synth_corpus(n: int, size: int | tuple[int, int] = 120, seed: int = 0) -> list[np.ndarray]:
    """Seeded list of [0,1] luma images on the 8-bit grid."""
    if n < 1:
        raise ValueError("synth_corpus needs n >= 1")
    rng = np.random.default_rng(seed)
    return [synth_image(rng, size) for _ in range(n)]


def write_images(directory, images: Iterable[np.ndarray], prefix: str = "synth") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, im in enumerate(images):
        p = d / f"{prefix}{i:04d}.pgm"
        write_luma(p, im)
        paths.append(p)
    return paths
