"""NetPBM codec, dataset indexing, preprocessing and synthetic data."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from meun.autodiff.ops import interp_matrix
from meun.errors import ConfigError, EmptyDatasetError, NetPBMError, UnsupportedDepthError

PathLike = Union[str, os.PathLike]

MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])
IMAGE_SUFFIXES = (".ppm", ".pgm")
MASK_THRESHOLD = 128

# -- NetPBM -----------------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetPBMError("unexpected end of header", start)
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode binary P5/P6 bytes to uint8 (h, w) or (h, w, 3)."""
    if buf[:2] not in (b"P5", b"P6"):
        raise NetPBMError(f"bad magic {buf[:2]!r}, expected P5 or P6", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise NetPBMError(f"invalid {what} {tok!r}", pos - len(tok))
        values.append(int(tok))
    w, h, maxval = values
    if maxval != 255:
        raise UnsupportedDepthError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise NetPBMError("missing whitespace after maxval", pos)
    pos += 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise NetPBMError(f"raster truncated: need {need} bytes, have {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def encode_netpbm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"NetPBM encoding needs uint8 data, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def read_netpbm(path: PathLike) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def write_netpbm(path: PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_netpbm(arr))


def load_image(path: PathLike) -> np.ndarray:
    """(3, H, W) float64 in [0, 1]; grayscale is replicated to three channels."""
    raw = read_netpbm(path)
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_mask(path: PathLike) -> np.ndarray:
    raw = read_netpbm(path)
    if raw.ndim == 3:
        raw = raw.mean(axis=2)
    return (raw >= MASK_THRESHOLD).astype(np.uint8)


def save_probability_map(path: PathLike, probs: np.ndarray) -> None:
    q = np.clip(np.floor(np.asarray(probs, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    write_netpbm(path, q)


def save_mask(path: PathLike, mask: np.ndarray) -> None:
    write_netpbm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


# -- datasets --------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    mask: Optional[np.ndarray]
    id: str


@dataclass(frozen=True)
class DatasetIndex:
    """Image/mask pairs under ``<root>/images`` and ``<root>/masks``, matched by stem."""

    root: Path
    pairs: tuple

    @classmethod
    def from_root(cls, root: PathLike) -> "DatasetIndex":
        root = Path(root)
        images = {p.stem: p for p in (root / "images").iterdir() if p.suffix in IMAGE_SUFFIXES}
        masks = {p.stem: p for p in (root / "masks").iterdir() if p.suffix == ".pgm"}
        missing = sorted(set(images) - set(masks))
        if missing:
            raise FileNotFoundError(f"no mask for images: {', '.join(missing)}")
        pairs = tuple((images[s], masks[s]) for s in sorted(images))
        if not pairs:
            raise EmptyDatasetError(f"no images under {root / 'images'}")
        return cls(root, pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def stems(self) -> list[str]:
        return [img.stem for img, _ in self.pairs]

    def load(self, i: int) -> Sample:
        img, msk = self.pairs[i]
        return Sample(load_image(img), load_mask(msk), img.stem)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.load(i)


def list_images(directory: PathLike) -> list[Path]:
    return sorted((p for p in Path(directory).iterdir() if p.suffix in IMAGE_SUFFIXES), key=lambda p: p.stem)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes with the same sampling rule as the network's upsampler."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.astype(np.float64, copy=True)
    return interp_matrix(h, out_h) @ np.asarray(arr, dtype=np.float64) @ interp_matrix(w, out_w).T


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return mask[rows[:, None], cols[None, :]]


def normalize(image: np.ndarray) -> np.ndarray:
    return (image - MEAN[:, None, None]) / STD[:, None, None]


def preprocess(sample: Sample, target: int) -> Sample:
    if target < 32 or target % 32:
        raise ConfigError(f"target size must be a positive multiple of 32, got {target}")
    image = normalize(resize_bilinear(sample.image, target, target))
    mask = None if sample.mask is None else resize_nearest(sample.mask, target, target)
    return Sample(image, mask, sample.id)


# -- synthetic data --------------------------------------------------------------


def _synth_pair(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.2, 0.8, size=3)
    fx, fy = rng.uniform(0.05, 0.4, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.12 * np.sin(fx * xx + fy * yy + phase)
    noise = rng.normal(0.0, 0.05, size=(3, size, size))
    image = base[:, None, None] + stripes[None] + noise
    mask = np.zeros((size, size), dtype=bool)
    lo, hi = max(2, size // 8), max(3, size // 2)
    for _ in range(int(rng.integers(1, 4))):
        hh, ww = rng.integers(lo, hi, size=2)
        top = int(rng.integers(1, size - hh - 1))
        left = int(rng.integers(1, size - ww - 1))
        if rng.uniform() < 0.5:
            shape = np.zeros_like(mask)
            shape[top : top + hh, left : left + ww] = True
        else:
            cy, cx = top + hh / 2, left + ww / 2
            shape = ((yy + 0.5 - cy) / (hh / 2)) ** 2 + ((xx + 0.5 - cx) / (ww / 2)) ** 2 <= 1.0
        mask |= shape
        color = rng.uniform(0.0, 1.0, size=3)
        image[:, shape] = color[:, None] + rng.normal(0.0, 0.03, size=(3, int(shape.sum())))
    image = np.clip(image, 0.0, 1.0)
    return (image.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8), mask.astype(np.uint8)


def synth_dataset(root: PathLike, seed: int, n: int, size: int) -> DatasetIndex:
    """Write ``n`` random shape images and exact masks under ``root``.

    Every mask has at least one foreground and one background pixel: shapes
    are at least 2 pixels wide and never touch the one-pixel border.
    """
    if n <= 0:
        raise EmptyDatasetError("synth_dataset needs n >= 1")
    if size < 8:
        raise ConfigError(f"synthetic images need size >= 8, got {size}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        image, mask = _synth_pair(rng, size)
        write_netpbm(root / "images" / f"img_{i:04d}.ppm", image)
        save_mask(root / "masks" / f"img_{i:04d}.pgm", mask)
    return DatasetIndex.from_root(root)
