"""Image I/O, bicubic degradation, colour conversion and training patches."""

from __future__ import annotations

import os
import queue
import shutil
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

# --------------------------------------------------------------------------
# images


@dataclass
class ImageU8:
    """8-bit image stored as an (H, W, C) array, RGB channel order."""

    pixels: np.ndarray
    name: str = ""

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] not in (1, 3):
            raise ValueError(f"ImageU8 needs uint8 (H, W, 1|3) pixels, got {p.dtype} {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"ImageU8 extents must be positive, got {p.shape[:2]}")
        self.pixels = np.ascontiguousarray(p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_float(self) -> np.ndarray:
        """(H, W, C) float32 in [0, 1]."""
        return self.pixels.astype(np.float32) / 255.0


def load_png(path) -> ImageU8:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            if im.mode.startswith("I;16") or im.mode in ("I", "F"):
                raise ValueError(f"{path}: only 8-bit images are supported (mode {im.mode})")
            im = im.convert("RGB")
        arr = np.array(im, dtype=np.uint8)
    return ImageU8(arr, name=Path(path).stem)


def save_png(img: ImageU8, path) -> None:
    arr = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L" if img.channels == 1 else "RGB").save(path, format="PNG")


def quantize(img: np.ndarray) -> np.ndarray:
    """Float [0, 1] -> uint8 with clamping and round-half-away-from-zero."""
    v = np.clip(np.asarray(img, dtype=np.float64) * 255.0, 0.0, 255.0)
    return np.floor(v + 0.5).astype(np.uint8)


def modcrop(img: ImageU8, scale: int) -> ImageU8:
    h, w = img.height - img.height % scale, img.width - img.width % scale
    return ImageU8(img.pixels[:h, :w], name=img.name)


# --------------------------------------------------------------------------
# bicubic resampling


def _cubic(x: np.ndarray) -> np.ndarray:
    # Keys kernel, a = -0.5
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return (1.5 * ax3 - 2.5 * ax2 + 1.0) * (ax <= 1) + (-0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0) * (
        (ax > 1) & (ax <= 2)
    )


def resize_weights(in_len: int, out_len: int, antialias: bool = True, boundary: str = "symmetric"):
    """Sparse interpolation matrix for one axis as (indices, weights), each [out_len, taps]."""
    scale = out_len / in_len
    width = 4.0
    kernel = _cubic
    if scale < 1 and antialias:
        width /= scale
        kernel = lambda x: scale * _cubic(scale * x)  # noqa: E731
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - width / 2.0)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w = w / w.sum(axis=1, keepdims=True)
    idx = idx.astype(np.int64) - 1
    if boundary == "symmetric":
        period = 2 * in_len
        m = np.mod(idx, period)
        idx = np.where(m < in_len, m, period - 1 - m)
    elif boundary == "edge":
        idx = np.clip(idx, 0, in_len - 1)
    else:
        raise ValueError(f"unknown boundary rule {boundary!r}")
    keep = np.any(w != 0, axis=0)
    return idx[:, keep], w[:, keep]


def _resize_axis(img: np.ndarray, axis: int, out_len: int, antialias: bool, boundary: str) -> np.ndarray:
    idx, w = resize_weights(img.shape[axis], out_len, antialias, boundary)
    moved = np.moveaxis(img, axis, 0)
    gathered = moved[idx]  # [out, taps, ...]
    w = w.reshape(w.shape + (1,) * (moved.ndim - 1))
    return np.moveaxis((gathered * w).sum(axis=1), 0, axis)


def bicubic_resize(
    img: np.ndarray, out_w: int, out_h: int, antialias: bool = True, boundary: str = "symmetric"
) -> np.ndarray:
    """Resample an (H, W) or (H, W, C) float image with imresize-style bicubic.

    Half-pixel-centred coordinates, Keys kernel (a = -0.5) widened by the
    scale factor when shrinking. The axis with the stronger reduction is
    processed first. Output dtype is float64.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {img.shape}")
    sh, sw = out_h / img.shape[0], out_w / img.shape[1]
    order = [(0, out_h), (1, out_w)] if sh <= sw else [(1, out_w), (0, out_h)]
    for axis, n in order:
        if img.shape[axis] != n:
            img = _resize_axis(img, axis, n, antialias, boundary)
    return img


def downscale(img: ImageU8, scale: int) -> ImageU8:
    """Bicubic 1/scale reduction of a mod-cropped image, re-quantized to 8 bits."""
    img = modcrop(img, scale)
    small = bicubic_resize(img.pixels.astype(np.float64) / 255.0, img.width // scale, img.height // scale)
    return ImageU8(quantize(small), name=img.name)


def bicubic_upscale(lr: np.ndarray, scale: int) -> np.ndarray:
    """(3, h, w) float -> (3, s*h, s*w) float; the no-learning baseline model."""
    hwc = np.transpose(lr, (1, 2, 0))
    up = bicubic_resize(hwc, hwc.shape[1] * scale, hwc.shape[0] * scale)
    return np.ascontiguousarray(np.transpose(up, (2, 0, 1)))


# --------------------------------------------------------------------------
# colour


Y_COEFFS = np.array([65.481, 128.553, 24.966])


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Studio-swing BT.601 luma of an (H, W, 3) RGB image in [0, 1]; result in [16/255, 235/255]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"rgb_to_y expects (H, W, 3), got {img.shape}")
    return (16.0 + img @ Y_COEFFS) / 255.0


# --------------------------------------------------------------------------
# geometry


def dihedral(img: np.ndarray, k: int, axes: tuple[int, int] = (-2, -1)) -> np.ndarray:
    """k % 4 quarter-turns, then a horizontal flip when k >= 4."""
    if not 0 <= k < 8:
        raise ValueError(f"dihedral index must be in 0..7, got {k}")
    out = np.rot90(img, k % 4, axes=axes)
    if k >= 4:
        out = np.flip(out, axis=axes[1])
    return np.ascontiguousarray(out)


def dihedral_inverse(img: np.ndarray, k: int, axes: tuple[int, int] = (-2, -1)) -> np.ndarray:
    if not 0 <= k < 8:
        raise ValueError(f"dihedral index must be in 0..7, got {k}")
    out = np.flip(img, axis=axes[1]) if k >= 4 else img
    return np.ascontiguousarray(np.rot90(out, -(k % 4), axes=axes))


# --------------------------------------------------------------------------
# training samples


@dataclass
class SamplePair:
    lr: np.ndarray  # (3, p, p) float32
    hr: np.ndarray  # (3, s*p, s*p) float32

    def __post_init__(self):
        if self.lr.ndim != 3 or self.hr.ndim != 3:
            raise ValueError("SamplePair arrays must be (C, H, W)")
        s = self.hr.shape[1] / self.lr.shape[1]
        if self.hr.shape[1:] != (round(s) * self.lr.shape[1], round(s) * self.lr.shape[2]):
            raise ValueError(f"misaligned pair: lr {self.lr.shape} hr {self.hr.shape}")


def random_crop_pair(hr: ImageU8, lr: ImageU8, patch: int, scale: int, rng: np.random.Generator) -> SamplePair:
    label = hr.name or lr.name or "<image>"
    if (hr.height, hr.width) != (scale * lr.height, scale * lr.width):
        raise ValueError(
            f"{label}: HR {hr.width}x{hr.height} is not {scale}x LR {lr.width}x{lr.height}"
        )
    if lr.height < patch or lr.width < patch:
        raise ValueError(f"{label}: LR image {lr.width}x{lr.height} is smaller than patch {patch}")
    y = int(rng.integers(0, lr.height - patch + 1))
    x = int(rng.integers(0, lr.width - patch + 1))
    lp = lr.pixels[y : y + patch, x : x + patch]
    hp = hr.pixels[scale * y : scale * (y + patch), scale * x : scale * (x + patch)]
    to_chw = lambda a: np.ascontiguousarray(a.transpose(2, 0, 1), dtype=np.float32) / np.float32(255)  # noqa: E731
    return SamplePair(to_chw(lp), to_chw(hp))


def augment_pair(pair: SamplePair, k: int) -> SamplePair:
    """Same dihedral transform on both halves of a pair."""
    return SamplePair(dihedral(pair.lr, k), dihedral(pair.hr, k))


@dataclass
class DatasetSpec:
    pairs: list[tuple[str, str]]
    scale: int
    seed: int = 0

    def validate(self) -> None:
        for hr, lr in self.pairs:
            for p in (hr, lr):
                if not os.path.isfile(p):
                    raise FileNotFoundError(f"dataset file missing: {p}")


def read_manifest(path, scale: int, seed: int = 0) -> DatasetSpec:
    """Parse ``hr_path<TAB>lr_path`` lines; relative paths resolve against the manifest's directory."""
    root = Path(path).parent
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'hr_path<TAB>lr_path'")
        pairs.append(tuple(str(p if os.path.isabs(p) else root / p) for p in parts))
    return DatasetSpec(pairs, scale, seed)


def write_manifest(path, pairs: Iterable[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{hr}\t{lr}\n" for hr, lr in pairs))


@dataclass
class PairSet:
    """Decoded (HR, LR) pairs, HR mod-cropped to exactly scale x LR."""

    pairs: list[tuple[ImageU8, ImageU8]]
    scale: int
    seed: int = 0

    @classmethod
    def load(cls, spec: DatasetSpec) -> "PairSet":
        spec.validate()
        out = []
        for hp, lp in spec.pairs:
            hr, lr = load_png(hp), load_png(lp)
            out.append((align_hr(hr, lr, spec.scale), lr))
        return cls(out, spec.scale, spec.seed)

    @classmethod
    def from_hr(cls, images: Sequence[ImageU8], scale: int, seed: int = 0) -> "PairSet":
        out = []
        for hr in images:
            hr = modcrop(hr, scale)
            out.append((hr, downscale(hr, scale)))
        return cls(out, scale, seed)


def align_hr(hr: ImageU8, lr: ImageU8, scale: int) -> ImageU8:
    h, w = scale * lr.height, scale * lr.width
    if hr.height < h or hr.width < w:
        raise ValueError(f"{hr.name}: HR {hr.width}x{hr.height} smaller than {scale}x LR {lr.width}x{lr.height}")
    return ImageU8(hr.pixels[:h, :w], name=hr.name)


def make_batch(data: PairSet, batch_size: int, patch: int, step: int, augment: bool = True):
    """Batch for one optimizer step, determined solely by (seed, step)."""
    rng = np.random.default_rng([data.seed, step])
    lrs, hrs, ids = [], [], []
    for _ in range(batch_size):
        i = int(rng.integers(len(data.pairs)))
        hr, lr = data.pairs[i]
        pair = random_crop_pair(hr, lr, patch, data.scale, rng)
        if augment:
            pair = augment_pair(pair, int(rng.integers(8)))
        lrs.append(pair.lr)
        hrs.append(pair.hr)
        ids.append(i)
    return np.stack(lrs), np.stack(hrs), ids


def batch_iter(
    data: PairSet, batch_size: int, patch: int, start_step: int = 0, stop_step: int | None = None, prefetch: int = 0
) -> Iterator[tuple[int, np.ndarray, np.ndarray, list[int]]]:
    """Yield ``(step, lr, hr, image_ids)``; ``prefetch`` > 0 decodes ahead in a thread."""

    def gen():
        step = start_step
        while stop_step is None or step < stop_step:
            yield (step, *make_batch(data, batch_size, patch, step))
            step += 1

    return _prefetched(gen(), prefetch) if prefetch > 0 else gen()


_DONE = object()


def _prefetched(it: Iterator, depth: int) -> Iterator:
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def worker():
        try:
            for item in it:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except BaseException as exc:  # surface worker errors in the consumer
            q.put(exc)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


# --------------------------------------------------------------------------
# dataset preparation


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def prepare(hr_dir, out_root, scales: Sequence[int] = (2, 3, 4)) -> dict[int, Path]:
    """Write ``HR/``, ``LR_x{s}/`` and ``manifest_x{s}.txt`` under ``out_root``.

    Re-running on the same inputs rewrites byte-identical files.
    """
    out_root = Path(out_root)
    hr_out = out_root / "HR"
    hr_out.mkdir(parents=True, exist_ok=True)
    sources = list_pngs(hr_dir)
    if not sources:
        raise FileNotFoundError(f"no PNG files in {hr_dir}")
    manifests = {}
    for src in sources:
        dst = hr_out / src.name
        if src.resolve() != dst.resolve():
            shutil.copyfile(src, dst)
    for s in scales:
        if s not in (2, 3, 4):
            raise ValueError(f"unsupported scale {s}")
        lr_dir = out_root / f"LR_x{s}"
        lr_dir.mkdir(exist_ok=True)
        rows = []
        for src in sources:
            save_png(downscale(load_png(src), s), lr_dir / src.name)
            rows.append((f"HR/{src.name}", f"LR_x{s}/{src.name}"))
        manifests[s] = out_root / f"manifest_x{s}.txt"
        write_manifest(manifests[s], rows)
    return manifests


@dataclass
class EvalItem:
    name: str
    hr: ImageU8
    lr: ImageU8


def load_eval_set(root, scale: int) -> list[EvalItem]:
    """Pairs from a prepared tree; LR is generated on the fly when ``LR_x{s}`` is absent."""
    root = Path(root)
    hr_dir = root / "HR" if (root / "HR").is_dir() else root
    lr_dir = root / f"LR_x{scale}"
    items = []
    for hp in list_pngs(hr_dir):
        hr = load_png(hp)
        if lr_dir.is_dir():
            lr = load_png(lr_dir / hp.name)
        else:
            lr = downscale(hr, scale)
        items.append(EvalItem(hp.stem, align_hr(hr, lr, scale), lr))
    if not items:
        raise FileNotFoundError(f"no PNG images under {hr_dir}")
    return items
