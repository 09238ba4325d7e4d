"""Luma PSNR/SSIM, geometric self-ensemble and benchmark reports."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import EvalItem, ImageU8, dihedral, dihedral_inverse, quantize, rgb_to_y

ModelFn = Callable[[np.ndarray], np.ndarray]


def y_plane(img: ImageU8) -> np.ndarray:
    """Luma on the 0..255 scale (not rounded)."""
    if img.channels == 1:
        return img.pixels[:, :, 0].astype(np.float64)
    return rgb_to_y(img.pixels.astype(np.float64) / 255.0) * 255.0


def _shaved_planes(sr: ImageU8, hr: ImageU8, shave: int) -> tuple[np.ndarray, np.ndarray]:
    if sr.pixels.shape != hr.pixels.shape:
        raise ValueError(f"image extents differ: {sr.pixels.shape} vs {hr.pixels.shape}")
    a, b = y_plane(sr), y_plane(hr)
    if shave:
        if 2 * shave >= a.shape[0] or 2 * shave >= a.shape[1]:
            raise ValueError(f"shave {shave} leaves nothing of a {a.shape[1]}x{a.shape[0]} image")
        a, b = a[shave:-shave, shave:-shave], b[shave:-shave, shave:-shave]
    return a, b


def psnr_y(sr: ImageU8, hr: ImageU8, shave: int = 0) -> float:
    """PSNR in dB on the luma plane; ``inf`` for identical planes."""
    a, b = _shaved_planes(sr, hr, shave)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    img = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(img, k, axis=1) @ g


def ssim_plane(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian (sigma 1.5), mean over valid windows."""
    g = gaussian_window()
    if a.shape[0] < g.size or a.shape[1] < g.size:
        raise ValueError(f"SSIM needs planes of at least {g.size}x{g.size}, got {a.shape}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim_y(sr: ImageU8, hr: ImageU8, shave: int = 0) -> float:
    a, b = _shaved_planes(sr, hr, shave)
    if np.array_equal(a, b):
        return 1.0
    return ssim_plane(a, b)


def self_ensemble(model_fn: ModelFn, lr: np.ndarray) -> np.ndarray:
    """Average of the model over the 8 dihedral transforms of a (C, h, w) input, each mapped back."""
    acc = None
    for k in range(8):
        out = dihedral_inverse(np.asarray(model_fn(dihedral(lr, k)), dtype=np.float64), k)
        if acc is None:
            acc = out.copy()
        elif out.shape != acc.shape:
            raise ValueError(f"model output under transform {k} has shape {out.shape}, expected {acc.shape}")
        else:
            acc += out
    return acc / 8.0


@dataclass
class EvalRow:
    name: str
    psnr: float
    ssim: float

    @property
    def infinite(self) -> bool:
        return math.isinf(self.psnr)


@dataclass
class EvalReport:
    dataset: str
    scale: int
    shave: int
    ensemble: bool = False
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def header(self) -> str:
        tag = "+" if self.ensemble else ""
        return f"{self.dataset} x{self.scale}{tag}  (Y channel, shave {self.shave})"

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [7])
        lines = [self.header(), f"{'image':<{width}}  {'PSNR':>8}  {'SSIM':>6}"]
        for r in self.rows:
            flag = "  (identical)" if r.infinite else ""
            lines.append(f"{r.name:<{width}}  {r.psnr:8.2f}  {r.ssim:6.4f}{flag}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:8.2f}  {self.mean_ssim:6.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "psnr_db", "ssim", "infinite"])
        for r in self.rows:
            w.writerow([r.name, f"{r.psnr:.6f}", f"{r.ssim:.6f}", int(r.infinite)])
        w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}", 0])
        return buf.getvalue()


def super_resolve(model_fn: ModelFn, lr: ImageU8, use_ensemble: bool = False) -> ImageU8:
    x = np.ascontiguousarray(lr.to_float().transpose(2, 0, 1))
    out = self_ensemble(model_fn, x) if use_ensemble else model_fn(x)
    return ImageU8(quantize(np.transpose(out, (1, 2, 0))), name=lr.name)


def evaluate_dataset(
    model_fn: ModelFn,
    items: Sequence[EvalItem],
    scale: int,
    use_ensemble: bool = False,
    shave: int | None = None,
    dataset: str = "dataset",
    workers: int = 1,
) -> EvalReport:
    """Super-resolve every LR image, quantize to 8 bits, score against HR.

    ``shave`` defaults to ``scale`` border pixels. Rows keep dataset order
    even when ``workers`` > 1.
    """
    shave = scale if shave is None else shave

    def one(item: EvalItem) -> EvalRow:
        sr = super_resolve(model_fn, item.lr, use_ensemble)
        if sr.pixels.shape != item.hr.pixels.shape:
            raise ValueError(f"{item.name}: model produced {sr.pixels.shape}, HR is {item.hr.pixels.shape}")
        return EvalRow(item.name, psnr_y(sr, item.hr, shave), ssim_y(sr, item.hr, shave))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, items))
    else:
        rows = [one(it) for it in items]
    return EvalReport(dataset, scale, shave, use_ensemble, rows)
