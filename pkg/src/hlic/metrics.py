"""Image quality metrics: MSE, PSNR, MS-SSIM, total variation, gradient loss.

MS-SSIM has a single implementation written against the autodiff ops, so the
float-returning metric and the differentiable training loss share code. All
metrics work on single-channel images; scale-free features (total variation,
gradient loss) are computed on the [0, 1]-normalized scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP = 100.0
# floor applied to per-scale contrast-structure means before the fractional power
CS_FLOOR = 1e-8


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    """Grayscale raster with values on [0, peak]."""

    data: np.ndarray
    peak: float = 255.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise MetricError(f"image must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise MetricError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > self.peak:
            raise MetricError(f"image values must lie in [0, {self.peak}]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class MsSsimConfig:
    n_scales: int = 5
    scale_weights: tuple = DEFAULT_SCALE_WEIGHTS
    window_radius: int = 5
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 255.0

    def __post_init__(self):
        if self.n_scales < 1:
            raise MetricError("n_scales must be >= 1")
        if len(self.scale_weights) < self.n_scales:
            raise MetricError("need one weight per scale")
        w = tuple(float(x) for x in self.scale_weights[: self.n_scales])
        total = sum(w)
        if abs(total - 1.0) > 1e-9:
            w = tuple(x / total for x in w)
        object.__setattr__(self, "scale_weights", w)

    @property
    def window_size(self) -> int:
        return 2 * self.window_radius + 1

    def min_size(self, n_scales: int | None = None) -> int:
        n = self.n_scales if n_scales is None else n_scales
        return self.window_size * 2 ** (n - 1)

    def fitted(self, height: int, width: int) -> "MsSsimConfig":
        """Drop coarse scales until the image is large enough; weights are renormalized."""
        side = min(height, width)
        n = self.n_scales
        while n > 1 and side < self.min_size(n):
            n -= 1
        if side < self.min_size(n):
            raise MetricError(
                f"image {height}x{width} too small: MS-SSIM needs min side >= {self.min_size(1)}")
        if n == self.n_scales:
            return self
        return replace(self, n_scales=n, scale_weights=self.scale_weights[:n])


def _pair(x, y) -> tuple[np.ndarray, np.ndarray, float]:
    if isinstance(x, Image) and isinstance(y, Image):
        if x.peak != y.peak:
            raise MetricError(f"peak mismatch: {x.peak} vs {y.peak}")
        a, b, peak = x.data, y.data, x.peak
    else:
        a = x.data if isinstance(x, Image) else np.asarray(x, dtype=np.float64)
        b = y.data if isinstance(y, Image) else np.asarray(y, dtype=np.float64)
        peak = x.peak if isinstance(x, Image) else (y.peak if isinstance(y, Image) else 255.0)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b, peak


def mse(x, y) -> float:
    a, b, _ = _pair(x, y)
    return float(np.mean((a - b) ** 2))


def psnr(x, y, cap: float = PSNR_CAP) -> float:
    a, b, peak = _pair(x, y)
    err = float(np.mean((a - b) ** 2))
    return psnr_from_mse(err, peak, cap)


def psnr_from_mse(err: float, peak: float = 255.0, cap: float = PSNR_CAP) -> float:
    if err <= 0.0:
        return cap
    return 10.0 * math.log10(peak * peak / err)


def ssim_maps(x: Tensor, y: Tensor, cfg: MsSsimConfig) -> tuple[Tensor, Tensor]:
    """Luminance and contrast-structure maps at one scale ("valid" window)."""
    c1 = (cfg.k1 * cfg.peak) ** 2
    c2 = (cfg.k2 * cfg.peak) ** 2
    r, s = cfg.window_radius, cfg.window_sigma

    def blur(t):
        return ad.gaussian_blur_2d(t, r, s)

    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = blur(x * x) - mu_xx
    var_y = blur(y * y) - mu_yy
    cov = blur(x * y) - mu_xy
    lum = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    cs = (2.0 * cov + c2) / (var_x + var_y + c2)
    return lum, cs


def ms_ssim_tensor(x, y, cfg: MsSsimConfig | None = None) -> Tensor:
    """Differentiable MS-SSIM over the last two axes; returns one value per image.

    Works on batches (..., H, W). The coarsest scale contributes the mean of the
    full SSIM map; finer scales contribute the mean contrast-structure term.
    """
    cfg = cfg or MsSsimConfig()
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    h, w = x.shape[-2:]
    if min(h, w) < cfg.min_size():
        raise MetricError(
            f"image {h}x{w} too small for {cfg.n_scales} scales: need min side >= {cfg.min_size()}")
    result = None
    for j, weight in enumerate(cfg.scale_weights):
        lum, cs = ssim_maps(x, y, cfg)
        if j < cfg.n_scales - 1:
            term = ad.reduce_mean(cs, axis=(-2, -1))
            x, y = ad.avg_downsample_2x(x), ad.avg_downsample_2x(y)
        else:
            term = ad.reduce_mean(lum * cs, axis=(-2, -1))
        term = ad.pow_const(ad.clamp_min(term, CS_FLOOR), weight)
        result = term if result is None else result * term
    return result


def ms_ssim(x, y, cfg: MsSsimConfig | None = None, fit: bool = False) -> float:
    """MS-SSIM of two images. With ``fit=True`` coarse scales are dropped for small images."""
    a, b, peak = _pair(x, y)
    cfg = cfg or MsSsimConfig(peak=peak)
    if fit:
        cfg = cfg.fitted(*a.shape)
    return float(ms_ssim_tensor(Tensor(a), Tensor(b), cfg).data)


def _forward_diffs(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.diff(a, axis=-1), np.diff(a, axis=-2)


def _mean_or_zero(a: np.ndarray) -> float:
    return float(np.mean(a)) if a.size else 0.0


def total_variation(x, peak: float | None = None) -> float:
    """Mean |horizontal diff| plus mean |vertical diff| on the [0, 1] scale."""
    if isinstance(x, Image):
        a, peak = x.data, x.peak
    else:
        a, peak = np.asarray(x, dtype=np.float64), peak or 255.0
    dh, dv = _forward_diffs(a / peak)
    return _mean_or_zero(np.abs(dh)) + _mean_or_zero(np.abs(dv))


def gradient_loss(x, y) -> float:
    """L1 distance between the forward-difference gradient fields of two images."""
    a, b, peak = _pair(x, y)
    ah, av = _forward_diffs(a / peak)
    bh, bv = _forward_diffs(b / peak)
    return _mean_or_zero(np.abs(ah - bh)) + _mean_or_zero(np.abs(av - bv))


@dataclass
class MetricReport:
    mse: float
    psnr: float
    ms_ssim: float
    total_variation: float
    gradient_loss: float
    n_scales: int = field(default=5)


def report(x: Image, y: Image, cfg: MsSsimConfig | None = None) -> MetricReport:
    """All metrics for a reference/distorted pair; MS-SSIM falls back to fewer scales if needed."""
    a, b, peak = _pair(x, y)
    cfg = (cfg or MsSsimConfig(peak=peak)).fitted(*a.shape)
    return MetricReport(
        mse=mse(x, y),
        psnr=psnr(x, y),
        ms_ssim=ms_ssim(x, y, cfg),
        total_variation=total_variation(y),
        gradient_loss=gradient_loss(x, y),
        n_scales=cfg.n_scales,
    )
