"""Shaped three-term reward comparing a trainee to baseline RD curves.

Each term measures a relative rate deviation:

* rate:    how far R = bpp_y + bpp_z is from the target rate;
* psnr:    how R compares with the rate the PSNR baseline needs for the same PSNR;
* ms_ssim: the same against the MS-SSIM baseline.

Terms are shaped as ``w * x**2`` or ``w * x`` and summed into a penalty; the
reward is its negation, so larger is better and a trainee that beats a
baseline (needs fewer bits for the same quality) is rewarded by a linear term.
"""
from __future__ import annotations

from dataclasses import dataclass

from .codec import EvalStats
from .rdcurve import RDCurve, metric_to_bpp

SHAPES = ("quadratic", "linear")
PRESETS = ("msssim_focus", "psnr_priority", "msssim_priority")


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class Shaping:
    kind: str
    weight: float

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise RewardError(f"unknown shaping {self.kind!r}; expected one of {SHAPES}")
        if not self.weight >= 0:
            raise RewardError(f"shaping weight must be >= 0, got {self.weight}")

    def __call__(self, x: float) -> float:
        return self.weight * (x * x if self.kind == "quadratic" else x)


@dataclass(frozen=True)
class RewardConfig:
    r_target: float
    rate: Shaping
    psnr: Shaping
    msssim: Shaping
    psnr_curve: RDCurve
    msssim_curve: RDCurve

    def __post_init__(self):
        if not self.r_target > 0:
            raise RewardError(f"r_target must be positive, got {self.r_target}")
        if self.psnr_curve.metric_kind != "psnr":
            raise RewardError("psnr_curve must have metric_kind 'psnr'")
        if self.msssim_curve.metric_kind != "ms_ssim":
            raise RewardError("msssim_curve must have metric_kind 'ms_ssim'")


@dataclass(frozen=True)
class RewardBreakdown:
    x_rate: float
    x_psnr: float
    x_msssim: float
    term_rate: float
    term_psnr: float
    term_msssim: float
    total: float


def compute_reward(stats: EvalStats, cfg: RewardConfig) -> RewardBreakdown:
    rate = stats.bpp_y + stats.bpp_z
    f1 = metric_to_bpp(cfg.psnr_curve, stats.psnr).value
    f2 = metric_to_bpp(cfg.msssim_curve, stats.ms_ssim).value
    x_rate = (rate - cfg.r_target) / cfg.r_target
    x_psnr = (rate - f1) / f1
    x_msssim = (rate - f2) / f2
    return breakdown(x_rate, x_psnr, x_msssim, cfg)


def breakdown(x_rate: float, x_psnr: float, x_msssim: float, cfg: RewardConfig) -> RewardBreakdown:
    """Shape already-computed relative deviations into terms and a total."""
    t_rate, t_psnr, t_ms = cfg.rate(x_rate), cfg.psnr(x_psnr), cfg.msssim(x_msssim)
    return RewardBreakdown(x_rate, x_psnr, x_msssim, t_rate, t_psnr, t_ms,
                           -(t_rate + t_psnr + t_ms))


def preset(name: str, r_target: float, psnr_curve: RDCurve, msssim_curve: RDCurve) -> RewardConfig:
    """Named weight settings.

    msssim_focus:    rate quadratic 25, psnr off, ms-ssim linear 10
    psnr_priority:   all quadratic, weights (25, 100, 1)
    msssim_priority: all quadratic, weights (25, 1, 100)
    """
    q = "quadratic"
    if name == "msssim_focus":
        shapes = (Shaping(q, 25.0), Shaping(q, 0.0), Shaping("linear", 10.0))
    elif name == "psnr_priority":
        shapes = (Shaping(q, 25.0), Shaping(q, 100.0), Shaping(q, 1.0))
    elif name == "msssim_priority":
        shapes = (Shaping(q, 25.0), Shaping(q, 1.0), Shaping(q, 100.0))
    else:
        raise RewardError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return RewardConfig(r_target, *shapes, psnr_curve=psnr_curve, msssim_curve=msssim_curve)
