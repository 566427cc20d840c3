"""Analytic trainee whose rate and quality respond to the distortion weights.

The equilibrium rate grows with the log of the effective weight
``w_eff = lambda_mse + kappa * lambda_msssim``; the split
``alpha = lambda_mse / w_eff`` trades PSNR against MS-SSIM at that rate.
Each epoch the state relaxes toward equilibrium by a factor ``eta`` with
optional Gaussian jitter. Cheap and deterministic for a fixed seed, so the
whole control loop can be exercised in seconds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .codec import EvalStats, LambdaWeights
from .metrics import PSNR_CAP
from .rdcurve import RDCurve, bpp_to_metric

log = logging.getLogger(__name__)

# observation feature constants
TV0, TV1 = 0.02, 0.5
GL0, GL1 = 0.005, 0.05
MSSSIM_FLOOR = 1e-6

FRONTIER_BPP = tuple(float(b) for b in np.geomspace(0.05, 1.0, 8))


def frontier_psnr(bpp: float) -> float:
    return 29.0 + 3.2 * math.log2(bpp / 0.2)


def frontier_msssim(bpp: float) -> float:
    # linear in log-rate on the decibel scale -10*log10(1 - m)
    db = 13.0 + 3.0 * math.log2(bpp / 0.2)
    return 1.0 - 10.0 ** (-db / 10.0)


def frontier_curves() -> tuple[RDCurve, RDCurve]:
    """The analytic PSNR and MS-SSIM frontiers sampled at 8 rates over 0.05-1.0 bpp."""
    psnr = RDCurve("psnr", tuple((b, frontier_psnr(b)) for b in FRONTIER_BPP), "surrogate frontier")
    ms = RDCurve("ms_ssim", tuple((b, frontier_msssim(b)) for b in FRONTIER_BPP), "surrogate frontier")
    return psnr, ms


@dataclass
class SurrogateConfig:
    r_ref: float = 0.3
    w_ref: float = 0.0256
    c1: float = 0.15
    kappa: float = 0.0128 / 120.0
    d_psnr: float = 1.5
    d_msssim: float = 0.015
    eta: float = 0.3
    noise_sigma: float = 0.0
    init_r: float = 0.8
    init_psnr: float = 30.0
    init_msssim: float = 0.9
    psnr_curve: RDCurve = field(default=None)
    msssim_curve: RDCurve = field(default=None)

    def __post_init__(self):
        if self.psnr_curve is None or self.msssim_curve is None:
            p, m = frontier_curves()
            self.psnr_curve = self.psnr_curve or p
            self.msssim_curve = self.msssim_curve or m
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        for name in ("c1", "kappa", "w_ref", "r_ref", "init_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.psnr_curve.metric_kind != "psnr" or self.msssim_curve.metric_kind != "ms_ssim":
            raise ValueError("surrogate needs a psnr curve and an ms_ssim curve")
        if not 0.0 < self.init_msssim <= 1.0:
            raise ValueError("init_msssim must lie in (0, 1]")


@dataclass(frozen=True)
class SurrogateState:
    r: float
    p: float
    m: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"rate must be positive, got {self.r}")
        if not 0.0 < self.m <= 1.0:
            raise ValueError(f"ms-ssim must lie in (0, 1], got {self.m}")


def initial_state(cfg: SurrogateConfig) -> SurrogateState:
    return SurrogateState(cfg.init_r, cfg.init_psnr, cfg.init_msssim)


def surrogate_equilibrium(lam: LambdaWeights, cfg: SurrogateConfig) -> tuple[float, float, float]:
    w_eff = lam.mse + cfg.kappa * lam.msssim
    alpha = lam.mse / w_eff
    lo, hi = cfg.psnr_curve.bpp_range
    lo = max(lo, cfg.msssim_curve.bpp_range[0])
    hi = min(hi, cfg.msssim_curve.bpp_range[1])
    r = cfg.r_ref + cfg.c1 * math.log(w_eff / cfg.w_ref)
    if not lo <= r <= hi:
        log.debug("equilibrium rate %.4f clamped to curve domain [%.4f, %.4f]", r, lo, hi)
        r = min(hi, max(lo, r))
    p = bpp_to_metric(cfg.psnr_curve, r).value - cfg.d_psnr * (1.0 - alpha)
    m = bpp_to_metric(cfg.msssim_curve, r).value - cfg.d_msssim * alpha
    return r, p, m


def surrogate_train_epoch(state: SurrogateState, lam: LambdaWeights, cfg: SurrogateConfig,
                          rng: np.random.Generator) -> SurrogateState:
    eq = np.array(surrogate_equilibrium(lam, cfg))
    cur = np.array([state.r, state.p, state.m])
    nxt = cur + cfg.eta * (eq - cur)
    if cfg.noise_sigma > 0:
        nxt = nxt + rng.normal(0.0, cfg.noise_sigma, size=3)
    r = max(float(nxt[0]), 1e-6)
    m = min(1.0, max(MSSSIM_FLOOR, float(nxt[2])))
    return SurrogateState(r, float(nxt[1]), m)


def surrogate_evaluate(state: SurrogateState, cfg: SurrogateConfig | None = None) -> EvalStats:
    return EvalStats(
        psnr=state.p,
        ms_ssim=state.m,
        bpp_y=0.9 * state.r,
        bpp_z=0.1 * state.r,
        gradient_loss=GL0 + GL1 * (PSNR_CAP - state.p) / PSNR_CAP,
        total_variation=TV0 + TV1 * (1.0 - state.m),
    )


class SurrogateTrainee:
    """Trainee adapter around the analytic surrogate."""

    def __init__(self, cfg: SurrogateConfig | None = None, state: SurrogateState | None = None):
        self.cfg = cfg or SurrogateConfig()
        self.state = state or initial_state(self.cfg)

    def train_epoch(self, lam: LambdaWeights, rng: np.random.Generator) -> None:
        self.state = surrogate_train_epoch(self.state, lam, self.cfg, rng)

    def evaluate(self) -> EvalStats:
        return surrogate_evaluate(self.state, self.cfg)

    def get_state(self) -> dict:
        return {"r": self.state.r, "p": self.state.p, "m": self.state.m}

    def set_state(self, state: dict) -> None:
        self.state = SurrogateState(float(state["r"]), float(state["p"]), float(state["m"]))
