"""Entropy-model likelihoods, the adapted RD loss and the toy transform codec.

The toy codec is an 8x8 block transform: a learned 64xC analysis matrix,
uniform-noise relaxation during training (rounding at evaluation), a
zero-mean factorized Gaussian prior with one learned scale per channel, and a
learned Cx64 synthesis matrix. It is the smallest trainee for which the inner
RD minimization is a real learning problem.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .metrics import Image, MsSsimConfig, gradient_loss, ms_ssim_tensor, psnr_from_mse, total_variation

LIKELIHOOD_FLOOR = 1e-12
LAMBDA_PRIME_BOUND = 20.0
STATE_FORMAT = "hlic-toy-codec/1"


class CodecError(ValueError):
    pass


# -- data types ---------------------------------------------------------------

@dataclass(frozen=True)
class EvalStats:
    psnr: float
    ms_ssim: float
    bpp_y: float
    bpp_z: float
    gradient_loss: float
    total_variation: float

    def __post_init__(self):
        vals = asdict(self)
        bad = [k for k, v in vals.items() if not math.isfinite(v)]
        if bad:
            raise CodecError(f"non-finite EvalStats fields: {bad}")
        if self.bpp_y < 0 or self.bpp_z < 0:
            raise CodecError("bpp must be non-negative")
        if not 0.0 < self.ms_ssim <= 1.0:
            raise CodecError(f"ms_ssim {self.ms_ssim} outside (0, 1]")

    @property
    def bpp(self) -> float:
        return self.bpp_y + self.bpp_z

    def as_tuple(self) -> tuple:
        return (self.psnr, self.ms_ssim, self.bpp_y, self.bpp_z, self.gradient_loss,
                self.total_variation)


@dataclass(frozen=True)
class LambdaWeights:
    """Distortion weights in log space; ``lambda_x = exp(lambda_prime_x)``."""

    lambda_prime_mse: float
    lambda_prime_msssim: float

    def __post_init__(self):
        for name in ("lambda_prime_mse", "lambda_prime_msssim"):
            v = float(getattr(self, name))
            if math.isnan(v):
                raise CodecError(f"{name} is NaN")
            object.__setattr__(self, name, min(LAMBDA_PRIME_BOUND, max(-LAMBDA_PRIME_BOUND, v)))

    @classmethod
    def from_weights(cls, lambda_mse: float, lambda_msssim: float) -> "LambdaWeights":
        return cls(math.log(lambda_mse), math.log(lambda_msssim))

    @property
    def mse(self) -> float:
        return math.exp(self.lambda_prime_mse)

    @property
    def msssim(self) -> float:
        return math.exp(self.lambda_prime_msssim)

    def as_prime(self) -> tuple[float, float]:
        return (self.lambda_prime_mse, self.lambda_prime_msssim)


class Trainee(Protocol):
    """What the harness needs from a compression model under training."""

    def train_epoch(self, lam: LambdaWeights, rng: np.random.Generator) -> None: ...

    def evaluate(self) -> EvalStats: ...

    def get_state(self) -> dict: ...

    def set_state(self, state: dict) -> None: ...


# -- likelihoods --------------------------------------------------------------

def gaussian_uniform_likelihood(y, mu, sigma):
    """Mass of N(mu, sigma^2) over the unit bin centred at y.

    Accepts floats/arrays (returns ndarray) or Tensors (returns a Tensor on the
    graph). Computed on the lower tail for accuracy far from the mean; the
    result is floored at ``LIKELIHOOD_FLOOR``.
    """
    if any(isinstance(v, Tensor) for v in (y, mu, sigma)):
        s = ad.as_tensor(sigma)
        if np.any(s.data <= 0):
            raise CodecError("sigma must be positive")
        dist = ad.abs_(ad.sub(y, mu))
        upper = ad.normal_cdf((0.5 - dist) / s)
        lower = ad.normal_cdf((-0.5 - dist) / s)
        return ad.clamp_min(upper - lower, LIKELIHOOD_FLOOR)
    y, mu, sigma = (np.asarray(v, dtype=np.float64) for v in (y, mu, sigma))
    if np.any(sigma <= 0):
        raise CodecError("sigma must be positive")
    dist = np.abs(y - mu)
    p = ndtr((0.5 - dist) / sigma) - ndtr((-0.5 - dist) / sigma)
    return np.maximum(p, LIKELIHOOD_FLOOR)


def gmm_uniform_likelihood(y, weights, mu, sigma):
    """Mixture of discretized Gaussians; components along the last axis."""
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
        raise CodecError(f"mixture weights must be >= 0 and sum to 1, got sum {w.sum(axis=-1)}")
    if isinstance(y, Tensor):
        y = ad.reshape(y, y.shape + (1,))
    else:
        y = np.asarray(y, dtype=np.float64)[..., None]
    comp = gaussian_uniform_likelihood(y, mu, sigma)
    if isinstance(comp, Tensor):
        return ad.reduce_sum(comp * weights, axis=-1)
    return np.sum(comp * w, axis=-1)


# -- loss ---------------------------------------------------------------------

def rd_loss(rate_bits, n_pixels: int, mse_val, msssim_val, lam: LambdaWeights):
    """bpp + lambda_mse * MSE + lambda_msssim * (1 - MS-SSIM); MSE on the [0, 255] scale."""
    for name, v in (("rate_bits", rate_bits), ("mse", mse_val), ("ms_ssim", msssim_val)):
        arr = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.all(np.isfinite(arr)):
            raise CodecError(f"rd_loss: non-finite {name}")
    if n_pixels <= 0:
        raise CodecError("n_pixels must be positive")
    return rate_bits / float(n_pixels) + lam.mse * mse_val + lam.msssim * (1.0 - msssim_val)


# -- toy codec ----------------------------------------------------------------

def dct_basis(n: int = 8) -> np.ndarray:
    """Orthonormal 2-D DCT-II basis as rows, ordered by frequency u+v then u."""
    k = np.arange(n)
    c = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    c[0] /= np.sqrt(2.0)
    order = sorted(((u, v) for u in range(n) for v in range(n)), key=lambda uv: (uv[0] + uv[1], uv[0]))
    return np.stack([np.outer(c[u], c[v]).reshape(-1) for u, v in order])


@dataclass
class ToyCodecConfig:
    channels: int = 32
    block: int = 8
    crop: int = 96
    batch: int = 16
    steps_per_epoch: int = 50
    lr: float = 1e-4
    sigma_lr_scale: float = 100.0  # multiplier on lr for log_sigma
    step_lr_scale: float = 100.0  # multiplier on lr for log_step
    ms_ssim_scales: int = 3
    init_step: float = 16.0  # initial quantizer step in DCT-coefficient units

    def ms_ssim_config(self) -> MsSsimConfig:
        return MsSsimConfig(n_scales=self.ms_ssim_scales)


def to_blocks(x: np.ndarray, block: int) -> np.ndarray:
    """(n, H, W) -> (n * H/b * W/b, b*b), row-major over blocks."""
    n, h, w = x.shape
    return (x.reshape(n, h // block, block, w // block, block)
             .transpose(0, 1, 3, 2, 4).reshape(-1, block * block))


def from_blocks(t: Tensor, n: int, h: int, w: int, block: int) -> Tensor:
    t = ad.reshape(t, (n, h // block, w // block, block, block))
    t = ad.transpose(t, (0, 1, 3, 2, 4))
    return ad.reshape(t, (n, h, w))


class ToyCodec:
    """Parameters and optimizer state of the block-transform codec.

    Latents are ``y = (blocks @ analysis) / step`` and reconstructions
    ``255 * (y_tilde * step) @ synthesis`` with a per-channel quantizer step
    ``step = exp(log_step)``. Both matrices start as the orthonormal DCT on the
    [0, 1] pixel scale, so their entries are O(0.1); bit allocation across
    channels is learned through ``log_step`` and ``log_sigma``.
    """

    def __init__(self, cfg: ToyCodecConfig | None = None, analysis=None, synthesis=None,
                 log_sigma=None, log_step=None):
        self.cfg = cfg or ToyCodecConfig()
        c, d = self.cfg.channels, self.cfg.block ** 2
        if c > d:
            raise CodecError(f"channels {c} exceeds block dimension {d}")
        basis = dct_basis(self.cfg.block)[:c]
        self.analysis = Tensor(basis.T if analysis is None else analysis, True, "analysis")
        self.synthesis = Tensor(basis if synthesis is None else synthesis, True, "synthesis")
        self.log_sigma = Tensor(np.zeros(c) if log_sigma is None else log_sigma, True, "log_sigma")
        q = math.log(self.cfg.init_step / 255.0)
        self.log_step = Tensor(np.full(c, q) if log_step is None else log_step, True, "log_step")
        self._check_shapes()
        self.optimizer = Adam(self.params(), lr=self.cfg.lr,
                              lr_scales={"log_sigma": self.cfg.sigma_lr_scale,
                                         "log_step": self.cfg.step_lr_scale})

    def _check_shapes(self):
        c, d = self.cfg.channels, self.cfg.block ** 2
        if (self.analysis.shape != (d, c) or self.synthesis.shape != (c, d)
                or self.log_sigma.shape != (c,) or self.log_step.shape != (c,)):
            raise CodecError("parameter shapes do not match the codec config")

    def params(self) -> dict[str, Tensor]:
        return {"analysis": self.analysis, "synthesis": self.synthesis,
                "log_sigma": self.log_sigma, "log_step": self.log_step}

    def latents(self, crops: np.ndarray) -> np.ndarray:
        """Unquantized latents of ``crops`` as a (blocks, channels) array."""
        blocks = to_blocks(crops / 255.0, self.cfg.block)
        return (blocks @ self.analysis.data) * np.exp(-self.log_step.data)

    def init_scales(self, crops: np.ndarray) -> None:
        """Set log_sigma to the log RMS of each latent channel on ``crops``."""
        y = self.latents(crops)
        self.log_sigma.data = np.log(np.sqrt(np.mean(y * y, axis=0)) + 0.5)

    # state ------------------------------------------------------------------
    def get_state(self) -> dict:
        state = {k: v.data.copy() for k, v in self.params().items()}
        for k, v in self.optimizer.state_arrays().items():
            state[f"adam.{k}"] = v
        return state

    def set_state(self, state: dict) -> None:
        for k, t in self.params().items():
            t.data = np.array(state[k], dtype=np.float64)
        self._check_shapes()
        self.optimizer.load_state_arrays(
            {k[len("adam."):]: v for k, v in state.items() if k.startswith("adam.")})

    def save(self, path: str | Path) -> None:
        buf = io.BytesIO()
        meta = np.array(STATE_FORMAT)
        cfg = np.array(json.dumps(asdict(self.cfg), sort_keys=True))
        np.savez(buf, __format__=meta, __config__=cfg, **self.get_state())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "ToyCodec":
        with np.load(path, allow_pickle=False) as z:
            fmt = str(z["__format__"])
            if fmt != STATE_FORMAT:
                raise CodecError(f"unsupported state format {fmt!r}")
            cfg = ToyCodecConfig(**json.loads(str(z["__config__"])))
            state = {k: z[k] for k in z.files if not k.startswith("__")}
        codec = cls(cfg)
        codec.set_state(state)
        return codec

    # forward passes ---------------------------------------------------------
    def loss_graph(self, crops: np.ndarray, lam: LambdaWeights, rng: np.random.Generator):
        """Record the relaxed RD loss for a batch of crops; returns (loss, parts)."""
        cfg = self.cfg
        n, h, w = crops.shape
        blocks = Tensor(to_blocks(crops / 255.0, cfg.block))
        y = (blocks @ self.analysis) * ad.exp(-self.log_step)
        y_tilde = ad.add_uniform_noise(y, rng)
        sigma = ad.exp(self.log_sigma)
        p = gaussian_uniform_likelihood(y_tilde, 0.0, sigma)
        bits = ad.reduce_sum(ad.log(p)) * (-1.0 / math.log(2.0))
        y_scaled = y_tilde * ad.exp(self.log_step)
        x_hat = from_blocks((y_scaled @ self.synthesis) * 255.0, n, h, w, cfg.block)
        x = Tensor(crops)
        diff = x_hat - x
        mse_val = ad.reduce_mean(diff * diff)
        msssim_val = ad.reduce_mean(ms_ssim_tensor(x, x_hat, cfg.ms_ssim_config()))
        loss = rd_loss(bits, n * h * w, mse_val, msssim_val, lam)
        return loss, {"bits": bits.item(), "mse": mse_val.item(), "ms_ssim": msssim_val.item()}

    def train_step(self, crops: np.ndarray, lam: LambdaWeights, rng: np.random.Generator) -> float:
        with ad.recording():
            loss, _ = self.loss_graph(crops, lam, rng)
            if not math.isfinite(loss.item()):
                raise CodecError("non-finite training loss")
            ad.backward(loss)
        self.optimizer.step()
        self.optimizer.zero_grad()
        return loss.item()

    def reconstruct(self, crops: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hard-quantized pass: returns (reconstruction clipped to [0, 255], rounded latents)."""
        cfg = self.cfg
        n, h, w = crops.shape
        y_hat = np.rint(self.latents(crops))
        blocks = ((y_hat * np.exp(self.log_step.data)) @ self.synthesis.data) * 255.0
        x_hat = (blocks.reshape(n, h // cfg.block, w // cfg.block, cfg.block, cfg.block)
                 .transpose(0, 1, 3, 2, 4).reshape(n, h, w))
        return np.clip(x_hat, 0.0, 255.0), y_hat

    def rate_bits(self, y_hat: np.ndarray) -> float:
        p = gaussian_uniform_likelihood(y_hat, 0.0, np.exp(self.log_sigma.data))
        return float(-np.sum(np.log2(p)))


def random_crops(images: Sequence[np.ndarray], n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, size, size))
    for k in range(n):
        img = images[rng.integers(len(images))]
        y0 = rng.integers(img.shape[0] - size + 1)
        x0 = rng.integers(img.shape[1] - size + 1)
        out[k] = img[y0:y0 + size, x0:x0 + size]
    return out


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    if h < size or w < size:
        raise CodecError(f"image {h}x{w} smaller than crop {size}")
    y0, x0 = (h - size) // 2, (w - size) // 2
    return img[y0:y0 + size, x0:x0 + size]


def _as_arrays(images, crop: int) -> list[np.ndarray]:
    out = []
    for img in images:
        arr = img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < crop or arr.shape[1] < crop:
            raise CodecError(f"image of shape {arr.shape} smaller than the {crop}x{crop} crop")
        out.append(arr)
    if not out:
        raise CodecError("image set is empty")
    return out


def toy_train_epoch(codec: ToyCodec, dataset, lam: LambdaWeights, rng: np.random.Generator,
                    steps_per_epoch: int | None = None, batch: int | None = None) -> list[float]:
    """Run ``steps_per_epoch`` Adam steps on random crops; returns the per-step losses."""
    cfg = codec.cfg
    steps = cfg.steps_per_epoch if steps_per_epoch is None else steps_per_epoch
    batch = cfg.batch if batch is None else batch
    images = _as_arrays(dataset, cfg.crop)
    losses = []
    for _ in range(steps):
        crops = random_crops(images, batch, cfg.crop, rng)
        losses.append(codec.train_step(crops, lam, rng))
    return losses


def toy_evaluate(codec: ToyCodec, validation) -> EvalStats:
    """Deterministic evaluation on centre crops with hard rounding; bpp_z is 0 (no hyperprior)."""
    cfg = codec.cfg
    crops = np.stack([center_crop(a, cfg.crop) for a in _as_arrays(validation, cfg.crop)])
    x_hat, y_hat = codec.reconstruct(crops)
    n = crops.shape[0]
    mcfg = cfg.ms_ssim_config()
    msssim = ms_ssim_tensor(Tensor(crops), Tensor(x_hat), mcfg).data
    psnrs, gls, tvs = [], [], []
    for k in range(n):
        err = float(np.mean((crops[k] - x_hat[k]) ** 2))
        psnrs.append(psnr_from_mse(err))
        gls.append(gradient_loss(crops[k], x_hat[k]))
        tvs.append(total_variation(x_hat[k]))
    bpp = codec.rate_bits(y_hat) / crops.size
    return EvalStats(
        psnr=float(np.mean(psnrs)),
        ms_ssim=float(min(1.0, max(np.mean(msssim), 1e-12))),
        bpp_y=bpp,
        bpp_z=0.0,
        gradient_loss=float(np.mean(gls)),
        total_variation=float(np.mean(tvs)),
    )


@dataclass
class ToyCodecTrainee:
    """Trainee wrapper binding a codec to its training and validation images."""

    train_images: list
    val_images: list
    cfg: ToyCodecConfig = field(default_factory=ToyCodecConfig)
    init_seed: int = 0
    codec: ToyCodec = field(init=False)

    def __post_init__(self):
        self.train_images = _as_arrays(self.train_images, self.cfg.crop)
        self.val_images = _as_arrays(self.val_images, self.cfg.crop)
        self.codec = ToyCodec(self.cfg)
        rng = np.random.default_rng(self.init_seed)
        self.codec.init_scales(random_crops(self.train_images, 64, self.cfg.crop, rng))

    def train_epoch(self, lam: LambdaWeights, rng: np.random.Generator) -> None:
        toy_train_epoch(self.codec, self.train_images, lam, rng)

    def evaluate(self) -> EvalStats:
        return toy_evaluate(self.codec, self.val_images)

    def get_state(self) -> dict:
        return self.codec.get_state()

    def set_state(self, state: dict) -> None:
        self.codec.set_state(state)
