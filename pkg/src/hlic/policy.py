"""Observations, the Gaussian MLP policy over log-weights and the critic."""
from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .codec import LAMBDA_PRIME_BOUND, EvalStats, LambdaWeights

OBS_DIM = 6
ACT_DIM = 2
HIDDEN = 64
# divisors applied to (ms_ssim, psnr, bpp_y, bpp_z, gradient_loss, total_variation)
OBS_SCALE = np.array([1.0, 40.0, 1.0, 1.0, 0.1, 0.1])
DEFAULT_MEAN_PRIOR = (math.log(0.01), math.log(1.0))
INIT_STD = 0.5
LOG_STD_MIN, LOG_STD_MAX = math.log(1e-3), math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)
POLICY_FORMAT = "hlic-policy/1"


class PolicyError(ValueError):
    pass


def observe(stats: EvalStats) -> np.ndarray:
    """Fixed affine normalization of an evaluation into the 6-vector policy input."""
    raw = np.array(stats.as_tuple(), dtype=np.float64)
    raw = raw[[1, 0, 2, 3, 4, 5]]  # (ms_ssim, psnr, ...) order
    if not np.all(np.isfinite(raw)):
        raise PolicyError("non-finite evaluation statistics")
    return raw / OBS_SCALE


def lambda_from_prime(lam_prime) -> np.ndarray:
    """Exponentiated weights (lambda_mse, lambda_msssim)."""
    return np.exp(np.asarray(lam_prime, dtype=np.float64))


def _dense(rng, fan_in, fan_out, zero=False):
    if zero:
        return np.zeros((fan_in, fan_out))
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


class PolicyNet:
    """Actor (6-64-64-2, tanh) with a free log-std vector, and a separate critic (6-64-64-1).

    Output layers start at zero so the initial mean equals ``mean_prior`` and
    the initial value is 0 for every observation.
    """

    def __init__(self, seed: int = 0, mean_prior=DEFAULT_MEAN_PRIOR, init_std: float = INIT_STD,
                 lr: float = 3e-4, betas=(0.9, 0.999)):
        rng = np.random.default_rng(seed)
        h = HIDDEN

        def p(arr, name):
            return Tensor(arr, requires_grad=True, name=name)

        self.actor = {
            "a_w1": p(_dense(rng, OBS_DIM, h), "a_w1"), "a_b1": p(np.zeros(h), "a_b1"),
            "a_w2": p(_dense(rng, h, h), "a_w2"), "a_b2": p(np.zeros(h), "a_b2"),
            "a_w3": p(_dense(rng, h, ACT_DIM, zero=True), "a_w3"),
            "a_b3": p(np.array(mean_prior, dtype=np.float64), "a_b3"),
            "log_std": p(np.full(ACT_DIM, math.log(init_std)), "log_std"),
        }
        self.critic = {
            "c_w1": p(_dense(rng, OBS_DIM, h), "c_w1"), "c_b1": p(np.zeros(h), "c_b1"),
            "c_w2": p(_dense(rng, h, h), "c_w2"), "c_b2": p(np.zeros(h), "c_b2"),
            "c_w3": p(_dense(rng, h, 1, zero=True), "c_w3"), "c_b3": p(np.zeros(1), "c_b3"),
        }
        self.actor_opt = Adam(self.actor, lr=lr, betas=betas)
        self.critic_opt = Adam(self.critic, lr=lr, betas=betas)

    def params(self) -> dict[str, Tensor]:
        return {**self.actor, **self.critic}

    # forward passes; ``obs`` is (6,) or (n, 6)
    def _mlp(self, obs, prefix: str, params: dict) -> Tensor:
        x = ad.as_tensor(np.atleast_2d(obs))
        x = ad.tanh(x @ params[f"{prefix}_w1"] + params[f"{prefix}_b1"])
        x = ad.tanh(x @ params[f"{prefix}_w2"] + params[f"{prefix}_b2"])
        return x @ params[f"{prefix}_w3"] + params[f"{prefix}_b3"]

    def distribution(self, obs) -> tuple[Tensor, Tensor]:
        """(mean, std) as graph tensors of shape (n, 2) and (2,)."""
        mean = self._mlp(obs, "a", self.actor)
        std = ad.exp(ad.clamp(self.actor["log_std"], LOG_STD_MIN, LOG_STD_MAX))
        return mean, std

    def value_tensor(self, obs) -> Tensor:
        return ad.reshape(self._mlp(obs, "c", self.critic), (-1,))

    def log_prob_tensor(self, obs, actions) -> Tensor:
        """Diagonal-Gaussian log density of each row of ``actions``; shape (n,)."""
        mean, std = self.distribution(obs)
        z = (Tensor(np.atleast_2d(actions)) - mean) / std
        per = z * z * -0.5 - ad.log(std) - 0.5 * LOG_2PI
        return ad.reduce_sum(per, axis=-1)

    # state ------------------------------------------------------------------
    def state_arrays(self) -> dict:
        out = {k: t.data.copy() for k, t in self.params().items()}
        for tag, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for k, v in opt.state_arrays().items():
                out[f"{tag}.{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for k, t in self.params().items():
            arr = np.array(arrays[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise PolicyError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr
        for tag, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            pre = f"{tag}."
            opt.load_state_arrays({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)})

    def save(self, path: str | Path) -> None:
        buf = io.BytesIO()
        np.savez(buf, __format__=np.array(POLICY_FORMAT), **self.state_arrays())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "PolicyNet":
        with np.load(path, allow_pickle=False) as z:
            if str(z["__format__"]) != POLICY_FORMAT:
                raise PolicyError(f"unsupported policy format {str(z['__format__'])!r}")
            arrays = {k: z[k] for k in z.files if k != "__format__"}
        net = cls()
        net.load_state_arrays(arrays)
        return net


def policy_forward(net: PolicyNet, obs) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of the action distribution for one observation (or a batch)."""
    mean, std = net.distribution(obs)
    mu = mean.data
    return (mu[0] if np.ndim(obs) == 1 else mu), std.data.copy()


def value(net: PolicyNet, obs) -> float | np.ndarray:
    v = net.value_tensor(obs).data
    return float(v[0]) if np.ndim(obs) == 1 else v


def normal_log_prob(x, mean, std) -> float | np.ndarray:
    x, mean, std = (np.asarray(a, dtype=np.float64) for a in (x, mean, std))
    z = (x - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI, axis=-1)


def sample_action(mean, std, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Draw log-weights; returns (clamped action, raw sample, log-prob of the raw sample)."""
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise PolicyError("std must be positive")
    raw = mean + std * rng.standard_normal(mean.shape)
    clamped = np.clip(raw, -LAMBDA_PRIME_BOUND, LAMBDA_PRIME_BOUND)
    return clamped, raw, float(normal_log_prob(raw, mean, std))


def log_prob_of(net: PolicyNet, obs, action) -> float:
    return float(normal_log_prob(action, *policy_forward(net, obs)))


def to_lambda(action) -> LambdaWeights:
    return LambdaWeights(float(action[0]), float(action[1]))
