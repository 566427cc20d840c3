"""Trajectory batches, GAE and the clipped-surrogate PPO update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteGradient, Tensor
from .policy import PolicyNet


class PPOError(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    update_epochs: int = 4
    value_loss_weight: float = 0.5
    entropy_bonus_weight: float = 0.0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.update_epochs < 0:
            raise ValueError("update_epochs must be >= 0")


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: np.ndarray  # pre-clamp sample, so log_prob_old stays consistent
    log_prob_old: float
    reward: float
    value_old: float


@dataclass
class TrajectoryBatch:
    """B trajectories of N transitions, plus one bootstrap value per trajectory."""

    trajectories: list = field(default_factory=list)
    bootstrap: list = field(default_factory=list)

    def __post_init__(self):
        lengths = {len(t) for t in self.trajectories}
        if len(lengths) > 1:
            raise PPOError(f"ragged batch: trajectory lengths {sorted(lengths)}")
        if len(self.bootstrap) != len(self.trajectories):
            raise PPOError("need exactly one bootstrap value per trajectory")
        for traj in self.trajectories:
            for tr in traj:
                vals = [tr.log_prob_old, tr.reward, tr.value_old]
                if not (np.all(np.isfinite(tr.observation)) and np.all(np.isfinite(tr.action))
                        and np.all(np.isfinite(vals))):
                    raise PPOError("non-finite transition")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.trajectories), (len(self.trajectories[0]) if self.trajectories else 0)

    def arrays(self) -> dict:
        flat = [tr for traj in self.trajectories for tr in traj]
        return {
            "obs": np.array([t.observation for t in flat]),
            "actions": np.array([t.action for t in flat]),
            "log_prob_old": np.array([t.log_prob_old for t in flat]),
            "rewards": np.array([[t.reward for t in traj] for traj in self.trajectories]),
            "values": np.array([[t.value_old for t in traj] for traj in self.trajectories]),
        }


def gae(rewards, values, bootstrap: float, gamma: float = 0.99,
        gae_lambda: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets for one trajectory."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1:
        raise ValueError(f"rewards and values must be equal-length vectors, got {r.shape}, {v.shape}")
    next_v = np.append(v[1:], bootstrap)
    delta = r + gamma * next_v - v
    adv = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = delta[t] + gamma * gae_lambda * acc
        adv[t] = acc
    return adv, adv + v


def clipped_surrogate(log_prob_new, log_prob_old, advantage, clip_epsilon: float = 0.2):
    """min(f * A, clip(f, 1 - eps, 1 + eps) * A) with f the probability ratio."""
    f = np.exp(np.asarray(log_prob_new, dtype=np.float64) - np.asarray(log_prob_old, dtype=np.float64))
    a = np.asarray(advantage, dtype=np.float64)
    return np.minimum(f * a, np.clip(f, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * a)


def surrogate_active(ratio, advantage, clip_epsilon: float) -> np.ndarray:
    """Mask of entries where the clipped objective still depends on the ratio.

    The gradient w.r.t. the ratio vanishes when A > 0 and f > 1 + eps, or
    A < 0 and f < 1 - eps.
    """
    ratio, advantage = np.asarray(ratio), np.asarray(advantage)
    clipped = ((advantage > 0) & (ratio > 1.0 + clip_epsilon)) | (
        (advantage < 0) & (ratio < 1.0 - clip_epsilon))
    return ~clipped


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero mean, unit std across the batch; a single advantage is left as is."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size <= 1:
        return adv.copy()
    centred = adv - adv.mean()
    std = centred.std()
    return centred / std if std > 0 else centred


@dataclass
class UpdateDiagnostics:
    mean_ratio: float
    clip_fraction: float
    value_loss: float
    policy_objective: float
    epochs: int


def ppo_update(batch: TrajectoryBatch, net: PolicyNet, cfg: PPOConfig | None = None) -> UpdateDiagnostics:
    """Full-batch clipped-surrogate update of actor and critic.

    Diagnostics (mean ratio, clip fraction, value loss) describe the first
    pass, where the ratio is 1 by construction. On a non-finite loss or
    gradient the network and optimizer states are restored and PPOError is
    raised.
    """
    cfg = cfg or PPOConfig()
    n_traj, n_steps = batch.shape
    if n_traj == 0 or n_steps == 0:
        raise PPOError("empty trajectory batch")
    arr = batch.arrays()
    advs, rets = [], []
    for b in range(n_traj):
        a, r = gae(arr["rewards"][b], arr["values"][b], batch.bootstrap[b], cfg.gamma, cfg.gae_lambda)
        advs.append(a)
        rets.append(r)
    adv = normalize_advantages(np.concatenate(advs))
    returns = np.concatenate(rets)
    obs, actions, lp_old = arr["obs"], arr["actions"], arr["log_prob_old"]

    snapshot = net.state_arrays()
    diag = None
    try:
        for epoch in range(cfg.update_epochs):
            with ad.recording():
                lp_new = net.log_prob_tensor(obs, actions)
                ratio = ad.exp(lp_new - Tensor(lp_old))
                f = ratio.data
                mask = surrogate_active(f, adv, cfg.clip_epsilon)
                objective = clipped_surrogate(lp_new.data, lp_old, adv, cfg.clip_epsilon)
                # mask * f * A has the gradient of the clipped objective; the
                # inactive entries contribute a constant
                surrogate = ad.reduce_mean(ratio * Tensor(mask * adv))
                actor_loss = -surrogate
                if cfg.entropy_bonus_weight:
                    log_std = ad.clamp(net.actor["log_std"], np.log(1e-3), np.log(2.0))
                    actor_loss = actor_loss - cfg.entropy_bonus_weight * ad.reduce_sum(log_std)
                v = net.value_tensor(obs)
                err = v - Tensor(returns)
                value_loss = ad.reduce_mean(err * err)
                loss = actor_loss + cfg.value_loss_weight * value_loss
                if not np.isfinite(loss.item()):
                    raise PPOError(f"non-finite PPO loss at update epoch {epoch}")
                ad.backward(loss)
            if diag is None:
                diag = UpdateDiagnostics(
                    mean_ratio=float(np.mean(f)),
                    clip_fraction=float(np.mean(np.abs(f - 1.0) > cfg.clip_epsilon)),
                    value_loss=value_loss.item(),
                    policy_objective=float(np.mean(objective)),
                    epochs=cfg.update_epochs,
                )
            # an exactly-zero actor gradient (e.g. all advantages 0) leaves the actor untouched
            actor_grads = [p.grad if p.grad is not None and np.any(p.grad) else None
                           for p in net.actor.values()]
            if any(g is not None for g in actor_grads):
                net.actor_opt.step(actor_grads)
            net.critic_opt.step()
            net.actor_opt.zero_grad()
            net.critic_opt.zero_grad()
    except (PPOError, NonFiniteGradient, FloatingPointError) as exc:
        net.load_state_arrays(snapshot)
        raise PPOError(f"PPO update aborted: {exc}") from exc
    if diag is None:
        diag = UpdateDiagnostics(1.0, 0.0, float("nan"), 0.0, 0)
    return diag
