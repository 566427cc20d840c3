"""Run orchestration: the adaptive control loop, fixed-weight runs, manual grids, baselines.

The adaptive loop keeps B trainees and one shared policy. Every epoch each
trainee samples log-weights from the policy given its last observation,
trains one epoch, and is evaluated into a reward and the next observation.
Every N epochs the policy is updated by PPO on the B x N batch and the
trainee with the highest reward at that epoch overwrites all the others.
"""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .codec import EvalStats, LambdaWeights, ToyCodecConfig, ToyCodecTrainee
from .policy import (DEFAULT_MEAN_PRIOR, INIT_STD, PolicyNet, observe, policy_forward, sample_action,
                     to_lambda, value)
from .ppo import PPOConfig, Transition, TrajectoryBatch, UpdateDiagnostics, ppo_update
from .rdcurve import RDCurve, bundled_curve_path, load_curve
from .reward import RewardBreakdown, RewardConfig, Shaping, compute_reward, preset
from .surrogate import SurrogateConfig, SurrogateTrainee

log = logging.getLogger(__name__)

TRAINEE_KINDS = ("surrogate", "toy_codec")
MANUAL_KINDS = ("msssim_pref", "mse_pref")
# log-weight used for the switched-off term of single-metric baselines
OFF_PRIME = -20.0


class HarnessError(RuntimeError):
    pass


class TraineeFailure(HarnessError):
    def __init__(self, epoch: int, trainee: int, cause: Exception):
        self.epoch, self.trainee = epoch, trainee
        super().__init__(f"trainee {trainee} failed at epoch {epoch}: {cause}")


# -- configuration ------------------------------------------------------------

def bundled_image_paths() -> list[Path]:
    return sorted((Path(__file__).parent / "data" / "images").glob("*.pgm"))


@dataclass
class RewardSpec:
    preset: str | None = "msssim_focus"
    r_target: float = 0.3
    # custom shaping, used when preset is None: {"rate": (kind, w), "psnr": ..., "msssim": ...}
    custom: dict | None = None
    psnr_curve: str | None = None  # path; None means the bundled curve of the trainee kind
    msssim_curve: str | None = None

    def curves(self, family: str = "surrogate") -> tuple[RDCurve, RDCurve]:
        p = Path(self.psnr_curve) if self.psnr_curve else bundled_curve_path("psnr", family)
        m = Path(self.msssim_curve) if self.msssim_curve else bundled_curve_path("ms_ssim", family)
        for path in (p, m):
            if not path.exists():
                raise HarnessError(f"curve file {path} not found; run the `baseline` command first")
        return load_curve(p), load_curve(m)

    def build(self, family: str = "surrogate") -> RewardConfig:
        pc, mc = self.curves(family)
        if self.preset is not None:
            return preset(self.preset, self.r_target, pc, mc)
        if not self.custom:
            raise HarnessError("reward needs either a preset or custom shaping")
        unknown = set(self.custom) - {"rate", "psnr", "msssim"}
        if unknown:
            raise HarnessError(f"unknown reward terms {sorted(unknown)}")
        shapes = [Shaping(*self.custom[k]) for k in ("rate", "psnr", "msssim")]
        return RewardConfig(self.r_target, *shapes, psnr_curve=pc, msssim_curve=mc)


@dataclass
class ToySetup:
    codec: ToyCodecConfig = field(default_factory=ToyCodecConfig)
    train_images: list | None = None  # paths; None means the bundled split
    val_images: list | None = None
    init_seed: int = 0


@dataclass
class RunConfig:
    trainee: str = "surrogate"
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    toy: ToySetup = field(default_factory=ToySetup)
    B: int = 8
    N: int = 10
    T: int = 100
    reward: RewardSpec = field(default_factory=RewardSpec)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    mean_prior: tuple = DEFAULT_MEAN_PRIOR
    init_std: float = INIT_STD
    seed: int = 0

    def __post_init__(self):
        if self.trainee not in TRAINEE_KINDS:
            raise HarnessError(f"unknown trainee kind {self.trainee!r}; expected one of {TRAINEE_KINDS}")
        if self.B < 1 or self.N < 1 or self.T < 0:
            raise HarnessError("need B >= 1, N >= 1, T >= 0")
        if self.T % self.N:
            raise HarnessError(f"T={self.T} must be a multiple of N={self.N}")


_TOY_SPLIT = 7  # first 7 bundled images train, the rest validate
# reduced toy setting that keeps multi-seed experiments within minutes on one core
ACCEPTANCE_TOY = ToyCodecConfig(batch=8, steps_per_epoch=20)


def curve_family(cfg: "RunConfig") -> str:
    return "surrogate" if cfg.trainee == "surrogate" else "toy"


def make_trainee(cfg: RunConfig):
    if cfg.trainee == "surrogate":
        return SurrogateTrainee(copy.deepcopy(cfg.surrogate))
    from . import pnm
    paths = bundled_image_paths()
    train = cfg.toy.train_images or paths[:_TOY_SPLIT]
    val = cfg.toy.val_images or paths[_TOY_SPLIT:]
    return ToyCodecTrainee([pnm.read(p) for p in train], [pnm.read(p) for p in val],
                           copy.deepcopy(cfg.toy.codec), cfg.toy.init_seed)


def _clone_trainee(proto, n: int) -> list:
    out = [proto]
    for _ in range(n - 1):
        t = copy.copy(proto)
        if isinstance(proto, ToyCodecTrainee):
            from .codec import ToyCodec
            t.codec = ToyCodec(proto.codec.cfg)
        t.set_state(copy.deepcopy(proto.get_state()))
        out.append(t)
    return out


# -- run log ------------------------------------------------------------------

STAT_COLUMNS = ("psnr", "ms_ssim", "bpp_y", "bpp_z", "gradient_loss", "total_variation")
REWARD_COLUMNS = ("x_rate", "x_psnr", "x_msssim", "term_rate", "term_psnr", "term_msssim", "reward")
CSV_COLUMNS = (
    ("epoch", "trainee", "lambda_prime_mse", "lambda_prime_msssim", "lambda_mse", "lambda_msssim",
     "log_prob", "value") + STAT_COLUMNS + REWARD_COLUMNS
    + ("best", "ppo_update", "mean_ratio", "clip_fraction", "value_loss")
)


@dataclass
class TraineeRecord:
    lam_prime: tuple | None  # sampled log-weights after clamping; None for the initial evaluation
    stats: EvalStats
    reward: RewardBreakdown | None
    log_prob: float | None = None
    value: float | None = None


@dataclass
class EpochRecord:
    epoch: int
    trainees: list
    best: int
    ppo: UpdateDiagnostics | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def log_rows(records: list[EpochRecord]) -> list[list[str]]:
    rows = []
    for rec in records:
        for j, tr in enumerate(rec.trainees):
            lp = tr.lam_prime
            lam = (math.exp(lp[0]), math.exp(lp[1])) if lp is not None else (None, None)
            rb = tr.reward
            rvals = ((rb.x_rate, rb.x_psnr, rb.x_msssim, rb.term_rate, rb.term_psnr, rb.term_msssim,
                      rb.total) if rb is not None else (None,) * 7)
            ppo = rec.ppo
            pvals = ((ppo.mean_ratio, ppo.clip_fraction, ppo.value_loss) if ppo is not None
                     else (None,) * 3)
            row = ([rec.epoch, j, lp[0] if lp else None, lp[1] if lp else None, *lam, tr.log_prob,
                    tr.value, *tr.stats.as_tuple(), *rvals, j == rec.best, ppo is not None, *pvals])
            rows.append([_fmt(v) for v in row])
    return rows


def format_log(records: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(log_rows(records))
    return buf.getvalue()


def write_log(records: list[EpochRecord], path: str | Path) -> None:
    Path(path).write_text(format_log(records))


def read_log(path: str | Path, required: tuple = ()) -> list[dict]:
    """Parse a run CSV into dicts of floats (empty cells become None)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("epoch", "trainee", *required) if c not in header]
        if missing:
            raise HarnessError(f"{path}: run log lacks columns {missing}")
        out = []
        for row in reader:
            out.append({k: (float(v) if v not in ("", None) else None) for k, v in row.items()})
    return out


# -- core loop ----------------------------------------------------------------

@dataclass
class RunResult:
    records: list
    best_trainee: object
    policy: PolicyNet | None
    final_stats: EvalStats
    final_lambda_prime: tuple | None


def broadcast_best(trainees: list, rewards) -> int:
    """Overwrite every trainee with the state of the highest-reward one (lowest index on ties)."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(trainees) < 1 or r.shape != (len(trainees),):
        raise HarnessError("need one reward per trainee")
    if not np.all(np.isfinite(r)):
        raise HarnessError("rewards must be finite")
    best = int(np.argmax(r))  # argmax returns the first maximum
    state = trainees[best].get_state()
    for j, t in enumerate(trainees):
        if j != best:
            t.set_state(copy.deepcopy(state))
    return best


def _rngs(seed: int, b: int) -> tuple[np.random.Generator, list[np.random.Generator]]:
    root = np.random.SeedSequence(seed)
    children = root.spawn(b + 1)
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


def _evaluate(trainee, j: int, epoch: int) -> EvalStats:
    try:
        return trainee.evaluate()
    except Exception as exc:  # noqa: BLE001 - any trainee failure aborts the run
        raise TraineeFailure(epoch, j, exc) from exc


def run_hlic(cfg: RunConfig, progress: Callable[[EpochRecord], None] | None = None) -> RunResult:
    reward_cfg = cfg.reward.build(curve_family(cfg))
    policy_rng, trainee_rngs = _rngs(cfg.seed, cfg.B)
    net = PolicyNet(seed=cfg.seed, mean_prior=cfg.mean_prior, init_std=cfg.init_std,
                    lr=cfg.ppo.lr, betas=(cfg.ppo.beta1, cfg.ppo.beta2))
    trainees = _clone_trainee(make_trainee(cfg), cfg.B)

    stats = [_evaluate(t, j, 0) for j, t in enumerate(trainees)]
    rewards = [compute_reward(s, reward_cfg) for s in stats]
    obs = [observe(s) for s in stats]
    records = [EpochRecord(0, [TraineeRecord(None, s, r) for s, r in zip(stats, rewards)],
                           int(np.argmax([r.total for r in rewards])))]
    if progress:
        progress(records[-1])
    window: list[list[Transition]] = [[] for _ in range(cfg.B)]
    last_lam = [None] * cfg.B

    for t in range(1, cfg.T + 1):
        mean, std = policy_forward(net, np.array(obs))
        values = value(net, np.array(obs))
        entries = []
        for j, trainee in enumerate(trainees):
            action, raw, logp = sample_action(mean[j], std, policy_rng)
            lam = to_lambda(action)
            try:
                trainee.train_epoch(lam, trainee_rngs[j])
            except Exception as exc:  # noqa: BLE001
                raise TraineeFailure(t, j, exc) from exc
            s = _evaluate(trainee, j, t)
            rb = compute_reward(s, reward_cfg)
            window[j].append(Transition(obs[j], raw, logp, rb.total, float(values[j])))
            entries.append(TraineeRecord(lam.as_prime(), s, rb, logp, float(values[j])))
            obs[j] = observe(s)
            last_lam[j] = lam.as_prime()
        totals = [e.reward.total for e in entries]
        best = int(np.argmax(totals))
        diag = None
        if t % cfg.N == 0:
            bootstrap = [float(v) for v in value(net, np.array(obs))]
            diag = ppo_update(TrajectoryBatch(window, bootstrap), net, cfg.ppo)
            window = [[] for _ in range(cfg.B)]
            best = broadcast_best(trainees, totals)
            # trainees now share the winner's state, hence its observation
            obs = [obs[best].copy() for _ in range(cfg.B)]
        records.append(EpochRecord(t, entries, best, diag))
        if progress:
            progress(records[-1])

    final = records[-1]
    best_trainee = trainees[final.best]
    return RunResult(records, best_trainee, net, final.trainees[final.best].stats,
                     last_lam[final.best] if cfg.T else None)


def run_fixed(cfg: RunConfig, lam: LambdaWeights, T: int | None = None,
              reward_cfg: RewardConfig | None = None) -> RunResult:
    """Train one trainee under constant weights for T epochs (default cfg.T)."""
    T = cfg.T if T is None else T
    if T < 0:
        raise HarnessError("T must be >= 0")
    _, (rng,) = _rngs(cfg.seed, 1)
    trainee = make_trainee(cfg)

    def rec(epoch, lp):
        s = _evaluate(trainee, 0, epoch)
        rb = compute_reward(s, reward_cfg) if reward_cfg is not None else None
        return EpochRecord(epoch, [TraineeRecord(lp, s, rb)], 0)

    records = [rec(0, None)]
    for t in range(1, T + 1):
        try:
            trainee.train_epoch(lam, rng)
        except Exception as exc:  # noqa: BLE001
            raise TraineeFailure(t, 0, exc) from exc
        records.append(rec(t, lam.as_prime()))
    return RunResult(records, trainee, None, records[-1].trainees[0].stats,
                     lam.as_prime() if T else None)


def final_lambda_from_log(rows: list[dict]) -> LambdaWeights:
    """Adapted log-weights of the best trainee at the last epoch of a run log."""
    need = ("lambda_prime_mse", "lambda_prime_msssim", "best")
    missing = [c for c in need if rows and c not in rows[0]]
    if not rows or missing:
        raise HarnessError(f"run log lacks columns {missing or list(need)}")
    last = max(r["epoch"] for r in rows)
    final = [r for r in rows if r["epoch"] == last and r["best"] == 1.0]
    if not final or final[0]["lambda_prime_mse"] is None:
        raise HarnessError("run log has no adapted weights at its final epoch")
    return LambdaWeights(final[0]["lambda_prime_mse"], final[0]["lambda_prime_msssim"])


# -- manual grids and baselines -----------------------------------------------

def manual_weights(kind: str, i: int, j: int) -> tuple[float, float]:
    """(lambda_mse, lambda_msssim) of a manual grid entry, i in 0..5, j in 0..3."""
    if kind not in MANUAL_KINDS:
        raise HarnessError(f"unknown manual grid {kind!r}; expected one of {MANUAL_KINDS}")
    if not (isinstance(i, (int, np.integer)) and isinstance(j, (int, np.integer))
            and 0 <= i <= 5 and 0 <= j <= 3):
        raise HarnessError(f"grid indices out of range: i={i} (0..5), j={j} (0..3)")
    if kind == "msssim_pref":
        return 0.0128 * 2 ** i / 4 ** j, 120.0 / 4 ** j
    return 0.08 / 4 ** j, 3.0 * 2 ** i / 4 ** j


def manual_table(kind: str) -> dict[tuple[int, int], tuple[float, float]]:
    return {(i, j): manual_weights(kind, i, j) for i in range(6) for j in range(4)}


def run_manual_grid(cfg: RunConfig, kind: str, i: int, j: int, T: int | None = None) -> RunResult:
    lam = LambdaWeights.from_weights(*manual_weights(kind, i, j))
    return run_fixed(cfg, lam, T)


def single_metric_weights(metric: str, weight: float) -> LambdaWeights:
    """Weights that train for one metric only; the other log-weight sits at the clamp floor."""
    if metric == "psnr":
        return LambdaWeights(math.log(weight), OFF_PRIME)
    if metric == "ms_ssim":
        return LambdaWeights(OFF_PRIME, math.log(weight))
    raise HarnessError(f"unknown metric {metric!r}")


@dataclass
class BaselineResult:
    curves: dict  # metric kind -> RDCurve
    records: dict  # (metric kind, weight) -> list[EpochRecord]


def run_baseline(cfg: RunConfig, ladders: dict, T: int | None = None) -> BaselineResult:
    """Sweep single-metric weights; each ladder yields one RD curve of its own metric.

    ``ladders`` maps "psnr" / "ms_ssim" to increasing weight lists. A ladder
    whose points are not strictly monotone raises HarnessError.
    """
    curves, records = {}, {}
    for metric in ("psnr", "ms_ssim"):
        weights = list(ladders.get(metric) or [])
        if not weights:
            raise HarnessError(f"empty {metric} ladder")
        pts = []
        for w in weights:
            res = run_fixed(cfg, single_metric_weights(metric, w), T)
            records[(metric, w)] = res.records
            s = res.final_stats
            pts.append((s.bpp, s.psnr if metric == "psnr" else s.ms_ssim))
        pts.sort()
        try:
            curves[metric] = RDCurve(metric, tuple(pts), f"{cfg.trainee} {metric}-only baseline")
        except ValueError as exc:
            raise HarnessError(f"{metric} ladder produced a non-monotone curve: {exc}") from exc
    return BaselineResult(curves, records)


def surrogate_ladder(cfg: SurrogateConfig, rates) -> list[float]:
    """Effective weights whose surrogate equilibrium rates are ``rates``."""
    return [cfg.w_ref * math.exp((r - cfg.r_ref) / cfg.c1) for r in rates]


# -- config (de)serialization -------------------------------------------------

def _strict(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise HarnessError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return data


def _curve_value(v, kind: str) -> RDCurve:
    """A curve given as a file path or as an inline list of [bpp, metric] pairs."""
    if isinstance(v, (str, Path)):
        return load_curve(v)
    return RDCurve(kind, tuple(tuple(p) for p in v), "inline")


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from nested plain data; unknown keys are rejected."""
    data = dict(data or {})
    top = {"run", "surrogate", "toy_codec", "reward", "ppo", "policy"}
    unknown = set(data) - top
    if unknown:
        raise HarnessError(f"unknown config sections: {sorted(unknown)}")
    run = dict(data.get("run") or {})
    allowed = {"trainee", "B", "N", "T", "seed"}
    if set(run) - allowed:
        raise HarnessError(f"unknown keys in [run]: {sorted(set(run) - allowed)}")

    sur = dict(data.get("surrogate") or {})
    curve_keys = {"psnr_curve", "msssim_curve"}
    _strict(SurrogateConfig, sur, "surrogate")
    for k in curve_keys & set(sur):
        sur[k] = _curve_value(sur[k], "psnr" if k == "psnr_curve" else "ms_ssim")
    toy = dict(data.get("toy_codec") or {})
    toy_setup = {k: toy.pop(k) for k in ("train_images", "val_images", "init_seed") if k in toy}
    _strict(ToyCodecConfig, toy, "toy_codec")
    rew = _strict(RewardSpec, dict(data.get("reward") or {}), "reward")
    if rew.get("custom"):
        rew["custom"] = {k: tuple(v) for k, v in rew["custom"].items()}
    ppo = _strict(PPOConfig, dict(data.get("ppo") or {}), "ppo")
    pol = dict(data.get("policy") or {})
    if set(pol) - {"mean_prior", "init_std"}:
        raise HarnessError(f"unknown keys in [policy]: {sorted(set(pol) - {'mean_prior', 'init_std'})}")
    try:
        return RunConfig(
            surrogate=SurrogateConfig(**sur),
            toy=ToySetup(codec=ToyCodecConfig(**toy), **toy_setup),
            reward=RewardSpec(**rew),
            ppo=PPOConfig(**ppo),
            mean_prior=tuple(float(x) for x in pol.get("mean_prior", DEFAULT_MEAN_PRIOR)),
            init_std=float(pol.get("init_std", INIT_STD)),
            **run,
        )
    except (TypeError, ValueError) as exc:
        raise HarnessError(f"invalid configuration: {exc}") from exc


def config_to_dict(cfg: RunConfig) -> dict:
    """Inverse of :func:`config_from_dict` for echoing the effective configuration.

    Surrogate curves are echoed inline as knot lists.
    """
    sur = {f.name: getattr(cfg.surrogate, f.name) for f in fields(SurrogateConfig)}
    for k in ("psnr_curve", "msssim_curve"):
        sur[k] = [list(p) for p in sur[k].points]
    toy = asdict(cfg.toy.codec)
    toy.update(init_seed=cfg.toy.init_seed)
    if cfg.toy.train_images:
        toy["train_images"] = [str(p) for p in cfg.toy.train_images]
    if cfg.toy.val_images:
        toy["val_images"] = [str(p) for p in cfg.toy.val_images]
    rew = asdict(cfg.reward)
    if rew.get("custom"):
        rew["custom"] = {k: list(v) for k, v in rew["custom"].items()}
    return {
        "run": {"trainee": cfg.trainee, "B": cfg.B, "N": cfg.N, "T": cfg.T, "seed": cfg.seed},
        "surrogate": sur,
        "toy_codec": toy,
        "reward": rew,
        "ppo": asdict(cfg.ppo),
        "policy": {"mean_prior": [float(x) for x in cfg.mean_prior], "init_std": cfg.init_std},
    }


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
