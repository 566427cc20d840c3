"""Command-line entry point.

Subcommands::

    metrics <ref> <dist>                  image quality metrics of a PGM/PPM pair
    baseline  --config FILE               single-metric weight ladders -> two RD curve files
    harmonize --config FILE               adaptive run with the policy controller
    manual    --kind K --i I --j J        fixed weights from a manual grid
    retrain   --from RUN.csv              fixed weights taken from a finished adaptive run
    report    RUN.csv                     plot-ready series from any run log

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import yaml

from . import __version__, pnm
from .autodiff import AutodiffError
from .codec import CodecError, ToyCodecTrainee
from .harness import (HarnessError, RunConfig, RunResult, TraineeFailure, config_from_dict,
                      config_to_dict, curve_family, final_lambda_from_log, format_log, read_log,
                      run_baseline, run_fixed, run_hlic, run_manual_grid, surrogate_ladder)
from .metrics import MetricError, report
from .ppo import PPOError
from .rdcurve import CurveError, save_curve
from .reward import RewardError
from .surrogate import FRONTIER_BPP

log = logging.getLogger("hlic")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
DEFAULT_TOY_LADDERS = {"psnr": [0.002, 0.005, 0.012, 0.03, 0.08],
                       "ms_ssim": [8.0, 20.0, 50.0, 125.0, 320.0]}
BASELINE_KEYS = {"psnr_ladder", "msssim_ladder", "epochs"}


class InputError(Exception):
    pass


# -- configuration ------------------------------------------------------------

def load_config(path: str | None) -> tuple[RunConfig, dict]:
    """Parse a YAML config; returns the run config and the `baseline` section."""
    data: dict = {}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise InputError(f"malformed config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InputError(f"config {path} must be a mapping of sections")
    baseline = dict(data.pop("baseline", None) or {})
    if set(baseline) - BASELINE_KEYS:
        raise InputError(f"unknown keys in [baseline]: {sorted(set(baseline) - BASELINE_KEYS)}")
    try:
        return config_from_dict(data), baseline
    except (HarnessError, CurveError, RewardError) as exc:
        raise InputError(str(exc)) from exc


def apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    data = config_to_dict(cfg)
    data["run"]["seed"] = seed
    return config_from_dict(data)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path, extra: dict | None = None) -> None:
    data = config_to_dict(cfg)
    if extra:
        data.update(extra)
    (out / "config.yaml").write_text(yaml.safe_dump(data, sort_keys=False))


def _write_summary(out: Path, res: RunResult, cfg: RunConfig, mode: str, extra: dict | None = None) -> None:
    s = res.final_stats
    last = res.records[-1]
    rb = last.trainees[last.best].reward
    summary = {
        "mode": mode,
        "seed": cfg.seed,
        "epochs": len(res.records) - 1,
        "final_stats": {k: float(v) for k, v in zip(
            ("psnr", "ms_ssim", "bpp_y", "bpp_z", "gradient_loss", "total_variation"), s.as_tuple())},
        "final_reward": None if rb is None else float(rb.total),
        "final_lambda_prime": None if res.final_lambda_prime is None else
        [float(x) for x in res.final_lambda_prime],
    }
    if extra:
        summary.update(extra)
    summary["config"] = config_to_dict(cfg)
    (out / "summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))


def _save_trainee(trainee, out: Path) -> None:
    if isinstance(trainee, ToyCodecTrainee):
        trainee.codec.save(out / "trainee_state.npz")
    else:
        (out / "trainee_state.json").write_text(json.dumps(trainee.get_state(), indent=2))


def _write_run(out: Path, res: RunResult, cfg: RunConfig, mode: str, extra: dict | None = None) -> None:
    (out / "run.csv").write_text(format_log(res.records))
    _write_summary(out, res, cfg, mode, extra)
    _echo_config(cfg, out)
    _save_trainee(res.best_trainee, out)
    if res.policy is not None:
        res.policy.save(out / "policy.npz")


# -- commands -----------------------------------------------------------------

def cmd_metrics(args) -> int:
    try:
        ref, dist = pnm.read(args.ref), pnm.read(args.dist)
        if ref.shape != dist.shape:
            raise InputError(f"size mismatch: {args.ref} is {ref.width}x{ref.height}, "
                             f"{args.dist} is {dist.width}x{dist.height}")
        rep = report(ref, dist)
    except OSError as exc:
        raise InputError(f"cannot read image: {exc}") from exc
    except (pnm.PnmError, MetricError) as exc:
        raise InputError(str(exc)) from exc
    for name in ("psnr", "ms_ssim", "mse", "total_variation", "gradient_loss"):
        print(f"{name} {getattr(rep, name):.6f}")
    return EXIT_OK


def _ladders(cfg: RunConfig, section: dict) -> dict:
    if cfg.trainee == "surrogate":
        psnr = surrogate_ladder(cfg.surrogate, FRONTIER_BPP)
        default = {"psnr": psnr, "ms_ssim": [w / cfg.surrogate.kappa for w in psnr]}
    else:
        default = DEFAULT_TOY_LADDERS
    ladders = {"psnr": section.get("psnr_ladder", default["psnr"]),
               "ms_ssim": section.get("msssim_ladder", default["ms_ssim"])}
    for k, v in ladders.items():
        if not v:
            raise InputError(f"empty {k} ladder")
        if any(not (isinstance(w, (int, float)) and w > 0) for w in v):
            raise InputError(f"{k} ladder weights must be positive numbers")
    return ladders


def cmd_baseline(args) -> int:
    cfg, section = load_config(args.config)
    cfg = apply_seed(cfg, args.seed)
    ladders = _ladders(cfg, section)
    epochs = int(section.get("epochs", cfg.T))
    out = _out_dir(args.out)
    try:
        res = run_baseline(cfg, ladders, epochs)
    except HarnessError as exc:
        if isinstance(exc, TraineeFailure):
            raise
        print(f"warning: {exc}; curve files not written, adjust the weight ladder", file=sys.stderr)
        return EXIT_NUMERIC
    for kind, curve in res.curves.items():
        save_curve(curve, out / f"{kind}_baseline.txt")
    lines = []
    for (kind, w), records in res.records.items():
        body = format_log(records).splitlines()
        if not lines:
            lines.append("metric,weight," + body[0])
        lines += [f"{kind},{w!r},{row}" for row in body[1:]]
    (out / "baseline_runs.csv").write_text("\n".join(lines) + "\n")
    _echo_config(cfg, out, {"baseline": {"psnr_ladder": list(ladders["psnr"]),
                                         "msssim_ladder": list(ladders["ms_ssim"]),
                                         "epochs": epochs}})
    print(f"wrote {out / 'psnr_baseline.txt'} and {out / 'ms_ssim_baseline.txt'}")
    return EXIT_OK


def cmd_harmonize(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = apply_seed(cfg, args.seed)
    try:
        cfg.reward.curves(curve_family(cfg))
    except HarnessError as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args.out)
    res = run_hlic(cfg)
    _write_run(out, res, cfg, "harmonize")
    _print_final(res)
    return EXIT_OK


def cmd_manual(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = apply_seed(cfg, args.seed)
    try:
        res = run_manual_grid(cfg, args.kind, args.i, args.j)
    except TraineeFailure:
        raise
    except HarnessError as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args.out)
    _write_run(out, res, cfg, "manual", {"grid": {"kind": args.kind, "i": args.i, "j": args.j}})
    _print_final(res)
    return EXIT_OK


def cmd_retrain(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = apply_seed(cfg, args.seed)
    try:
        rows = read_log(args.from_log, ("lambda_prime_mse", "lambda_prime_msssim", "best"))
        lam = final_lambda_from_log(rows)
    except OSError as exc:
        raise InputError(f"cannot read run log: {exc}") from exc
    except (HarnessError, ValueError) as exc:
        raise InputError(f"schema error in {args.from_log}: {exc}") from exc
    res = run_fixed(cfg, lam)
    out = _out_dir(args.out)
    _write_run(out, res, cfg, "retrain", {"retrain_from": str(args.from_log)})
    _print_final(res)
    return EXIT_OK


REPORT_SERIES = {
    "rd_psnr.csv": ("epoch", "bpp", "psnr"),
    "rd_msssim.csv": ("epoch", "bpp", "ms_ssim"),
    "lambda_trajectory.csv": ("epoch", "lambda_prime_mse", "lambda_prime_msssim"),
    "reward_trace.csv": ("epoch", "reward"),
}


def cmd_report(args) -> int:
    need = ("psnr", "ms_ssim", "bpp_y", "bpp_z", "best", "lambda_prime_mse", "lambda_prime_msssim",
            "reward")
    try:
        rows = read_log(args.log, need)
    except OSError as exc:
        raise InputError(f"cannot read run log: {exc}") from exc
    except (HarnessError, ValueError) as exc:
        raise InputError(f"schema error in {args.log}: {exc}") from exc
    best = {}
    for r in rows:
        if r["best"] == 1.0:
            best[int(r["epoch"])] = r
    out = _out_dir(args.out)
    for name, cols in REPORT_SERIES.items():
        lines = [",".join(cols)]
        for epoch in sorted(best):
            r = dict(best[epoch], epoch=epoch, bpp=best[epoch]["bpp_y"] + best[epoch]["bpp_z"])
            lines.append(",".join("" if r[c] is None else (str(r[c]) if c == "epoch" else repr(r[c]))
                                  for c in cols))
        (out / name).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(REPORT_SERIES)} series with {len(best)} rows each to {out}")
    return EXIT_OK


def _print_final(res: RunResult) -> None:
    s = res.final_stats
    print(f"final bpp {s.bpp:.6f} psnr {s.psnr:.6f} ms_ssim {s.ms_ssim:.6f}")
    if res.final_lambda_prime is not None:
        a, b = res.final_lambda_prime
        print(f"final lambda_prime {a:.6f} {b:.6f}")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hlic", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"hlic {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("metrics", help="PSNR, MS-SSIM, MSE, TV and gradient loss of an image pair")
    m.add_argument("ref")
    m.add_argument("dist")
    m.set_defaults(func=cmd_metrics)

    def run_parser(name, help_, func, config_required=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out", default=f"hlic_{name}", help="output directory")
        sp.set_defaults(func=func)
        return sp

    run_parser("baseline", "train single-metric weight ladders and write RD curves", cmd_baseline)
    run_parser("harmonize", "adaptive run with the policy controller", cmd_harmonize)
    mp = run_parser("manual", "fixed weights from a manual grid", cmd_manual)
    mp.add_argument("--kind", required=True, choices=("msssim_pref", "mse_pref"))
    mp.add_argument("--i", type=int, required=True, help="0..5")
    mp.add_argument("--j", type=int, required=True, help="0..3")
    rp = run_parser("retrain", "retrain with the final adapted weights of a run log", cmd_retrain)
    rp.add_argument("--from", dest="from_log", required=True, help="run.csv of an adaptive run")

    r = sub.add_parser("report", help="plot-ready series from a run log")
    r.add_argument("log")
    r.add_argument("--out", default="hlic_report")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TraineeFailure, PPOError, AutodiffError, CodecError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HarnessError, CurveError, RewardError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
