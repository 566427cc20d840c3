"""Regenerate the bundled surrogate baseline curves with the fixed-weight runner."""
from pathlib import Path

from hlic.harness import RunConfig, run_baseline, surrogate_ladder
from hlic.rdcurve import save_curve
from hlic.surrogate import FRONTIER_BPP, SurrogateConfig

OUT = Path(__file__).resolve().parents[1] / "src" / "hlic" / "data" / "curves"


def main():
    cfg = RunConfig(trainee="surrogate", surrogate=SurrogateConfig(), T=100, N=1)
    ladder = surrogate_ladder(cfg.surrogate, FRONTIER_BPP)
    # the ms-ssim weight enters the effective weight scaled by kappa
    ms_ladder = [w / cfg.surrogate.kappa for w in ladder]
    res = run_baseline(cfg, {"psnr": ladder, "ms_ssim": ms_ladder})
    OUT.mkdir(parents=True, exist_ok=True)
    for kind, curve in res.curves.items():
        save_curve(curve, OUT / f"{kind}_baseline.txt")
        print(kind, curve.points)


if __name__ == "__main__":
    main()
