"""Regenerate the bundled toy-codec baseline curves (MSE-only and MS-SSIM-only ladders)."""
from pathlib import Path

from hlic.harness import ACCEPTANCE_TOY, RunConfig, ToySetup, run_baseline
from hlic.rdcurve import save_curve

OUT = Path(__file__).resolve().parents[1] / "src" / "hlic" / "data" / "curves"
LADDERS = {"psnr": [0.002, 0.005, 0.012, 0.03, 0.08], "ms_ssim": [8.0, 20.0, 50.0, 125.0, 320.0]}


def main():
    cfg = RunConfig(trainee="toy_codec", toy=ToySetup(codec=ACCEPTANCE_TOY), T=20, N=1, seed=1000)
    res = run_baseline(cfg, LADDERS)
    for kind, curve in res.curves.items():
        save_curve(curve, OUT / f"toy_{kind}_baseline.txt")
        print(kind, curve.points)


if __name__ == "__main__":
    main()
