"""Regenerate the checked-in image fixtures and MS-SSIM golden values.

Needs scikit-image (source images) and pytorch_msssim + torch (reference
MS-SSIM). Run from the repository root:

    python tools/make_fixtures.py
"""
import json
from pathlib import Path

import numpy as np
import skimage.data as skd
import torch
from pytorch_msssim import ms_ssim as reference_ms_ssim
from scipy.ndimage import gaussian_filter, shift

from hlic import pnm

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "tests" / "data" / "golden"
IMAGES = ROOT / "src" / "hlic" / "data" / "images"
SIZE = 176  # smallest even-dyadic side admitting 5 scales with an 11-tap window


def gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ np.array(pnm.LUMA)
    return img


def window():
    c = torch.arange(11, dtype=torch.float64) - 5
    g = torch.exp(-(c ** 2) / (2 * 1.5 ** 2))
    return (g / g.sum()).view(1, 1, 1, 11)


def reference(a, b):
    t = lambda x: torch.tensor(x, dtype=torch.float64)[None, None]
    return float(reference_ms_ssim(t(a), t(b), data_range=255, win=window()))


def q8(x):
    return np.clip(np.rint(x), 0, 255)


def golden_pairs(rng):
    cam = gray(skd.camera())[120:120 + SIZE, 200:200 + SIZE]
    ast = gray(skd.astronaut())[40:40 + SIZE, 150:150 + SIZE]
    cof = gray(skd.coffee())[100:100 + SIZE, 250:250 + SIZE]
    brick = gray(skd.brick())[:SIZE, :SIZE]
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    ramp = q8(xx * 255.0 / (SIZE - 1))
    checker = q8(40 + 170 * (((yy // 4) + (xx // 4)) % 2))
    radial = q8(127.5 + 120 * np.cos(np.hypot(yy - 88, xx - 88) / 6.0))
    return {
        "camera_noise": (q8(cam), q8(cam + rng.normal(0, 12, cam.shape))),
        "camera_blur": (q8(cam), q8(gaussian_filter(cam, 1.2))),
        "astronaut_quant": (q8(ast), q8(np.round(ast / 24) * 24)),
        "astronaut_shift": (q8(ast), q8(shift(ast, (0.0, 1.0), mode="nearest"))),
        "coffee_contrast": (q8(cof), q8(0.7 * (cof - cof.mean()) + cof.mean())),
        "brick_noise": (q8(brick), q8(brick + rng.normal(0, 25, brick.shape))),
        "ramp_noise": (ramp, q8(ramp + rng.normal(0, 8, ramp.shape))),
        "ramp_offset": (ramp, q8(ramp * 0.9 + 10)),
        "checker_blur": (checker, q8(gaussian_filter(checker, 1.0))),
        "radial_noise": (radial, q8(radial + rng.uniform(-30, 30, radial.shape))),
    }


def training_images():
    sources = {
        "camera": gray(skd.camera()),
        "astronaut": gray(skd.astronaut()),
        "coffee": gray(skd.coffee()),
        "chelsea": gray(skd.chelsea()),
        "brick": gray(skd.brick()),
        "grass": gray(skd.grass()),
        "gravel": gray(skd.gravel()),
        "rocket": gray(skd.rocket()),
        "coins": gray(skd.coins()),
        "page": gray(skd.page()),
    }
    out = {}
    for name, img in sources.items():
        h, w = img.shape
        s = min(h, w, 256)
        y0, x0 = (h - s) // 2, (w - s) // 2
        out[name] = q8(img[y0:y0 + s, x0:x0 + s])
    return out


def main():
    rng = np.random.default_rng(20240601)
    GOLDEN.mkdir(parents=True, exist_ok=True)
    IMAGES.mkdir(parents=True, exist_ok=True)
    table = {}
    for name, (a, b) in golden_pairs(rng).items():
        pnm.write_pgm(GOLDEN / f"{name}_ref.pgm", a)
        pnm.write_pgm(GOLDEN / f"{name}_dist.pgm", b)
        table[name] = reference(a, b)
    (GOLDEN / "ms_ssim_reference.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    for name, img in training_images().items():
        pnm.write_pgm(IMAGES / f"{name}.pgm", img)


if __name__ == "__main__":
    main()
