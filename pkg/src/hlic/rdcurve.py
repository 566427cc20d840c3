"""Baseline rate-distortion curves and the metric <-> bpp mappings backing the reward.

A curve is a strictly increasing list of (bpp, metric) knots. Both mappings
interpolate piecewise-linearly between log2(bpp) and the metric, so the two
directions are exact inverses of one another inside the knot range. Outside
it, the end segment is extrapolated and the bpp is clamped to
[first / 2, 2 * last]; such results carry ``extrapolated=True``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

METRIC_KINDS = ("psnr", "ms_ssim")
FILE_MAGIC = "# hlic-rdcurve/1"


class CurveError(ValueError):
    pass


class Mapped(NamedTuple):
    value: float
    extrapolated: bool


@dataclass(frozen=True)
class RDCurve:
    metric_kind: str
    points: tuple
    label: str = ""

    def __post_init__(self):
        if self.metric_kind not in METRIC_KINDS:
            raise CurveError(f"unknown metric kind {self.metric_kind!r}; expected one of {METRIC_KINDS}")
        pts = tuple((float(b), float(m)) for b, m in self.points)
        if len(pts) < 2:
            raise CurveError("a curve needs at least 2 points")
        for b, m in pts:
            if not (math.isfinite(b) and math.isfinite(m)) or b <= 0:
                raise CurveError(f"invalid point ({b!r}, {m!r}): bpp must be positive and finite")
        for (b0, m0), (b1, m1) in zip(pts, pts[1:]):
            if not b1 > b0:
                raise CurveError(f"bpp not strictly increasing between ({b0!r}, {m0!r}) and ({b1!r}, {m1!r})")
            if not m1 > m0:
                raise CurveError(f"metric not strictly increasing between ({b0!r}, {m0!r}) and ({b1!r}, {m1!r})")
        object.__setattr__(self, "points", pts)

    @property
    def bpps(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def metrics(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def bpp_range(self) -> tuple[float, float]:
        return self.points[0][0], self.points[-1][0]


def _interp(xs: np.ndarray, ys: np.ndarray, x: float) -> tuple[float, bool]:
    """Piecewise-linear interpolation with end-segment extrapolation."""
    n = len(xs)
    if x < xs[0]:
        k, extra = 0, True
    elif x > xs[-1]:
        k, extra = n - 2, True
    else:
        k = min(int(np.searchsorted(xs, x, side="right")) - 1, n - 2)
        extra = False
        if x == xs[k]:
            return float(ys[k]), False
        if x == xs[k + 1]:
            return float(ys[k + 1]), False
    t = (x - xs[k]) / (xs[k + 1] - xs[k])
    return float(ys[k] + t * (ys[k + 1] - ys[k])), extra


def metric_to_bpp(curve: RDCurve, metric_value: float) -> Mapped:
    """Bits per pixel the baseline needs to reach ``metric_value`` (f1 for PSNR, f2 for MS-SSIM)."""
    for b, m in curve.points:
        if m == metric_value:
            return Mapped(b, False)  # knots map back to the stored bpp exactly
    logb, extra = _interp(curve.metrics, np.log2(curve.bpps), float(metric_value))
    bpp = 2.0 ** logb
    lo, hi = curve.bpp_range
    lo, hi = 0.5 * lo, 2.0 * hi
    if bpp < lo or bpp > hi:
        bpp = min(hi, max(lo, bpp))
        extra = True
    return Mapped(bpp, extra)


def bpp_to_metric(curve: RDCurve, bpp: float) -> Mapped:
    """Metric value of the baseline at ``bpp``; inverse of :func:`metric_to_bpp`."""
    if not bpp > 0:
        raise CurveError(f"bpp must be positive, got {bpp!r}")
    lo, hi = curve.bpp_range
    clamped = min(2.0 * hi, max(0.5 * lo, float(bpp)))
    value, extra = _interp(np.log2(curve.bpps), curve.metrics, math.log2(clamped))
    return Mapped(value, extra or clamped != bpp)


def format_curve(curve: RDCurve) -> str:
    lines = [FILE_MAGIC, f"metric_kind: {curve.metric_kind}", f"label: {curve.label}", "# bpp metric"]
    lines += [f"{b!r} {m!r}" for b, m in curve.points]
    return "\n".join(lines) + "\n"


def parse_curve(text: str, source: str = "<string>") -> RDCurve:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FILE_MAGIC:
        raise CurveError(f"{source}: missing header line {FILE_MAGIC!r}")
    header: dict[str, str] = {}
    points = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" in line and not points:
            key, _, val = line.partition(":")
            header[key.strip()] = val.strip()
            continue
        parts = line.split()
        if len(parts) != 2:
            raise CurveError(f"{source}:{lineno}: expected 'bpp metric', got {raw!r}")
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise CurveError(f"{source}:{lineno}: non-numeric point {raw!r}") from None
    if "metric_kind" not in header:
        raise CurveError(f"{source}: header lacks metric_kind")
    try:
        return RDCurve(header["metric_kind"], tuple(points), header.get("label", ""))
    except CurveError as exc:
        raise CurveError(f"{source}: {exc}") from None


def save_curve(curve: RDCurve, path: str | Path) -> None:
    Path(path).write_text(format_curve(curve))


def load_curve(path: str | Path) -> RDCurve:
    return parse_curve(Path(path).read_text(), str(path))


BUNDLED_FAMILIES = ("surrogate", "toy")


def bundled_curve_path(metric_kind: str, family: str = "surrogate") -> Path:
    """Path of a packaged baseline curve: ``surrogate`` (synthetic) or ``toy`` (toy codec)."""
    if metric_kind not in METRIC_KINDS:
        raise CurveError(f"unknown metric kind {metric_kind!r}")
    if family not in BUNDLED_FAMILIES:
        raise CurveError(f"unknown curve family {family!r}; expected one of {BUNDLED_FAMILIES}")
    prefix = "" if family == "surrogate" else "toy_"
    return Path(__file__).parent / "data" / "curves" / f"{prefix}{metric_kind}_baseline.txt"


def load_bundled(metric_kind: str, family: str = "surrogate") -> RDCurve:
    return load_curve(bundled_curve_path(metric_kind, family))
