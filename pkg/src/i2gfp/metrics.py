"""SAD, MSE, gradient and connectivity errors of an alpha matte.

All four are evaluated on a boolean ``mask`` (normally the trimap's unknown
region).  Inputs are float mattes in ``[0, 1]``.  SAD, Grad and Conn are
reported in thousands (raw sums divided by 1000), MSE as a plain mean.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .matting_core import load_alpha, load_trimap, unknown_mask

SCALE = 1000.0
GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_THETA = 0.15
METRIC_NAMES = ("sad", "mse", "grad", "conn")


def _prepare(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if not pred.shape == gt.shape == mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    return pred, gt, mask


def sad(pred, gt, mask=None) -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    return float(np.abs(pred - gt)[mask].sum() / SCALE)


def mse(pred, gt, mask=None) -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    n = mask.sum()
    if n == 0:
        return 0.0
    return float(((pred - gt) ** 2)[mask].sum() / n)


def gaussian_derivative_taps(sigma: float = GRAD_SIGMA):
    """1-D Gaussian and derivative-of-Gaussian taps on ``[-ceil(3 sigma), ceil(3 sigma)]``,
    each scaled to unit L2 norm (so the separable 2-D kernel has unit norm)."""
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-x ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -x * g / sigma ** 2
    return g / np.linalg.norm(g), dg / np.linalg.norm(dg)


def gaussian_gradient(alpha, sigma: float = GRAD_SIGMA):
    """``(gx, gy)`` by separable convolution with replicate borders."""
    g, dg = gaussian_derivative_taps(sigma)
    alpha = np.asarray(alpha, dtype=np.float64)
    gx = ndimage.convolve1d(ndimage.convolve1d(alpha, g, axis=0, mode="nearest"), dg, axis=1, mode="nearest")
    gy = ndimage.convolve1d(ndimage.convolve1d(alpha, dg, axis=0, mode="nearest"), g, axis=1, mode="nearest")
    return gx, gy


def grad_metric(pred, gt, mask=None, sigma: float = GRAD_SIGMA) -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    pm = np.hypot(*gaussian_gradient(pred, sigma))
    gm = np.hypot(*gaussian_gradient(gt, sigma))
    return float(((pm - gm) ** 2)[mask].sum() / SCALE)


def largest_component(binary) -> np.ndarray:
    """Largest 4-connected component; ties go to the one reached first in raster order."""
    labels, n = ndimage.label(binary)
    if n == 0:
        return np.zeros(binary.shape, bool)
    counts = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(counts)) + 1)


def connectivity_levels(pred, gt, step: float = CONN_STEP) -> np.ndarray:
    """Per pixel, the highest threshold at which it belongs to the largest
    component of ``{pred >= t} & {gt >= t}``."""
    steps = int(round(1.0 / step))
    level = np.zeros(np.shape(gt), dtype=np.float64)
    for i in range(steps + 1):
        t = i / steps
        omega = largest_component((pred >= t) & (gt >= t))
        level[omega] = t
    return level


def conn_metric(pred, gt, mask=None, step: float = CONN_STEP, theta: float = CONN_THETA) -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    level = connectivity_levels(pred, gt, step)
    pd, gd = pred - level, gt - level
    phi_p = 1.0 - pd * (pd >= theta)
    phi_g = 1.0 - gd * (gd >= theta)
    # correctly rounded sum, so the result does not depend on summation order
    return math.fsum(np.abs(phi_p - phi_g)[mask].tolist()) / SCALE


def all_metrics(pred, gt, mask=None) -> dict:
    return {"sad": sad(pred, gt, mask), "mse": mse(pred, gt, mask),
            "grad": grad_metric(pred, gt, mask), "conn": conn_metric(pred, gt, mask)}


# -- reports -------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["region", "per_image", "aggregate", "failures"],
    "properties": {
        "region": {"enum": ["unknown", "full"]},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", *METRIC_NAMES],
                "properties": {"name": {"type": "string"},
                               **{m: {"type": "number", "minimum": 0} for m in METRIC_NAMES}},
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["count", *METRIC_NAMES],
            "properties": {"count": {"type": "integer", "minimum": 0},
                           **{m: {"type": "number", "minimum": 0} for m in METRIC_NAMES}},
        },
        "failures": {
            "type": "array",
            "items": {"type": "object", "required": ["name", "error"],
                      "properties": {"name": {"type": "string"}, "error": {"type": "string"}}},
        },
    },
}


@dataclass
class ImageMetrics:
    name: str
    sad: float
    mse: float
    grad: float
    conn: float


@dataclass
class MetricReport:
    per_image: list[ImageMetrics]
    region: str = "unknown"
    failures: list[dict] = field(default_factory=list)

    @property
    def aggregate(self) -> dict:
        agg = {"count": len(self.per_image)}
        for m in METRIC_NAMES:
            vals = [getattr(r, m) for r in self.per_image]
            agg[m] = float(np.mean(vals)) if vals else 0.0
        return agg

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"region": self.region, "per_image": [asdict(r) for r in self.per_image],
                "aggregate": self.aggregate, "failures": list(self.failures)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary_table(self) -> str:
        rows = [f"{'name':<32} {'SAD':>10} {'MSE':>10} {'Grad':>10} {'Conn':>10}"]
        for r in self.per_image:
            rows.append(f"{r.name:<32} {r.sad:10.4f} {r.mse:10.6f} {r.grad:10.4f} {r.conn:10.4f}")
        a = self.aggregate
        rows.append(f"{'mean (' + str(a['count']) + ' images)':<32} {a['sad']:10.4f} {a['mse']:10.6f} "
                    f"{a['grad']:10.4f} {a['conn']:10.4f}")
        for f in self.failures:
            rows.append(f"FAILED {f['name']}: {f['error']}")
        return "\n".join(rows)


def evaluate(triples: Iterable, region: str = "unknown") -> MetricReport:
    """Score ``(name, pred, gt, trimap)`` entries; each of pred/gt/trimap may be
    an array or a PNG path.  Failures are recorded rather than raised."""
    if region not in ("unknown", "full"):
        raise ValueError(f"region must be 'unknown' or 'full', got {region!r}")
    results, failures = [], []
    for name, pred, gt, trimap in sorted(triples, key=lambda t: t[0]):
        try:
            p = load_alpha(pred) if isinstance(pred, (str, Path)) else np.asarray(pred)
            g = load_alpha(gt) if isinstance(gt, (str, Path)) else np.asarray(gt)
            tri = load_trimap(trimap) if isinstance(trimap, (str, Path)) else np.asarray(trimap)
            mask = np.ones(g.shape, bool) if region == "full" else unknown_mask(tri)
            results.append(ImageMetrics(name, **all_metrics(p, g, mask)))
        except (OSError, ValueError) as exc:
            failures.append({"name": name, "error": str(exc)})
    return MetricReport(results, region=region, failures=failures)


def pair_directories(pred_dir, gt_dir, trimap_dir) -> list[tuple]:
    """Match files by name across the three directories."""
    dirs = [Path(d) for d in (pred_dir, gt_dir, trimap_dir)]
    listings = []
    for d in dirs:
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
        listings.append(sorted(p.name for p in d.iterdir() if p.suffix.lower() == ".png"))
    if not (len(listings[0]) == len(listings[1]) == len(listings[2])):
        raise ValueError("file count mismatch: " + ", ".join(
            f"{d}={len(n)}" for d, n in zip(dirs, listings)))
    return [(Path(n).stem, dirs[0] / n, dirs[1] / n, dirs[2] / n) for n in listings[0]]
