"""Heatmap sources for GP-Unet and its baselines, detection metrics and
FROC sweeps.

Method names and their rows in the comparison table:

    intensity           (a) thresholded input intensities
    saliency            (b) saliency of the encoder-only regression network
    saliency-fcn        (c) saliency of the full GP-Unet
    regression-coarse   (d) heatmap of the encoder-only regression network
    gpunet              (e) GP-Unet heatmap
    gpunet+intensity    (f) GP-Unet heatmap blended with intensities
"""
from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detection import DetectionSet, ThresholdSweep, detect, match, target_count
from .io import Sample
from .model import GPUNet
from .tensor import ShapeError, Tensor

HeatmapSource = Callable[[np.ndarray], tuple[np.ndarray, float]]

TABLE_LABELS = {
    "intensity": "(a) Intensities",
    "saliency": "(b) Saliency",
    "saliency-fcn": "(c) Saliency FCN",
    "regression-coarse": "(d) Regression",
    "gpunet": "(e) Regression FCN",
    "gpunet+intensity": "(f) Intensities + Reg FCN",
}
METHODS = tuple(TABLE_LABELS)
COARSE_METHODS = ("saliency", "regression-coarse")


def minmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def combine_intensity(heatmap: np.ndarray, volume: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """alpha * minmax(heatmap) + (1 - alpha) * volume."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    heatmap, volume = np.asarray(heatmap), np.asarray(volume, dtype=np.float64)
    if heatmap.shape != volume.shape:
        raise ShapeError(f"heatmap shape {heatmap.shape} != volume shape {volume.shape}")
    return alpha * minmax(heatmap) + (1.0 - alpha) * volume


def saliency(model, volume: np.ndarray) -> np.ndarray:
    """|d count / d input| per voxel, via one backward pass.  ``model`` needs
    only a ``forward_train`` method mapping a 5-axis tensor to counts."""
    x = Tensor(np.asarray(volume, dtype=np.float32)[None, None], requires_grad=True)
    y = model.forward_train(x)
    y.sum().backward()
    if x.grad is None:
        return np.zeros(np.shape(volume))
    return np.abs(x.grad[0, 0].astype(np.float64))


def upsample_nearest(a: np.ndarray, factor: int) -> np.ndarray:
    for axis in range(a.ndim):
        a = np.repeat(a, factor, axis=axis)
    return a


def coarse_regression_heatmap(model: GPUNet, volume: np.ndarray) -> np.ndarray:
    """Weighted sum of the encoder-only network's feature maps, replicated
    back to the input grid."""
    if model.config.upsampling:
        raise ValueError("coarse_regression_heatmap needs a network built without the upsampling path")
    _, coarse = model.predict(volume)
    return upsample_nearest(coarse.astype(np.float64), 2 ** model.config.levels)


def make_source(method: str, model: GPUNet, coarse: GPUNet | None = None,
                alpha: float = 0.5) -> HeatmapSource:
    """Heatmap plus count estimate for one of METHODS.  Thresholds follow the
    count of the network that produced the map; the intensity baseline
    borrows GP-Unet's count."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method in COARSE_METHODS and coarse is None:
        raise ValueError(f"method {method!r} needs an encoder-only (coarse) model")

    def gpunet(v):
        count, m = model.predict(v)
        return m.astype(np.float64), count

    def combined(v):
        count, m = model.predict(v)
        return combine_intensity(m, v, alpha), count

    def intensity(v):
        count, _ = model.predict(v)
        return np.asarray(v, dtype=np.float64), count

    def sal_fcn(v):
        return saliency(model, v), _count(model, v)

    def sal_coarse(v):
        return saliency(coarse, v), _count(coarse, v)

    def regression_coarse(v):
        count, _ = coarse.predict(v)
        return coarse_regression_heatmap(coarse, v), count

    return {
        "gpunet": gpunet,
        "gpunet+intensity": combined,
        "intensity": intensity,
        "saliency-fcn": sal_fcn,
        "saliency": sal_coarse,
        "regression-coarse": regression_coarse,
    }[method]


def _count(model: GPUNet, volume: np.ndarray) -> float:
    return model.forward_train(Tensor(np.asarray(volume, dtype=np.float32)[None, None])).item()


@dataclass
class ImageResult:
    volume: str
    count_estimate: float
    target: int
    n_detections: int
    tp: int
    fp: int
    fn: int


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    n_images: int
    per_image: list[ImageResult] = field(default_factory=list)

    @property
    def tpr(self) -> float:
        # no annotated lesions: nothing could be missed
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def fdr(self) -> float:
        return self.fp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def fpav(self) -> float:
        return self.fp / self.n_images if self.n_images else 0.0

    def row(self, method: str) -> dict:
        return {"method": method, "tpr": self.tpr, "fpav": self.fpav, "fdr": self.fdr}


def _require_centers(samples: Sequence[Sample]) -> None:
    for s in samples:
        if s.centers is None:
            raise ValueError(f"evaluation needs lesion centers; {s.volume} has none")


@dataclass
class PreparedImage:
    sample: Sample
    heatmap: np.ndarray
    count_estimate: float
    sweep: ThresholdSweep


def prepare(source: HeatmapSource, samples: Sequence[Sample],
            volumes: dict[str, np.ndarray] | None = None) -> list[PreparedImage]:
    """Run a heatmap source over annotated samples once, keeping each
    heatmap's threshold sweep for reuse across operating points."""
    _require_centers(samples)
    out = []
    for s in samples:
        v = volumes[str(s.path)] if volumes is not None and str(s.path) in volumes else s.load()
        heatmap, count = source(v)
        out.append(PreparedImage(s, heatmap, float(count), ThresholdSweep(heatmap)))
    return out


def score(prepared: Sequence[PreparedImage], radius: float = 3.0,
          factor: float = 1.0) -> MetricsReport:
    """Micro-averaged TP/FP/FN over all images at one operating point."""
    rows = []
    for p in prepared:
        dets: DetectionSet = detect(p.heatmap, p.count_estimate, factor, p.sweep)
        m = match(dets.centers, p.sample.centers, radius)
        rows.append(ImageResult(p.sample.volume, p.count_estimate,
                                target_count(p.count_estimate, factor), len(dets), m.tp, m.fp, m.fn))
    return MetricsReport(sum(r.tp for r in rows), sum(r.fp for r in rows),
                         sum(r.fn for r in rows), len(rows), rows)


def evaluate(source: HeatmapSource, samples: Sequence[Sample], radius: float = 3.0,
             factor: float = 1.0, volumes: dict[str, np.ndarray] | None = None) -> MetricsReport:
    return score(prepare(source, samples, volumes), radius, factor)


@dataclass
class FrocPoint:
    factor: float
    fpav: float
    tpr: float
    report: MetricsReport = field(repr=False, compare=False, default=None)


@dataclass
class FrocCurve:
    points: list[FrocPoint]

    @property
    def factors(self) -> list[float]:
        return [p.factor for p in self.points]

    def tpr_at_fpav(self, fpav: float) -> float:
        """TPR linearly interpolated at ``fpav`` along the curve anchored at
        the origin (no detections); beyond the last point it stays flat."""
        pts = sorted([(0.0, 0.0)] + [(p.fpav, p.tpr) for p in self.points])
        best_below = 0.0
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            if x0 <= fpav <= x1:
                return y0 if x1 == x0 else max(best_below, y0 + (y1 - y0) * (fpav - x0) / (x1 - x0))
            best_below = max(best_below, y0, y1)
        return max(y for x, y in pts if x <= fpav)

    def best_tpr_within(self, max_fpav: float) -> FrocPoint | None:
        ok = [p for p in self.points if p.fpav <= max_fpav]
        return max(ok, key=lambda p: (p.tpr, -p.fpav)) if ok else None


def check_factors(factors: Sequence[float]) -> list[float]:
    factors = [float(f) for f in factors]
    if not factors:
        raise ValueError("at least one factor is required")
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise ValueError(f"factors must be strictly increasing, got {factors}")
    return factors


def froc(source: HeatmapSource | Sequence[PreparedImage], samples: Sequence[Sample] | None,
         factors: Sequence[float], radius: float = 3.0,
         volumes: dict[str, np.ndarray] | None = None) -> FrocCurve:
    """One operating point per count-overestimation factor."""
    factors = check_factors(factors)
    prepared = source if samples is None else prepare(source, samples, volumes)
    points = []
    for k in factors:
        rep = score(prepared, radius, k)
        points.append(FrocPoint(k, rep.fpav, rep.tpr, rep))
    return FrocCurve(points)


def _output(target):
    """Open ``target`` for writing unless it is already a text stream."""
    if hasattr(target, "write"):
        return contextlib.nullcontext(target)
    return Path(target).open("w", newline="")


def write_metrics(target, rows: list[dict]) -> None:
    with _output(target) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "tpr", "fpav", "fdr"])
        for r in rows:
            w.writerow([r["method"], repr(float(r["tpr"])), repr(float(r["fpav"])), repr(float(r["fdr"]))])


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"method": r["method"], "tpr": float(r["tpr"]), "fpav": float(r["fpav"]),
                 "fdr": float(r["fdr"])} for r in csv.DictReader(fh)]


def write_froc(target, curve: FrocCurve) -> None:
    with _output(target) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["factor", "fpav", "tpr"])
        for p in curve.points:
            w.writerow([repr(float(p.factor)), repr(float(p.fpav)), repr(float(p.tpr))])


def read_froc(path) -> FrocCurve:
    with Path(path).open(newline="") as fh:
        return FrocCurve([FrocPoint(float(r["factor"]), float(r["fpav"]), float(r["tpr"]))
                          for r in csv.DictReader(fh)])
