"""Count-guided thresholding, connected components and detection matching.

Voxel "raster order" means x varies fastest: (x, y, z) has index
``x + X * (y + Y * z)``.  Thresholded masks keep voxels with ``M >= t``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

N_LEVELS = 256
_FULL_26 = np.ones((3, 3, 3), dtype=bool)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """26-connected labelling; labels 1..n follow the raster order of each
    component's first voxel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros(mask.shape, dtype=np.int32), 0
    # scipy numbers components in C order of the array it sees; transposing to
    # (z, y, x) makes that the x-fastest raster order
    labels, n = ndimage.label(mask.T, structure=_FULL_26)
    return np.ascontiguousarray(labels.T), int(n)


def count_components(mask: np.ndarray) -> int:
    return ndimage.label(np.asarray(mask, dtype=bool), structure=_FULL_26)[1]


def threshold_candidates(heatmap: np.ndarray, levels: int = N_LEVELS) -> np.ndarray:
    """Ascending, de-duplicated quantiles of the heatmap's positive values at
    ``levels`` evenly spaced probabilities from 0 to 1."""
    m = np.asarray(heatmap, dtype=np.float64)
    pos = m[m > 0]
    if pos.size == 0:
        return np.empty(0)
    return np.unique(np.quantile(pos, np.linspace(0.0, 1.0, levels)))


def choose_threshold(candidates: np.ndarray, counts: np.ndarray, target: int) -> int:
    """Index of the chosen candidate: the largest threshold whose count equals
    ``target``, else the one minimising |count - target| (larger wins ties)."""
    diff = np.abs(np.asarray(counts) - target)
    best = diff.min()
    return int(np.flatnonzero(diff == best).max())


class ThresholdSweep:
    """Component counts of one heatmap over its candidate thresholds, so that
    several targets can be served from a single sweep."""

    def __init__(self, heatmap: np.ndarray, levels: int = N_LEVELS):
        self.heatmap = np.asarray(heatmap, dtype=np.float64)
        self.candidates = threshold_candidates(self.heatmap, levels)
        self.counts = np.array([count_components(self.heatmap >= t) for t in self.candidates],
                               dtype=int)

    @property
    def empty_threshold(self) -> float:
        return float(self.heatmap.max()) + 1.0

    def select(self, target: int) -> float:
        if target < 0:
            raise ValueError(f"target count must be >= 0, got {target}")
        if target == 0 or self.candidates.size == 0:
            return self.empty_threshold
        return float(self.candidates[choose_threshold(self.candidates, self.counts, target)])


def select_threshold(heatmap: np.ndarray, target_count: int) -> float:
    return ThresholdSweep(heatmap).select(target_count)


@dataclass
class Detection:
    center: tuple[int, int, int]
    size: int

    def to_json(self) -> dict:
        return {"center": list(self.center), "size": self.size}


@dataclass
class DetectionSet:
    threshold: float
    count_estimate: float
    detections: list[Detection] = field(default_factory=list)

    def __len__(self):
        return len(self.detections)

    @property
    def centers(self) -> list[tuple[int, int, int]]:
        return [d.center for d in self.detections]

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "count_estimate": self.count_estimate,
            "detections": [d.to_json() for d in self.detections],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def target_count(count_estimate: float, factor: float = 1.0) -> int:
    """max(0, round(factor * count)), rounding halves up."""
    return max(0, int(math.floor(factor * count_estimate + 0.5)))


def component_peaks(heatmap: np.ndarray, labels: np.ndarray, n: int) -> list[Detection]:
    """Per component: the voxel with the largest heatmap value (first in
    raster order on ties) and the component's voxel count."""
    X, Y, _ = heatmap.shape
    values = heatmap.T.ravel()
    lab = labels.T.ravel()
    order = np.argsort(lab, kind="stable")
    sorted_lab = lab[order]
    starts = np.searchsorted(sorted_lab, np.arange(1, n + 2))
    out = []
    for k in range(n):
        idx = order[starts[k]:starts[k + 1]]  # ascending raster indices
        j = int(idx[np.argmax(values[idx])])
        out.append(Detection((j % X, (j // X) % Y, j // (X * Y)), int(idx.size)))
    return out


def detect(heatmap: np.ndarray, count_estimate: float, factor: float = 1.0,
           sweep: ThresholdSweep | None = None) -> DetectionSet:
    m = np.asarray(heatmap, dtype=np.float64)
    sweep = sweep if sweep is not None else ThresholdSweep(m)
    t = sweep.select(target_count(count_estimate, factor))
    labels, n = connected_components(m >= t)
    return DetectionSet(t, float(count_estimate), component_peaks(m, labels, n))


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]]  # (detection index, annotation index, distance)


def match(detections, annotations, radius: float = 3.0) -> MatchResult:
    """Greedy one-to-one matching in order of increasing center distance;
    pairs within ``radius`` (inclusive) are true positives."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    det = np.asarray([tuple(d) for d in detections], dtype=np.float64).reshape(-1, 3)
    ann = np.asarray([tuple(a) for a in annotations], dtype=np.float64).reshape(-1, 3)
    pairs = []
    if len(det) and len(ann):
        dist = np.sqrt(((det[:, None, :] - ann[None, :, :]) ** 2).sum(-1))
        cand = sorted((dist[i, j], i, j) for i, j in zip(*np.nonzero(dist <= radius)))
        used_d, used_a = set(), set()
        for d, i, j in cand:
            if i in used_d or j in used_a:
                continue
            used_d.add(i)
            used_a.add(j)
            pairs.append((int(i), int(j), float(d)))
    tp = len(pairs)
    return MatchResult(tp, len(det) - tp, len(ann) - tp, pairs)
