"""Preprocessing of masked volumes and synthetic lesion phantoms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .io import Sample

DILATION_RADIUS = 3


@dataclass
class RawVolume:
    intensities: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 3 or min(self.intensities.shape) < 8:
            raise ValueError(f"raw volumes are 3D with every extent >= 8, got {self.intensities.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.intensities.shape:
                raise ValueError(f"mask shape {self.mask.shape} != volume shape {self.intensities.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.intensities.shape


@dataclass
class PreprocessedVolume:
    data: np.ndarray  # float32, values in [0, 1]
    offset: tuple[int, int, int]  # raw-volume coordinate of voxel (0, 0, 0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def ball(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    return x ** 2 + y ** 2 + z ** 2 <= radius ** 2


def preprocess(raw: RawVolume, sigma: float = 2.0, trim_fraction: float = 0.01,
               levels: int = 2) -> PreprocessedVolume:
    """Mask, crop, trim and rescale a volume into a network input.

    The ROI mask is dilated by a ball of radius 3, its borders blurred with
    a Gaussian of std ``sigma`` and the result multiplied into the
    intensities.  The volume is cropped to the dilated mask's bounding box
    and zero-padded at the high end of each axis up to a multiple of
    ``2**levels``.  Values above the ``1 - trim_fraction`` quantile are
    clipped before min-max rescaling; a constant volume maps to zeros.
    """
    mask = np.ones(raw.dims, dtype=bool) if raw.mask is None else raw.mask
    if not mask.any():
        raise ValueError("ROI mask is empty")
    dilated = ndimage.binary_dilation(mask, structure=ball(DILATION_RADIUS))
    weight = ndimage.gaussian_filter(dilated.astype(np.float64), sigma, mode="nearest")
    masked = raw.intensities * weight

    idx = np.nonzero(dilated)
    lo = [int(i.min()) for i in idx]
    hi = [int(i.max()) + 1 for i in idx]
    cropped = masked[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    step = 2 ** levels
    target = [-(-e // step) * step for e in cropped.shape]
    out = np.zeros(target, dtype=np.float64)
    out[:cropped.shape[0], :cropped.shape[1], :cropped.shape[2]] = cropped

    if trim_fraction > 0:
        ceiling = np.quantile(out, 1.0 - trim_fraction)
        out = np.minimum(out, ceiling)
    vmin, vmax = out.min(), out.max()
    if vmax > vmin:
        out = (out - vmin) / (vmax - vmin)
    else:
        out = np.zeros_like(out)
    return PreprocessedVolume(np.clip(out, 0.0, 1.0).astype(np.float32), tuple(lo))


@dataclass
class PhantomSpec:
    amplitude: tuple[float, float] = (0.6, 1.0)
    radius: tuple[float, float] = (1.0, 3.0)
    min_separation: float = 8.0
    margin: int = 3
    background: float = 0.3
    noise_std: float = 0.05
    max_attempts: int = 2000


def place_centers(dims, k: int, rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    """Rejection-sample k integer centers, pairwise >= min_separation apart
    and at least ``margin`` voxels from every face."""
    lo = spec.margin
    hi = [d - spec.margin for d in dims]
    if any(h <= lo for h in hi):
        raise ValueError(f"dims {tuple(dims)} leave no room inside a {spec.margin}-voxel margin")
    for _ in range(20):
        centers = []
        for _ in range(spec.max_attempts):
            if len(centers) == k:
                break
            c = np.array([rng.integers(lo, h) for h in hi])
            if all(np.linalg.norm(c - o) >= spec.min_separation for o in centers):
                centers.append(c)
        if len(centers) == k:
            return np.array(centers, dtype=int).reshape(k, 3)
    raise ValueError(f"could not place {k} lesions {spec.min_separation} voxels apart in dims {tuple(dims)}")


def _background(dims, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    axes = [np.arange(d) / d for d in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    field = np.zeros(dims)
    for _ in range(3):
        freq = rng.uniform(0.3, 1.2, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * (freq[0] * x + freq[1] * y + freq[2] * z) + phase)
    field -= field.min()
    if field.max() > 0:
        field /= field.max()
    return amplitude * rng.uniform(0.5, 1.0) * field


def generate_phantom(dims, count_range, rng: np.random.Generator, noise: bool = True,
                     spec: PhantomSpec | None = None) -> tuple[RawVolume, Sample]:
    """A volume with k Gaussian blob lesions on a smooth background.

    Each lesion has a peak amplitude in [0.6, 1.0] and a per-axis radius in
    [1, 3] voxels; the radius is where the profile falls to exp(-2) of the
    peak (std = radius / 2).  The returned sample carries the exact integer
    centers; its ``volume`` field is left empty for the caller to fill.
    """
    spec = spec or PhantomSpec()
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"phantom dims must be 3 extents >= 8, got {dims}")
    cmin, cmax = count_range
    if not 0 <= cmin <= cmax <= 10:
        raise ValueError(f"count range must satisfy 0 <= min <= max <= 10, got {count_range}")
    k = int(rng.integers(cmin, cmax + 1))
    centers = place_centers(dims, k, rng, spec)

    vol = _background(dims, rng, spec.background)
    grids = [np.arange(d, dtype=np.float64) for d in dims]
    for c in centers:
        amp = rng.uniform(*spec.amplitude)
        std = rng.uniform(*spec.radius, size=3) / 2.0
        profile = [np.exp(-0.5 * ((g - ci) / s) ** 2) for g, ci, s in zip(grids, c, std)]
        vol += amp * profile[0][:, None, None] * profile[1][None, :, None] * profile[2][None, None, :]
    if noise and spec.noise_std > 0:
        vol += rng.normal(0.0, spec.noise_std, size=dims)
    vol = np.clip(vol, 0.0, None)
    sample = Sample("", k, [tuple(int(v) for v in c) for c in centers])
    return RawVolume(vol, np.ones(dims, dtype=bool)), sample
