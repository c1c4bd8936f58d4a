"""Multi-view conditioning: per-view 2D features, backprojection onto a 3D grid, averaging."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import ArityError, ShapeMismatchError, ValidationError
from .projector import Image2D, ProjectionGeometry, project_point
from .volume import Unit, Volume3D, voxel_centers_xyz

POINT_CHUNK = 1 << 16


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of world points; axis order (z, y, x) as in Volume3D."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def points_xyz(self) -> np.ndarray:
        return voxel_centers_xyz(self.shape, self.spacing, self.origin)

    @classmethod
    def of(cls, v: Volume3D) -> "GridSpec":
        return cls(v.shape, v.spacing, v.origin)


def latent_grid(v: Volume3D | GridSpec, factor: int = 2) -> GridSpec:
    """Grid of ``factor``-block centers covering the same world extent as ``v``."""
    g = GridSpec.of(v) if isinstance(v, Volume3D) else v
    if any(n % factor for n in g.shape):
        raise ValidationError(f"grid shape {g.shape} is not divisible by {factor}")
    shape = tuple(n // factor for n in g.shape)
    spacing = tuple(s * factor for s in g.spacing)
    origin = tuple(o + (factor - 1) / 2.0 * s for o, s in zip(g.origin, g.spacing))
    return GridSpec(shape, spacing, origin)


@dataclass(frozen=True, eq=False)
class FeatureImage:
    data: np.ndarray                  # (c, h', w')
    geometry: ProjectionGeometry

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] < 1:
            raise ValidationError("feature image must be (c, h, w) with c >= 1")
        if not np.all(np.isfinite(data)):
            raise ValidationError("feature image has non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    data: np.ndarray                  # (c, d', h', w')
    grid: GridSpec

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[1:] != tuple(self.grid.shape):
            raise ShapeMismatchError(f"feature volume {data.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def channel_volumes(self) -> list[Volume3D]:
        # Features carry no physical unit; the HU tag marks "unrestricted range".
        return [Volume3D(ch, self.grid.spacing, self.grid.origin, Unit.HU) for ch in self.data]

    @classmethod
    def from_channel_volumes(cls, vols: Sequence[Volume3D]) -> "FeatureVolume":
        if not vols:
            raise ArityError("need at least one channel")
        grid = GridSpec.of(vols[0])
        return cls(np.stack([v.data for v in vols]), grid)


class FeatureExtractor(Protocol):
    channels: int

    def output_shape(self, image_shape: tuple[int, int]) -> tuple[int, int]: ...

    def __call__(self, image: Image2D) -> FeatureImage: ...


class IdentityExtractor:
    """Single channel equal to the pixel values."""

    channels = 1

    def output_shape(self, image_shape):
        return tuple(image_shape)

    def __call__(self, image: Image2D) -> FeatureImage:
        return FeatureImage(image.data[None], image.geometry)


class BandPassExtractor:
    """Difference-of-Gaussians responses at three scales (c=3); zero response to constants."""

    channels = 3

    def __init__(self, sigmas: Sequence[tuple[float, float]] = ((0.5, 1.0), (1.0, 2.0), (2.0, 4.0))):
        self.sigmas = tuple(sigmas)
        self.channels = len(self.sigmas)

    def output_shape(self, image_shape):
        return tuple(image_shape)

    def features(self, data: np.ndarray) -> np.ndarray:
        return np.stack([ndimage.gaussian_filter(data, s1, mode="reflect")
                         - ndimage.gaussian_filter(data, s2, mode="reflect")
                         for s1, s2 in self.sigmas])

    def __call__(self, image: Image2D) -> FeatureImage:
        return FeatureImage(self.features(image.data), image.geometry)


EXTRACTORS = {"identity": IdentityExtractor, "bandpass": BandPassExtractor}


def make_extractor(name: str) -> FeatureExtractor:
    try:
        return EXTRACTORS[name]()
    except KeyError:
        raise ValidationError(f"unknown feature extractor {name!r}; choose from {sorted(EXTRACTORS)}") from None


def bilinear(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample all channels of ``data`` (c, h, w) at continuous pixel coords.

    Points outside the closed pixel-center rectangle give 0 in every channel.
    """
    c, h, w = data.shape
    inside = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)
    r = np.where(inside, rows, 0.0)
    q = np.where(inside, cols, 0.0)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(q).astype(np.int64), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr, fc = r - r0, q - c0
    out = ((1 - fr) * (1 - fc) * data[:, r0, c0] + (1 - fr) * fc * data[:, r0, c1]
           + fr * (1 - fc) * data[:, r1, c0] + fr * fc * data[:, r1, c1])
    return np.where(inside, out, 0.0)


def backproject(f: FeatureImage, grid: GridSpec, workers: int = 1) -> FeatureVolume:
    """Project every grid point onto the detector and bilinearly sample ``f`` there."""
    pts = grid.points_xyz().reshape(-1, 3)
    if len(pts) == 0:
        raise ValidationError("grid is empty")
    chunks = [slice(i, min(i + POINT_CHUNK, len(pts))) for i in range(0, len(pts), POINT_CHUNK)]

    def run(sl):
        uv = project_point(pts[sl], f.geometry)
        return bilinear(f.data, uv[:, 0], uv[:, 1])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    data = np.concatenate(parts, axis=1).reshape((f.channels,) + tuple(grid.shape))
    return FeatureVolume(data, grid)


def fuse(volumes: Sequence[FeatureVolume]) -> FeatureVolume:
    """Elementwise mean over views.

    Values are sorted per element before a running-mean accumulation, which
    makes the result exactly permutation-invariant and exactly reproduces
    the input when all views agree.
    """
    volumes = list(volumes)
    if not volumes:
        raise ArityError("fuse needs at least one feature volume")
    ref = volumes[0]
    for v in volumes[1:]:
        if v.data.shape != ref.data.shape:
            raise ShapeMismatchError(f"feature volume shapes differ: {ref.data.shape} vs {v.data.shape}")
    stacked = np.sort(np.stack([v.data for v in volumes]), axis=0)
    mean = stacked[0].copy()
    for k in range(1, len(volumes)):
        mean += (stacked[k] - mean) / (k + 1)
    return FeatureVolume(mean, ref.grid)


def build_condition(xrays: Sequence[Image2D], extractor: FeatureExtractor, grid: GridSpec,
                    workers: int = 1) -> FeatureVolume:
    """Extract, backproject and average features from every view."""
    xrays = list(xrays)
    if not xrays:
        raise ArityError("build_condition needs at least one view")
    vols = []
    for img in xrays:
        if img.geometry is None:
            raise ValidationError("every x-ray must carry its projection geometry")
        vols.append(backproject(extractor(img), grid, workers=workers))
    return fuse(vols)
