"""Volumetric data type, CT preprocessing transforms and ellipsoid phantoms.

Array axes are ordered (z, y, x) = (d, h, w); ``spacing`` and ``origin``
follow the same axis order. Functions that take world points as ``xyz``
triples (the projector, the fusion grid) say so explicitly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateRangeError, UnitMismatchError, ValidationError

BACKGROUND = 0.0


class Unit(enum.IntEnum):
    HU = 0
    NORMALIZED = 1


def centered_origin(shape: Sequence[int], spacing: Sequence[float]) -> tuple[float, float, float]:
    """Origin placing the volume center at world (0, 0, 0)."""
    return tuple(-(n - 1) / 2.0 * s for n, s in zip(shape, spacing))


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable scalar grid with spacing/origin metadata (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] | None = None
    unit: Unit = Unit.HU

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be a non-empty 3D grid, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")
        origin = centered_origin(data.shape, spacing) if self.origin is None else tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValidationError("origin must have three components")
        unit = Unit(self.unit)
        if unit is Unit.NORMALIZED and data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValidationError("normalized volume values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "unit", unit)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def index_to_world(self, index) -> np.ndarray:
        """World position (array axis order) of voxel centers; ``index`` is (..., 3)."""
        return np.asarray(self.origin) + np.asarray(index, dtype=np.float64) * np.asarray(self.spacing)

    def world_to_index(self, point) -> np.ndarray:
        return (np.asarray(point, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def replace(self, data=None, **kw) -> "Volume3D":
        fields = dict(data=self.data if data is None else data, spacing=self.spacing,
                      origin=self.origin, unit=self.unit)
        fields.update(kw)
        return Volume3D(**fields)

    def center_xyz(self) -> np.ndarray:
        """World center of the grid as an (x, y, z) triple."""
        zyx = self.index_to_world((np.asarray(self.shape) - 1) / 2.0)
        return zyx[::-1].copy()


def clip_values(v: Volume3D, lo: float, hi: float) -> Volume3D:
    if v.unit is not Unit.HU:
        raise UnitMismatchError("clip_values expects an HU-tagged volume")
    if not lo < hi:
        raise DegenerateRangeError(f"clip range must satisfy lo < hi, got [{lo}, {hi}]")
    return v.replace(np.clip(v.data, lo, hi))


def normalize(v: Volume3D, lo: float, hi: float) -> Volume3D:
    """Map the clipped HU range [lo, hi] linearly onto [0, 1]."""
    if v.unit is not Unit.HU:
        raise UnitMismatchError("normalize expects an HU-tagged volume")
    if hi == lo:
        raise DegenerateRangeError("normalize needs hi != lo")
    if v.data.min() < lo or v.data.max() > hi:
        raise ValidationError("volume must be clipped to [lo, hi] before normalizing")
    return v.replace((v.data - lo) / (hi - lo), unit=Unit.NORMALIZED)


def denormalize(v: Volume3D, lo: float, hi: float) -> Volume3D:
    if v.unit is not Unit.NORMALIZED:
        raise UnitMismatchError("denormalize expects a normalized volume")
    if hi == lo:
        raise DegenerateRangeError("denormalize needs hi != lo")
    return v.replace(v.data * (hi - lo) + lo, unit=Unit.HU)


def _sample(v: Volume3D, coords: np.ndarray, background: float) -> np.ndarray:
    # Trilinear inside the voxel-edge extent, clamped to edge centers; background outside it.
    out = ndimage.map_coordinates(v.data, coords, order=1, mode="nearest")
    shape = np.asarray(v.shape, dtype=np.float64).reshape((3,) + (1,) * (coords.ndim - 1))
    outside = np.any((coords < -0.5) | (coords > shape - 0.5), axis=0)
    out[outside] = background
    return out


def resample_isotropic(v: Volume3D, target_spacing: float, background: float = BACKGROUND) -> Volume3D:
    """Resample onto an isotropic grid sharing the physical center of ``v``."""
    if not target_spacing > 0:
        raise ValidationError("target_spacing must be positive")
    t = float(target_spacing)
    if all(s == t for s in v.spacing):
        return v.replace(v.data.copy())
    new_shape = [max(1, int(round(n * s / t))) for n, s in zip(v.shape, v.spacing)]
    center = v.index_to_world((np.asarray(v.shape) - 1) / 2.0)
    new_origin = center - (np.asarray(new_shape) - 1) / 2.0 * t
    axes = [new_origin[a] + np.arange(new_shape[a]) * t for a in range(3)]
    world = np.stack(np.meshgrid(*axes, indexing="ij"))
    coords = (world - np.asarray(v.origin).reshape(3, 1, 1, 1)) / np.asarray(v.spacing).reshape(3, 1, 1, 1)
    return Volume3D(_sample(v, coords, background), (t, t, t), tuple(new_origin), v.unit)


def _resize(data: np.ndarray, n: int) -> np.ndarray:
    m = data.shape[0]
    pos = (np.arange(n) + 0.5) * (m / n) - 0.5
    coords = np.stack(np.meshgrid(pos, pos, pos, indexing="ij"))
    return ndimage.map_coordinates(data, coords, order=1, mode="nearest")


def crop_resize_cube(v: Volume3D, n: int) -> Volume3D:
    """Center-crop to the largest centered cube, then trilinearly resize to n³."""
    if n < 1:
        raise ValidationError("cube size must be >= 1")
    m = min(v.shape)
    start = [(dim - m) // 2 for dim in v.shape]
    cube = v.data[start[0]:start[0] + m, start[1]:start[1] + m, start[2]:start[2] + m]
    first_center = v.index_to_world(start)
    if m == n:
        return Volume3D(cube.copy(), v.spacing, tuple(first_center), v.unit)
    scale = m / n
    spacing = tuple(s * scale for s in v.spacing)
    # Keep the cube's physical center fixed.
    cube_center = first_center + (m - 1) / 2.0 * np.asarray(v.spacing)
    origin = cube_center - (n - 1) / 2.0 * np.asarray(spacing)
    data = _resize(cube, n)
    if v.unit is Unit.NORMALIZED:
        data = np.clip(data, 0.0, 1.0)
    return Volume3D(data, spacing, tuple(origin), v.unit)


# --------------------------------------------------------------------------
# Phantoms
# --------------------------------------------------------------------------

def rotation_zyx(angles_deg: Sequence[float]) -> np.ndarray:
    """Rotation matrix Rz(a) @ Ry(b) @ Rx(c) acting on column (x, y, z) vectors."""
    a, b, c = (math.radians(x) for x in angles_deg)
    rz = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[math.cos(b), 0.0, math.sin(b)], [0.0, 1.0, 0.0], [-math.sin(b), 0.0, math.cos(b)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(c), -math.sin(c)], [0.0, math.sin(c), math.cos(c)]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]       # (x, y, z) mm
    semi_axes: tuple[float, float, float]    # mm
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intensity: float = 1.0

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValidationError("ellipsoid semi-axes must be positive")

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Boolean mask for points given as (..., 3) xyz arrays."""
        rot = rotation_zyx(self.angles)
        local = (np.asarray(xyz) - np.asarray(self.center)) @ rot
        return np.sum((local / np.asarray(self.semi_axes)) ** 2, axis=-1) <= 1.0


@dataclass(frozen=True)
class Phantom:
    ellipsoids: tuple[Ellipsoid, ...] = field(default_factory=tuple)

    def scaled(self, factor: float) -> "Phantom":
        return Phantom(tuple(
            Ellipsoid(tuple(c * factor for c in e.center), tuple(a * factor for a in e.semi_axes),
                      e.angles, e.intensity)
            for e in self.ellipsoids))


def voxel_centers_xyz(shape: Sequence[int], spacing: Sequence[float], origin: Sequence[float]) -> np.ndarray:
    """(d, h, w, 3) array of voxel centers as xyz triples."""
    axes = [origin[a] + np.arange(shape[a]) * spacing[a] for a in range(3)]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1)


def make_phantom(p: Phantom, n: int, spacing: float = 1.0) -> Volume3D:
    """Render ellipsoids onto an n³ grid centered on the world origin.

    Each voxel holds the summed intensity of every ellipsoid containing its
    center. The result is HU-tagged (raw intensities, no range constraint).
    """
    if n < 1:
        raise ValidationError("phantom size must be >= 1")
    sp = (float(spacing),) * 3
    origin = centered_origin((n, n, n), sp)
    xyz = voxel_centers_xyz((n, n, n), sp, origin)
    out = np.zeros((n, n, n))
    for e in p.ellipsoids:
        out[e.contains(xyz)] += e.intensity
    return Volume3D(out, sp, origin, Unit.HU)


def parse_phantom(text: str) -> Phantom:
    """Parse the phantom text format.

    One ellipsoid per line: ``intensity cx cy cz ax ay az phi theta psi``.
    Blank lines and ``#`` comments are ignored.
    """
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vals = [float(tok) for tok in line.split()]
        if len(vals) != 10:
            raise ValidationError(f"phantom line {lineno}: expected 10 numbers, got {len(vals)}")
        items.append(Ellipsoid(tuple(vals[1:4]), tuple(vals[4:7]), tuple(vals[7:10]), vals[0]))
    return Phantom(tuple(items))


PHANTOM_KINDS = ("shepp3d", "lung", "empty")


def load_phantom(kind: str, half_extent_mm: float = 1.0) -> Phantom:
    """Load a bundled phantom (defined in unit coordinates) scaled to ``half_extent_mm``."""
    if kind == "empty":
        return Phantom()
    if kind not in PHANTOM_KINDS:
        raise ValidationError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    text = resources.files("sparsect.phantoms").joinpath(f"{kind}.txt").read_text()
    return parse_phantom(text).scaled(half_extent_mm)


def phantom_volume(kind: str, n: int, spacing: float = 1.0, smooth_sigma: float = 0.0) -> Volume3D:
    """Convenience: bundled phantom filling the n³ grid, optionally Gaussian-smoothed (sigma in voxels)."""
    vol = make_phantom(load_phantom(kind, n * spacing / 2.0), n, spacing)
    if smooth_sigma > 0:
        vol = vol.replace(ndimage.gaussian_filter(vol.data, smooth_sigma, mode="constant"))
    return vol
