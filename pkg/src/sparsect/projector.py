"""Point projection and DRR rendering for parallel and cone beams.

Conventions (source frame, after ``p' = p @ R(theta) + t``):

* ``p'_x`` is depth along the beam; the source sits at ``p'_x = -dso`` and the
  detector plane at ``p'_x = dsd - dso``.
* ``p'_y`` maps to detector columns, ``p'_z`` (world z) maps to detector rows.
* ``R(theta)`` is the right-handed rotation about +z. At 0 degrees the beam runs
  along world x (lateral view), at 90 degrees along world y (frontal view).

DRR pixels are raw line integrals of voxel values (value x mm); there is no
exponential attenuation step.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ProjectionDomainError, ValidationError
from .volume import Volume3D

DEFAULT_ANGLES = tuple(22.5 * k for k in range(8))
RAY_CHUNK = 4096


@dataclass(frozen=True)
class ProjectionGeometry:
    beam: str = "parallel"
    angle_deg: float = 0.0
    dso: float = 1000.0
    dsd: float = 1500.0
    detector_px: tuple[int, int] = (128, 128)
    detector_spacing: float = 1.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.beam not in ("parallel", "cone"):
            raise ValidationError(f"beam must be 'parallel' or 'cone', got {self.beam!r}")
        if self.beam == "cone" and not (self.dsd > self.dso > 0):
            raise ValidationError("cone beam requires dsd > dso > 0")
        rows, cols = self.detector_px
        if rows < 1 or cols < 1:
            raise ValidationError("detector needs at least one pixel per axis")
        if not self.detector_spacing > 0:
            raise ValidationError("detector_spacing must be positive")
        object.__setattr__(self, "detector_px", (int(rows), int(cols)))
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))

    @property
    def center_px(self) -> tuple[float, float]:
        rows, cols = self.detector_px
        return (rows - 1) / 2.0, (cols - 1) / 2.0

    def rotation(self) -> np.ndarray:
        a = math.radians(self.angle_deg)
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"beam": self.beam, "angle_deg": self.angle_deg, "dso": self.dso, "dsd": self.dsd,
                "detector_px": list(self.detector_px), "detector_spacing": self.detector_spacing,
                "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionGeometry":
        return cls(beam=d["beam"], angle_deg=float(d["angle_deg"]), dso=float(d["dso"]),
                   dsd=float(d["dsd"]), detector_px=tuple(d["detector_px"]),
                   detector_spacing=float(d["detector_spacing"]),
                   translation=tuple(d.get("translation", (0.0, 0.0, 0.0))))


@dataclass(frozen=True, eq=False)
class Image2D:
    data: np.ndarray
    pixel_spacing: float = 1.0
    geometry: ProjectionGeometry | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValidationError(f"image must be a non-empty 2D grid, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


def to_source_frame(p_xyz, g: ProjectionGeometry) -> np.ndarray:
    return np.asarray(p_xyz, dtype=np.float64) @ g.rotation() + np.asarray(g.translation)


def project_point_mm(p_xyz, g: ProjectionGeometry) -> np.ndarray:
    """Detector-plane offsets (row_mm, col_mm) from the detector center; shape (..., 2)."""
    p = to_source_frame(p_xyz, g)
    if not np.all(np.isfinite(p)):
        raise ValidationError("projected points must be finite")
    lateral = p[..., [2, 1]]
    if g.beam == "parallel":
        return lateral
    dist = g.dso + p[..., 0]
    if np.any(dist <= 0):
        raise ProjectionDomainError("point lies at or behind the source plane")
    return lateral * (g.dsd / dist)[..., None]


def project_point(p_xyz, g: ProjectionGeometry) -> np.ndarray:
    """Continuous detector pixel coordinates (row, col) of world points ``(..., 3)`` xyz."""
    mm = project_point_mm(p_xyz, g)
    return mm / g.detector_spacing + np.asarray(g.center_px)


def detector_rays(g: ProjectionGeometry) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origins and unit directions, each (rows*cols, 3) in xyz.

    Parallel rays start on the plane through the rotation center; cone rays
    start at the source.
    """
    rows, cols = g.detector_px
    r = (np.arange(rows) - g.center_px[0]) * g.detector_spacing
    c = (np.arange(cols) - g.center_px[1]) * g.detector_spacing
    rr, cc = np.meshgrid(r, c, indexing="ij")
    n = rows * cols
    rot_t = g.rotation().T
    t = np.asarray(g.translation)
    if g.beam == "parallel":
        origins_src = np.stack([np.zeros(n), cc.ravel(), rr.ravel()], axis=1)
        dirs_src = np.tile([1.0, 0.0, 0.0], (n, 1))
    else:
        origins_src = np.tile([-g.dso, 0.0, 0.0], (n, 1))
        target = np.stack([np.full(n, g.dsd - g.dso), cc.ravel(), rr.ravel()], axis=1)
        dirs_src = target - origins_src
        dirs_src /= np.linalg.norm(dirs_src, axis=1, keepdims=True)
    origins = (origins_src - t) @ rot_t
    dirs = dirs_src @ rot_t
    return origins, dirs


def _march_chunk(data, origin_zyx, spacing_zyx, ray_o, ray_d, center, offsets, step, forward_only):
    s0 = np.einsum("ij,ij->i", center - ray_o, ray_d)
    s = s0[:, None] + offsets[None, :]
    pts = ray_o[:, None, :] + s[..., None] * ray_d[:, None, :]      # (n, k, 3) xyz
    idx = (pts[..., ::-1] - origin_zyx) / spacing_zyx               # zyx index coords
    vals = ndimage.map_coordinates(data, np.moveaxis(idx, -1, 0), order=1,
                                   mode="grid-constant", cval=0.0)
    if forward_only:
        vals = np.where(s >= 0.0, vals, 0.0)
    return vals.sum(axis=1) * step


def render_drr(v: Volume3D, g: ProjectionGeometry, step: float | None = None,
               workers: int = 1) -> Image2D:
    """Line-integral DRR by fixed-step ray marching with trilinear sampling.

    Samples lie on a per-ray lattice anchored at the ray point closest to the
    volume center, spaced ``step`` mm (default half the smallest voxel
    spacing), and cover the support of the zero-padded trilinear interpolant.
    Rays are processed in fixed-size chunks, so the output does not depend
    on ``workers``.
    """
    step = min(v.spacing) / 2.0 if step is None else float(step)
    if not step > 0:
        raise ValidationError("step must be positive")
    origins, dirs = detector_rays(g)
    center = v.center_xyz()
    extent = (np.asarray(v.shape) + 1) * np.asarray(v.spacing)
    half_diag = 0.5 * float(np.linalg.norm(extent))
    k = int(math.ceil(half_diag / step)) + 1
    offsets = np.arange(-k, k + 1) * step
    origin_zyx = np.asarray(v.origin)
    spacing_zyx = np.asarray(v.spacing)
    forward_only = g.beam == "cone"

    chunks = [slice(i, min(i + RAY_CHUNK, len(origins))) for i in range(0, len(origins), RAY_CHUNK)]

    def run(sl):
        return _march_chunk(v.data, origin_zyx, spacing_zyx, origins[sl], dirs[sl],
                            center, offsets, step, forward_only)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    image = np.concatenate(parts).reshape(g.detector_px)
    return Image2D(image, g.detector_spacing, g)


def generate_views(v: Volume3D, angles: Sequence[float] = DEFAULT_ANGLES,
                   g_base: ProjectionGeometry | None = None, **kw) -> list[Image2D]:
    """One DRR per angle; every other geometry field is taken from ``g_base``."""
    angles = list(angles)
    if not angles:
        raise ValidationError("need at least one projection angle")
    g_base = g_base or ProjectionGeometry()
    return [render_drr(v, replace(g_base, angle_deg=float(a)), **kw) for a in angles]
