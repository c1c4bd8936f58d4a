"""Monte Carlo posterior sampling and per-voxel error decomposition."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, sample
from .errors import ArityError, ShapeMismatchError, SparseCTError, ValidationError
from .projector import Image2D
from .volume import Unit, Volume3D, centered_origin

PLANES = ("axial", "coronal", "sagittal")
MAP_NAMES = ("mean", "variance", "bias", "squared_bias", "mse")
IDENTITY_RTOL = 1e-10


@dataclass
class SamplerConfig:
    """Everything needed to draw one reconstruction from a seed.

    ``decoder`` maps a latent array to a Volume3D. Without one, a 3D latent
    (or a single-channel 4D latent) is wrapped directly on a grid of
    ``spacing`` mm.
    """

    denoiser: Denoiser
    schedule: NoiseSchedule
    shape: tuple[int, ...]
    w: float = 1.0
    kind: str = "fast"
    steps: int = 10
    decoder: Callable[[np.ndarray], Volume3D] | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def draw(self, condition, seed: int) -> Volume3D:
        z = sample(self.kind, self.denoiser, condition, self.schedule, self.shape,
                   w=self.w, steps=self.steps, seed=seed)
        if self.decoder is not None:
            return self.decoder(z)
        data = z[0] if z.ndim == 4 and z.shape[0] == 1 else z
        if data.ndim != 3:
            raise ShapeMismatchError(f"cannot wrap latent of shape {z.shape} without a decoder")
        return Volume3D(data, self.spacing, centered_origin(data.shape, self.spacing), Unit.HU)


def mc_seeds(base_seed: int, n: int) -> list[int]:
    return [int(base_seed) ^ k for k in range(n)]


def mc_sample(config: SamplerConfig, condition, n: int, base_seed: int = 0,
              seeds: Sequence[int] | None = None, workers: int = 1) -> list[Volume3D]:
    """Draw ``n`` reconstructions; sample k uses seed ``base_seed ^ k`` unless ``seeds`` is given."""
    if n < 1:
        raise ArityError("need at least one sample")
    seeds = mc_seeds(base_seed, n) if seeds is None else [int(x) for x in seeds]
    if len(seeds) != n:
        raise ArityError(f"got {len(seeds)} seeds for {n} samples")
    if len(set(seeds)) != n:
        raise ValidationError("Monte Carlo seeds must be distinct")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda sd: config.draw(condition, sd), seeds))
    return [config.draw(condition, sd) for sd in seeds]


@dataclass(eq=False)
class UncertaintyMaps:
    mean: np.ndarray
    variance: np.ndarray
    n_samples: int
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    bias: np.ndarray | None = None
    squared_bias: np.ndarray | None = None
    mse: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def has_truth(self) -> bool:
        return self.mse is not None

    def get(self, name: str) -> np.ndarray:
        if name not in MAP_NAMES:
            raise ValidationError(f"unknown map {name!r}; choose from {MAP_NAMES}")
        arr = getattr(self, name)
        if arr is None:
            raise ValidationError(f"map {name!r} needs a ground truth volume")
        return arr

    def volumes(self) -> dict[str, Volume3D]:
        names = MAP_NAMES if self.has_truth else ("mean", "variance")
        return {k: Volume3D(getattr(self, k), self.spacing, self.origin, Unit.HU) for k in names}

    def summary(self) -> dict[str, float]:
        out = {"n_samples": self.n_samples, "mean_variance": float(self.variance.mean())}
        if self.has_truth:
            out["mean_squared_bias"] = float(self.squared_bias.mean())
            out["mean_mse"] = float(self.mse.mean())
        return out


def identity_residual(maps: UncertaintyMaps) -> float:
    """Largest per-voxel |mse - (bias^2 + variance)| / max(1, mse)."""
    res = np.abs(maps.mse - (maps.squared_bias + maps.variance)) / np.maximum(1.0, maps.mse)
    return float(res.max())


def voxel_stats(samples: Sequence[Volume3D], ground_truth: Volume3D | None = None) -> UncertaintyMaps:
    """Per-voxel mean and population variance; bias and MSE when a truth volume is given.

    Samples are sorted per voxel before reduction so the result does not
    depend on the order of ``samples``.
    """
    samples = list(samples)
    if not samples:
        raise ArityError("voxel_stats needs at least one sample")
    ref = samples[0]
    for v in samples[1:]:
        if v.shape != ref.shape:
            raise ShapeMismatchError(f"sample shapes differ: {ref.shape} vs {v.shape}")
    stack = np.sort(np.stack([v.data for v in samples]), axis=0)
    mean = stack.mean(axis=0)
    variance = np.mean((stack - mean) ** 2, axis=0)
    maps = UncertaintyMaps(mean, variance, len(samples), ref.spacing, ref.origin)
    if ground_truth is not None:
        if ground_truth.shape != ref.shape:
            raise ShapeMismatchError(f"ground truth {ground_truth.shape} vs samples {ref.shape}")
        y = ground_truth.data
        maps.bias = mean - y
        maps.squared_bias = maps.bias ** 2
        maps.mse = np.mean((stack - y) ** 2, axis=0)
        resid = identity_residual(maps)
        if resid > IDENTITY_RTOL:
            raise SparseCTError(f"mse != bias^2 + variance (residual {resid:.3e})")
    return maps


def extract_slice(data: np.ndarray, plane: str, index: int | None = None) -> np.ndarray:
    axis = {"axial": 0, "coronal": 1, "sagittal": 2}.get(plane)
    if axis is None:
        raise ValidationError(f"plane must be one of {PLANES}")
    n = data.shape[axis]
    index = n // 2 if index is None else int(index)
    if not 0 <= index < n:
        raise IndexError(f"{plane} index {index} out of range [0, {n})")
    return np.take(data, index, axis=axis)


def render_maps(maps: UncertaintyMaps, plane: str = "axial", index: int | None = None,
                name: str = "variance") -> Image2D:
    """One slice of a chosen map; the center slice when ``index`` is None."""
    return Image2D(extract_slice(maps.get(name), plane, index))
