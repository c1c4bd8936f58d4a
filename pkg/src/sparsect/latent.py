"""Vector-quantized latent space: codebook lookup, a fixed toy autoencoder and VQGAN losses.

Latent grids are channels-first: (dim, d', h', w').
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import ShapeMismatchError, ValidationError
from .fusion import FeatureExtractor
from .projector import Image2D
from .volume import Unit, Volume3D, centered_origin

CODEBOOK_SIZE = 4096
CODEBOOK_DIM = 8
COMPRESSION = 2
_QUANT_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class Codebook:
    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise ValidationError("codebook must be a non-empty (count, dim) array")
        if not np.all(np.isfinite(e)):
            raise ValidationError("codebook entries must be finite")
        if len(np.unique(e, axis=0)) != len(e):
            raise ValidationError("codebook entries must be distinct")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def count(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def random_codebook(seed: int = 0, count: int = CODEBOOK_SIZE, dim: int = CODEBOOK_DIM) -> Codebook:
    rng = np.random.Generator(np.random.Philox(seed))
    return Codebook(rng.standard_normal((count, dim)))


def lifted_codebook(lift: np.ndarray, lo: float = -0.25, hi: float = 1.25, count: int = CODEBOOK_SIZE) -> Codebook:
    """Entries evenly spaced along the toy encoder's lift direction."""
    levels = np.linspace(lo, hi, count)
    return Codebook(levels[:, None] * np.asarray(lift, dtype=np.float64)[None, :])


def nearest_indices(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Argmin of squared Euclidean distance per row; ties resolve to the lowest index.

    Candidates come from the expanded form |z|^2 - 2 z.e + |e|^2; any entry within
    a rounding margin of the minimum is re-scored with direct differences so the
    result matches an exhaustive scan.
    """
    e_sq = np.einsum("ij,ij->i", entries, entries)
    out = np.empty(len(vectors), dtype=np.int64)
    for start in range(0, len(vectors), _QUANT_CHUNK):
        z = vectors[start:start + _QUANT_CHUNK]
        z_sq = np.einsum("ij,ij->i", z, z)
        dist = z_sq[:, None] - 2.0 * (z @ entries.T) + e_sq[None, :]
        best = dist.min(axis=1)
        tol = 1e-9 * (z_sq + e_sq.max()) + 1e-300
        close = dist <= (best + tol)[:, None]
        idx = close.argmax(axis=1)
        ambiguous = np.flatnonzero(close.sum(axis=1) > 1)
        for row in ambiguous:
            cand = np.flatnonzero(close[row])
            direct = ((entries[cand] - z[row]) ** 2).sum(axis=1)
            idx[row] = cand[np.argmin(direct)]
        out[start:start + len(z)] = idx
    return out


def quantize(z: np.ndarray, codebook: Codebook, axis: int = 0):
    """Snap each vector along ``axis`` to its nearest codebook entry.

    Returns ``(indices, z_q, quant_error)``: indices over the remaining axes,
    z_q shaped like z, and the mean squared distance per vector.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[axis] != codebook.dim:
        raise ShapeMismatchError(f"vector dim {z.shape[axis]} != codebook dim {codebook.dim}")
    moved = np.moveaxis(z, axis, -1)
    flat = moved.reshape(-1, codebook.dim)
    idx = nearest_indices(flat, codebook.entries)
    zq_flat = codebook.entries[idx]
    err = float(np.mean(((flat - zq_flat) ** 2).sum(axis=1)))
    z_q = np.moveaxis(zq_flat.reshape(moved.shape), -1, axis)
    return idx.reshape(moved.shape[:-1]), z_q, err


# --------------------------------------------------------------------------
# Autoencoder
# --------------------------------------------------------------------------

class AutoencoderPair(Protocol):
    def encode(self, v: Volume3D) -> np.ndarray: ...

    def decode(self, z: np.ndarray, spacing=None, origin=None, unit: Unit = Unit.NORMALIZED) -> Volume3D: ...


def default_lift(dim: int = CODEBOOK_DIM) -> np.ndarray:
    w = np.linspace(1.0, 2.0, dim)
    return w / np.linalg.norm(w)


def avg_pool2(data: np.ndarray) -> np.ndarray:
    d, h, w = data.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeMismatchError(f"volume shape {data.shape} must be even along every axis")
    return data.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def _upsample2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    # Linear interpolation at fine centers (k + 0.5) / 2 - 0.5, clamped at the edges.
    x = np.moveaxis(x, axis, 0)
    prev = np.concatenate([x[:1], x[:-1]])
    nxt = np.concatenate([x[1:], x[-1:]])
    out = np.empty((2 * x.shape[0],) + x.shape[1:])
    out[0::2] = 0.75 * x + 0.25 * prev
    out[1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def upsample2(data: np.ndarray) -> np.ndarray:
    for axis in range(3):
        data = _upsample2_axis(data, axis)
    return data


class ToyAutoencoder:
    """Fixed encoder/decoder with a 2x compression factor per axis.

    encode: 2x average pool, then lift each scalar onto ``lift`` (unit vector).
    decode: project onto ``lift``, then 2x trilinear upsample.
    """

    factor = COMPRESSION

    def __init__(self, lift: np.ndarray | None = None):
        self.lift = default_lift() if lift is None else np.asarray(lift, dtype=np.float64)
        if not np.isclose(np.linalg.norm(self.lift), 1.0):
            raise ValidationError("lift must be a unit vector")

    @property
    def dim(self) -> int:
        return self.lift.size

    def latent_shape(self, volume_shape) -> tuple[int, ...]:
        return (self.dim,) + tuple(n // 2 for n in volume_shape)

    def encode(self, v: Volume3D) -> np.ndarray:
        pooled = avg_pool2(v.data)
        return self.lift[:, None, None, None] * pooled[None]

    def decode(self, z: np.ndarray, spacing=None, origin=None, unit: Unit = Unit.NORMALIZED) -> Volume3D:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4 or z.shape[0] != self.dim:
            raise ShapeMismatchError(f"latent must be ({self.dim}, d', h', w'), got {z.shape}")
        coarse = np.tensordot(self.lift, z, axes=(0, 0))
        data = upsample2(coarse)
        if unit is Unit.NORMALIZED:
            data = np.clip(data, 0.0, 1.0)
        spacing = (1.0, 1.0, 1.0) if spacing is None else tuple(spacing)
        origin = centered_origin(data.shape, spacing) if origin is None else tuple(origin)
        return Volume3D(data, spacing, origin, unit)


def encode(v: Volume3D, pair: AutoencoderPair) -> np.ndarray:
    return pair.encode(v)


def decode(z: np.ndarray, pair: AutoencoderPair, **kw) -> Volume3D:
    return pair.decode(z, **kw)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def _check(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def vqvae_loss(x, x_hat, z_e, z_q, commit_weight: float = 0.25) -> float:
    """Reconstruction MSE + codebook term + commit_weight * commitment term.

    Under autodiff the codebook term stops gradients through z_e and the
    commitment term through z_q; evaluated numerically both equal mean((z_e - z_q)^2).
    """
    _check(x, x_hat, "vqvae_loss reconstruction")
    _check(z_e, z_q, "vqvae_loss latent")
    recon = np.mean((np.asarray(x) - np.asarray(x_hat)) ** 2)
    codebook_term = np.mean((np.asarray(z_e) - np.asarray(z_q)) ** 2)
    commitment_term = codebook_term
    return float(recon + codebook_term + commit_weight * commitment_term)


def hinge(x):
    return np.maximum(0.0, x)


def hinge_disc_loss(d_real, d_fake) -> float:
    return float(np.mean(hinge(1.0 - np.asarray(d_real, dtype=np.float64)))
                 + np.mean(hinge(1.0 + np.asarray(d_fake, dtype=np.float64))))


def slice_disc_loss(Y, Y_hat, s: int, d2: Callable[[np.ndarray], np.ndarray]) -> float:
    """Hinge loss of a 2D discriminator on axial slice ``s`` of both volumes."""
    y = Y.data if isinstance(Y, Volume3D) else np.asarray(Y)
    y_hat = Y_hat.data if isinstance(Y_hat, Volume3D) else np.asarray(Y_hat)
    _check(y, y_hat, "slice_disc_loss")
    if not 0 <= s < y.shape[0]:
        raise IndexError(f"axial index {s} out of range [0, {y.shape[0]})")
    return hinge_disc_loss(d2(y[s]), d2(y_hat[s]))


def perceptual_loss(a, b, feat: FeatureExtractor) -> float:
    """Mean squared feature distance per slice, averaged over slices of (S, h, w) stacks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b, "perceptual_loss")
    per_slice = [np.mean((feat(Image2D(x)).data - feat(Image2D(y)).data) ** 2) for x, y in zip(a, b)]
    return float(np.mean(per_slice))


def weighted_objectives(loss_d3: float, loss_d2: float, loss_vqvae: float, loss_p: float,
                        lam1: float = 1.0, lam2: float = 1.0, lam3: float = 1.0) -> tuple[float, float]:
    """Discriminator and generator objectives (L_D, L_G)."""
    if min(lam1, lam2, lam3) < 0:
        raise ValidationError("loss weights must be nonnegative")
    return lam1 * (loss_d3 + loss_d2), lam2 * loss_vqvae + lam3 * loss_p
