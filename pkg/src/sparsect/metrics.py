"""Image quality (PSNR, windowed 3D SSIM) and dose-volume statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import EmptyStructureError, ShapeMismatchError, ValidationError
from .volume import Volume3D

# Peak value / dynamic range per dataset convention. Both CT conventions
# span 4095 HU; normalized volumes live in [0, 1].
DATASET_RANGE = {"lidc": 4095.0, "thoracic": 4095.0, "normalized": 1.0}


def dataset_range(name: str) -> float:
    try:
        return DATASET_RANGE[name]
    except KeyError:
        raise ValidationError(f"unknown dataset convention {name!r}; choose from {sorted(DATASET_RANGE)}") from None


def _arrays(a, b):
    x = a.data if isinstance(a, Volume3D) else np.asarray(a, dtype=np.float64)
    y = b.data if isinstance(b, Volume3D) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(a, b) -> float:
    x, y = _arrays(a, b)
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(m: float, i_max: float) -> float:
    if not i_max > 0:
        raise ValidationError("i_max must be positive")
    if m == 0:
        return math.inf
    return 10.0 * math.log10(i_max * i_max / m)


def psnr(a, b, i_max: float) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    return psnr_from_mse(mse(a, b), i_max)


def _window_mean(x: np.ndarray, n: int) -> np.ndarray:
    # Separable sliding sums: one cumulative sum per axis keeps magnitudes small.
    for axis in range(3):
        c = np.cumsum(x, axis=axis)
        pad = [(0, 0)] * 3
        pad[axis] = (1, 0)
        c = np.pad(c, pad)
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[axis] = slice(n, None)
        lo[axis] = slice(None, -n)
        x = c[tuple(hi)] - c[tuple(lo)]
    return x / float(n ** 3)


def ssim3d(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03,
           dynamic_range: float = 1.0) -> float:
    """Mean SSIM over every fully contained uniform ``window``^3 box.

    Local statistics are population moments; c1 = (k1 L)^2 and c2 = (k2 L)^2.
    """
    x, y = _arrays(a, b)
    if window < 1:
        raise ValidationError("window must be positive")
    if min(x.shape) < window:
        raise ValidationError(f"volume {x.shape} is smaller than the {window}^3 window")
    if not dynamic_range > 0:
        raise ValidationError("dynamic_range must be positive")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    # Subtract a common offset before forming second moments to limit cancellation.
    shift = 0.5 * (x.mean() + y.mean())
    xs, ys = x - shift, y - shift
    mx, my = _window_mean(xs, window), _window_mean(ys, window)
    vx = _window_mean(xs * xs, window) - mx * mx
    vy = _window_mean(ys * ys, window) - my * my
    cxy = _window_mean(xs * ys, window) - mx * my
    mx, my = mx + shift, my + shift
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# Dose-volume statistics
# --------------------------------------------------------------------------

def _dose_mask(dose, mask):
    d, m = _arrays(dose, mask)
    m = m != 0
    count = int(m.sum())
    if count == 0:
        raise EmptyStructureError("structure mask is empty")
    return d[m], count


def dvh_v_gray(dose, mask, threshold: float) -> float:
    """Percent of the structure receiving at least ``threshold`` Gy."""
    vals, count = _dose_mask(dose, mask)
    return 100.0 * int(np.count_nonzero(vals >= threshold)) / count


def dvh_v_percent(dose, mask, prescription: float, pct: float) -> float:
    """Percent of the structure receiving at least ``pct`` percent of the prescription."""
    if not prescription > 0:
        raise ValidationError("prescription must be positive")
    return dvh_v_gray(dose, mask, pct * prescription / 100.0)


@dataclass
class DvhReport:
    """Dose-volume values in percent keyed by (structure, metric), e.g. ("breast", "V90%")."""

    values: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, v in self.values.items():
            if not 0.0 <= v <= 100.0:
                raise ValidationError(f"{key} = {v} is not a percentage")

    def add(self, structure: str, metric: str, value: float) -> "DvhReport":
        if not 0.0 <= value <= 100.0:
            raise ValidationError(f"{structure}/{metric} = {value} is not a percentage")
        self.values[(structure, metric)] = float(value)
        return self

    def rows(self) -> list[tuple[str, str, float]]:
        return [(m, s, v) for (s, m), v in sorted(self.values.items())]


def dvh_error(gt: DvhReport, recon: DvhReport) -> DvhReport:
    """Absolute per-entry difference between a reference and a reconstruction report."""
    if set(gt.values) != set(recon.values):
        raise ValidationError("DVH reports cover different structures or metrics")
    return DvhReport({k: abs(gt.values[k] - recon.values[k]) for k in gt.values})


# --------------------------------------------------------------------------
# CSV rows
# --------------------------------------------------------------------------

REPORT_HEADER = ("metric", "structure", "value", "tolerance")


def format_value(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def format_band(band) -> str:
    if band is None:
        return ""
    lo, hi = band
    return f"[{format_value(lo)}, {format_value(hi)}]"


@dataclass(frozen=True)
class MetricRow:
    metric: str
    structure: str
    value: float
    band: tuple[float, float] | None = None

    def cells(self) -> list[str]:
        return [self.metric, self.structure, format_value(self.value), format_band(self.band)]


def rows_with_bands(rows: Iterable[tuple[str, str, float]],
                    bands: Mapping[str, tuple[float, float]] | None = None) -> list[MetricRow]:
    bands = bands or {}
    return [MetricRow(m, s, v, tuple(bands[m]) if m in bands else None) for m, s, v in rows]


def write_report(path, rows: Iterable[MetricRow]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(REPORT_HEADER)
        for r in rows:
            out.writerow(r.cells())
    return path


def read_report(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
