"""Figure rendering for reports. Always uses the non-interactive Agg backend."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .uncertainty import PLANES, extract_slice  # noqa: E402

PANEL_IN = 2.4
STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "image.interpolation": "nearest",
    "image.origin": "upper",
    "svg.hashsalt": "sparsect",
}


@contextmanager
def report_style(**overrides):
    with plt.rc_context({**STYLE, **overrides}):
        yield


def _grid(n: int, max_cols: int = 4):
    cols = min(n, max_cols)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(PANEL_IN * cols, PANEL_IN * rows), squeeze=False)
    for ax in axes.ravel()[n:]:
        ax.axis("off")
    return fig, axes.ravel()[:n]


def _show(ax, img, title, cmap="gray", vmin=None, vmax=None, colorbar=False):
    im = ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    if colorbar:
        ax.figure.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return im


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def volume_slices(data: np.ndarray, path, title: str = "", cmap: str = "gray",
                  colorbar: bool = False) -> Path:
    """Center axial, coronal and sagittal slices side by side."""
    with report_style():
        fig, axes = _grid(3)
        vmin, vmax = float(np.min(data)), float(np.max(data))
        for ax, plane in zip(axes, PLANES):
            _show(ax, extract_slice(data, plane), f"{title} {plane}".strip(), cmap, vmin, vmax, colorbar)
        return _save(fig, path)


def drr_montage(images: Sequence[np.ndarray], angles: Sequence[float], path) -> Path:
    with report_style():
        fig, axes = _grid(len(images))
        for ax, img, a in zip(axes, images, angles):
            _show(ax, img, f"{a:g} deg")
        return _save(fig, path)


def comparison(recon: np.ndarray, truth: np.ndarray, path, plane: str = "axial") -> Path:
    """Reconstruction, reference and absolute difference on one plane."""
    with report_style():
        fig, axes = _grid(3)
        r, t = extract_slice(recon, plane), extract_slice(truth, plane)
        lo, hi = float(min(r.min(), t.min())), float(max(r.max(), t.max()))
        _show(axes[0], r, "reconstruction", vmin=lo, vmax=hi)
        _show(axes[1], t, "reference", vmin=lo, vmax=hi)
        _show(axes[2], np.abs(r - t), "|difference|", cmap="magma", colorbar=True)
        return _save(fig, path)


def uncertainty_panel(maps: dict[str, np.ndarray], path, plane: str = "axial") -> Path:
    with report_style():
        fig, axes = _grid(len(maps), max_cols=len(maps))
        for ax, (name, arr) in zip(axes, maps.items()):
            cmap = "gray" if name == "mean" else "magma"
            _show(ax, extract_slice(arr, plane), name, cmap=cmap, colorbar=name != "mean")
        return _save(fig, path)
