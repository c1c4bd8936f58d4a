"""Binary file formats: VOL1 volumes, VOLC multi-channel volumes, CBK1 codebooks,
16-bit PGM images with JSON geometry sidecars.

All multi-byte fields are little-endian except PGM samples, which are
big-endian as the PGM format requires.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .volume import Unit, Volume3D

VOL1_MAGIC = b"VOL1"
VOLC_MAGIC = b"VOLC"
CBK1_MAGIC = b"CBK1"
_VOL1_HEADER = struct.Struct("<4s3I3f3fB")


def vol1_bytes(v: Volume3D) -> bytes:
    d, h, w = v.shape
    header = _VOL1_HEADER.pack(VOL1_MAGIC, d, h, w, *v.spacing, *v.origin, int(v.unit))
    return header + np.ascontiguousarray(v.data, dtype="<f4").tobytes()


def _read_vol1(buf: io.BufferedIOBase | io.BytesIO) -> Volume3D:
    raw = buf.read(_VOL1_HEADER.size)
    if len(raw) != _VOL1_HEADER.size:
        raise FormatError("truncated VOL1 header")
    magic, d, h, w, *rest = _VOL1_HEADER.unpack(raw)
    if magic != VOL1_MAGIC:
        raise FormatError(f"bad VOL1 magic {magic!r}")
    spacing, origin, unit = tuple(rest[0:3]), tuple(rest[3:6]), rest[6]
    if unit not in (0, 1):
        raise FormatError(f"bad unit tag {unit}")
    count = d * h * w
    payload = buf.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated VOL1 payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    return Volume3D(data, spacing, origin, Unit(unit))


def write_vol1(path, v: Volume3D) -> Path:
    path = Path(path)
    path.write_bytes(vol1_bytes(v))
    return path


def read_vol1(path) -> Volume3D:
    with open(path, "rb") as fh:
        vol = _read_vol1(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after VOL1 payload")
    return vol


def write_volc(path, channels: list[Volume3D]) -> Path:
    """Multi-channel volume: "VOLC", u32 channel count, then one VOL1 record per channel."""
    path = Path(path)
    parts = [VOLC_MAGIC, struct.pack("<I", len(channels))]
    parts.extend(vol1_bytes(c) for c in channels)
    path.write_bytes(b"".join(parts))
    return path


def read_volc(path) -> list[Volume3D]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8 or head[:4] != VOLC_MAGIC:
            raise FormatError("bad VOLC header")
        (count,) = struct.unpack("<I", head[4:])
        return [_read_vol1(fh) for _ in range(count)]


def write_codebook(path, entries: np.ndarray) -> Path:
    entries = np.asarray(entries)
    if entries.ndim != 2:
        raise FormatError("codebook entries must be a 2D (count, dim) array")
    count, dim = entries.shape
    path = Path(path)
    path.write_bytes(CBK1_MAGIC + struct.pack("<2I", count, dim)
                     + np.ascontiguousarray(entries, dtype="<f4").tobytes())
    return path


def read_codebook(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CBK1_MAGIC or len(raw) < 12:
        raise FormatError("bad CBK1 header")
    count, dim = struct.unpack("<2I", raw[4:12])
    if len(raw) != 12 + 4 * count * dim:
        raise FormatError("CBK1 payload size mismatch")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(count, dim).astype(np.float64)


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------

PGM_MAXVAL = 65535


def pgm_encode(data: np.ndarray) -> tuple[bytes, float]:
    """Encode a 2D image as binary 16-bit PGM; returns (bytes, value mapped to maxval).

    Values are mapped linearly from [0, image max] onto [0, 65535]; negative
    values clip to 0.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise FormatError("PGM images must be 2D")
    rows, cols = data.shape
    vmax = float(data.max()) if data.size else 0.0
    if vmax > 0:
        samples = np.rint(np.clip(data, 0.0, vmax) / vmax * PGM_MAXVAL).astype(">u2")
    else:
        vmax = 0.0
        samples = np.zeros(data.shape, dtype=">u2")
    header = f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + samples.tobytes(), vmax


def pgm_decode(raw: bytes) -> np.ndarray:
    """Return raw integer samples of a P5 PGM as a (rows, cols) array."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM (P5)")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    size = rows * cols * np.dtype(dtype).itemsize
    if len(raw) - pos != size:
        raise FormatError("PGM payload size mismatch")
    return np.frombuffer(raw[pos:], dtype=dtype).reshape(rows, cols)


def write_image(path, data: np.ndarray, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``data`` as PGM plus a ``.json`` sidecar with the value mapping and ``meta``."""
    path = Path(path)
    raw, vmax = pgm_encode(data)
    path.write_bytes(raw)
    sidecar = path.with_suffix(".json")
    record = {"format": "pgm16", "maxval": PGM_MAXVAL, "value_min": 0.0, "value_max": vmax}
    record.update(meta or {})
    sidecar.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def read_image(path) -> tuple[np.ndarray, dict]:
    """Read a PGM + sidecar pair back to physical values."""
    path = Path(path)
    samples = pgm_decode(path.read_bytes())
    meta = json.loads(path.with_suffix(".json").read_text())
    scale = meta["value_max"] / meta["maxval"]
    return samples.astype(np.float64) * scale, meta
