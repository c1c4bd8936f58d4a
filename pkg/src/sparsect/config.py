"""YAML pipeline configuration, validated when loaded.

Every block is optional; missing keys take the defaults below. Unknown keys
are rejected so typos fail loudly.

    geometry:  beam, dso, dsd, detector [rows, cols], detector_spacing, angles, step
    volume:    n, voxel_mm
    phantom:   kind, smooth_sigma
    fusion:    extractor
    schedule:  T, beta_start, beta_end, sampler, steps, w, dropout_p
    denoiser:  offset, gain ("auto" or number), var
    latent:    codebook (path or null), compression
    run:       seed, seeds, n_samples, output_dir, dataset, workers, trajectory, tolerances
    dvh:       structure, prescription_gy, pct, threshold_gy
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .diffusion import SAMPLERS
from .errors import ValidationError
from .fusion import EXTRACTORS
from .metrics import DATASET_RANGE
from .projector import DEFAULT_ANGLES, ProjectionGeometry
from .volume import PHANTOM_KINDS


@dataclass
class GeometryConfig:
    beam: str = "parallel"
    dso: float = 1000.0
    dsd: float = 1500.0
    detector: list[int] = field(default_factory=lambda: [128, 128])
    detector_spacing: float = 1.0
    angles: list[float] = field(default_factory=lambda: list(DEFAULT_ANGLES))
    step: float | None = None

    def validate(self):
        if len(self.detector) != 2:
            raise ValidationError("geometry.detector must be [rows, cols]")
        if not self.angles:
            raise ValidationError("geometry.angles must list at least one angle")
        if self.step is not None and not self.step > 0:
            raise ValidationError("geometry.step must be positive")
        for a in self.angles:
            self.projection(a)

    def projection(self, angle: float) -> ProjectionGeometry:
        return ProjectionGeometry(beam=self.beam, angle_deg=float(angle), dso=float(self.dso),
                                  dsd=float(self.dsd), detector_px=tuple(self.detector),
                                  detector_spacing=float(self.detector_spacing))


@dataclass
class VolumeConfig:
    n: int = 128
    voxel_mm: float = 1.0

    def validate(self):
        if self.n < 2 or self.n % 2:
            raise ValidationError("volume.n must be an even size >= 2")
        if not self.voxel_mm > 0:
            raise ValidationError("volume.voxel_mm must be positive")


@dataclass
class PhantomConfig:
    kind: str = "shepp3d"
    smooth_sigma: float = 2.0

    def validate(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValidationError(f"phantom.kind must be one of {PHANTOM_KINDS}")
        if self.smooth_sigma < 0:
            raise ValidationError("phantom.smooth_sigma must be >= 0")


@dataclass
class FusionConfig:
    extractor: str = "identity"

    def validate(self):
        if self.extractor not in EXTRACTORS:
            raise ValidationError(f"fusion.extractor must be one of {sorted(EXTRACTORS)}")


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler: str = "fast"
    steps: int = 10
    w: float = 1.0
    dropout_p: float = 0.1

    def validate(self):
        if self.T < 1:
            raise ValidationError("schedule.T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValidationError("schedule needs 0 < beta_start <= beta_end < 1")
        if self.sampler not in SAMPLERS:
            raise ValidationError(f"schedule.sampler must be one of {SAMPLERS}")
        if not 1 <= self.steps <= self.T:
            raise ValidationError("schedule.steps must lie in [1, T]")
        if not 0 <= self.dropout_p <= 1:
            raise ValidationError("schedule.dropout_p must lie in [0, 1]")


@dataclass
class DenoiserConfig:
    offset: float = 0.0
    gain: Any = "auto"
    var: float = 0.01

    def validate(self):
        if self.gain != "auto" and not isinstance(self.gain, (int, float)):
            raise ValidationError("denoiser.gain must be a number or 'auto'")
        if not self.var > 0:
            raise ValidationError("denoiser.var must be positive")


@dataclass
class LatentConfig:
    codebook: str | None = None
    compression: int = 2

    def validate(self):
        if self.compression != 2:
            raise ValidationError("latent.compression: only the 2x toy autoencoder is available")
        if self.codebook is not None and not Path(self.codebook).is_file():
            raise ValidationError(f"latent.codebook file not found: {self.codebook}")


@dataclass
class RunConfig:
    seed: int = 0
    seeds: list[int] | None = None
    n_samples: int = 100
    output_dir: str = "out"
    dataset: str = "normalized"
    workers: int = 1
    trajectory: bool = False
    tolerances: dict[str, list[float]] = field(default_factory=dict)

    def validate(self):
        if self.seed < 0:
            raise ValidationError("run.seed must be >= 0")
        if self.seeds is not None:
            if len(set(self.seeds)) != len(self.seeds):
                raise ValidationError("run.seeds must be distinct")
            if any(s < 0 for s in self.seeds):
                raise ValidationError("run.seeds must be >= 0")
        if self.n_samples < 1:
            raise ValidationError("run.n_samples must be >= 1")
        if self.dataset not in DATASET_RANGE:
            raise ValidationError(f"run.dataset must be one of {sorted(DATASET_RANGE)}")
        if self.workers < 1:
            raise ValidationError("run.workers must be >= 1")
        for k, band in self.tolerances.items():
            if len(band) != 2 or band[0] > band[1]:
                raise ValidationError(f"run.tolerances.{k} must be [lo, hi] with lo <= hi")


@dataclass
class DvhConfig:
    structure: str = "target"
    prescription_gy: float = 50.0
    pct: float = 90.0
    threshold_gy: float = 20.0

    def validate(self):
        if not self.prescription_gy > 0:
            raise ValidationError("dvh.prescription_gy must be positive")
        if not self.pct > 0:
            raise ValidationError("dvh.pct must be positive")
        if self.threshold_gy < 0:
            raise ValidationError("dvh.threshold_gy must be >= 0")


@dataclass
class PipelineConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    run: RunConfig = field(default_factory=RunConfig)
    dvh: DvhConfig = field(default_factory=DvhConfig)

    def validate(self) -> "PipelineConfig":
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict | None, base_dir: Path | None = None) -> "PipelineConfig":
        raw = copy.deepcopy(raw or {})
        if not isinstance(raw, dict):
            raise ValidationError("config root must be a mapping")
        blocks = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(blocks)
        if unknown:
            raise ValidationError(f"unknown config blocks: {sorted(unknown)}")
        kwargs = {}
        for name, f in blocks.items():
            block_cls = f.default_factory().__class__
            values = raw.get(name) or {}
            if not isinstance(values, dict):
                raise ValidationError(f"config block {name!r} must be a mapping")
            known = {bf.name for bf in dataclasses.fields(block_cls)}
            bad = set(values) - known
            if bad:
                raise ValidationError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = block_cls(**_coerce(block_cls, values))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"bad value in {name!r}: {exc}") from None
        cfg = cls(**kwargs)
        if base_dir is not None and cfg.latent.codebook:
            p = Path(cfg.latent.codebook)
            cfg.latent.codebook = str(p if p.is_absolute() else base_dir / p)
        return cfg.validate()


_NUMERIC = {"float": float, "int": int}


def _coerce(block_cls, values: dict) -> dict:
    """Cast scalar YAML values to the declared float/int field types."""
    types = {f.name: f.type for f in dataclasses.fields(block_cls)}
    out = {}
    for k, v in values.items():
        cast = _NUMERIC.get(types[k])
        if cast is not None:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ValueError(f"{k} must be numeric, got {v!r}")
            if cast is int and float(v) != int(v):
                raise ValueError(f"{k} must be an integer, got {v!r}")
            v = cast(v)
        out[k] = v
    return out


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``block.key=value`` strings; values are parsed as YAML scalars or lists."""
    raw = copy.deepcopy(raw or {})
    for item in overrides:
        key, sep, value = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) != 2 or not all(parts):
            raise ValidationError(f"override must look like block.key=value, got {item!r}")
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse override {item!r}: {exc}") from None
        block = raw.setdefault(parts[0], {})
        if not isinstance(block, dict):
            raise ValidationError(f"config block {parts[0]!r} must be a mapping")
        block[parts[1]] = parsed
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    raw, base = {}, None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"invalid YAML in {path}: {exc}") from None
        base = path.parent
    return PipelineConfig.from_dict(apply_overrides(raw, overrides or []), base_dir=base)
