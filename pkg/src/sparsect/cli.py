"""Command-line entry point: ``sparsect <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
Relative output directories resolve against ``$SPARSECT_OUTPUT`` (default: cwd).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io as sio
from .config import PipelineConfig, load_config
from .diffusion import ConditionalGaussianDenoiser, linear_schedule, sample
from .errors import FormatError, SparseCTError, ValidationError
from .fusion import FeatureVolume, GridSpec, build_condition, latent_grid, make_extractor
from .latent import Codebook, ToyAutoencoder, quantize
from .metrics import (DvhReport, MetricRow, dataset_range, dvh_error, dvh_v_gray, dvh_v_percent,
                      psnr, rows_with_bands, ssim3d, write_report)
from .projector import Image2D, ProjectionGeometry, render_drr
from .uncertainty import MAP_NAMES, SamplerConfig, mc_sample, mc_seeds, render_maps, voxel_stats
from .volume import Unit, Volume3D, centered_origin, phantom_volume

OUTPUT_ENV = "SPARSECT_OUTPUT"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("sparsect")


# --------------------------------------------------------------------------
# Pipeline pieces shared by several commands
# --------------------------------------------------------------------------

def output_dir(cfg: PipelineConfig, override: str | None = None) -> Path:
    p = Path(override or cfg.run.output_dir)
    if not p.is_absolute():
        p = Path(os.environ.get(OUTPUT_ENV, ".")) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def volume_grid(cfg: PipelineConfig) -> GridSpec:
    sp = (cfg.volume.voxel_mm,) * 3
    shape = (cfg.volume.n,) * 3
    return GridSpec(shape, sp, centered_origin(shape, sp))


def load_xrays(paths: Sequence[str | Path]) -> list[Image2D]:
    if not paths:
        raise ValidationError("no x-ray files given")
    out = []
    for p in paths:
        p = Path(p)
        if not p.is_file() or not p.with_suffix(".json").is_file():
            raise ValidationError(f"x-ray {p} or its .json sidecar is missing")
        data, meta = sio.read_image(p)
        if "geometry" not in meta:
            raise ValidationError(f"sidecar of {p} carries no geometry")
        g = ProjectionGeometry.from_dict(meta["geometry"])
        if data.shape != g.detector_px:
            raise ValidationError(f"{p}: image {data.shape} does not match detector {g.detector_px}")
        out.append(Image2D(data, float(meta.get("pixel_spacing", g.detector_spacing)), g))
    return out


def condition_volume(cfg: PipelineConfig, xrays: Sequence[Image2D], workers: int = 1) -> FeatureVolume:
    grid = latent_grid(volume_grid(cfg), cfg.latent.compression)
    return build_condition(xrays, make_extractor(cfg.fusion.extractor), grid, workers=workers)


def denoiser_gain(cfg: PipelineConfig) -> float:
    # "auto" divides line integrals by the volume extent, giving a mean density.
    if cfg.denoiser.gain == "auto":
        return 1.0 / (cfg.volume.n * cfg.volume.voxel_mm)
    return float(cfg.denoiser.gain)


def load_codebook(cfg: PipelineConfig) -> Codebook | None:
    return Codebook(sio.read_codebook(cfg.latent.codebook)) if cfg.latent.codebook else None


def sampler_config(cfg: PipelineConfig, ae: ToyAutoencoder, codebook: Codebook | None = None) -> SamplerConfig:
    s = cfg.schedule
    schedule = linear_schedule(s.T, s.beta_start, s.beta_end)
    denoiser = ConditionalGaussianDenoiser(schedule, cfg.denoiser.offset, denoiser_gain(cfg),
                                           cfg.denoiser.var, lift=ae.lift)
    grid = volume_grid(cfg)

    def decode(z):
        if codebook is not None:
            z = quantize(z, codebook)[1]
        return ae.decode(z, grid.spacing, grid.origin, Unit.NORMALIZED)

    return SamplerConfig(denoiser, schedule, ae.latent_shape(grid.shape), w=s.w, kind=s.sampler,
                         steps=s.steps, decoder=decode, spacing=grid.spacing)


def reconstruct(cfg: PipelineConfig, xrays: Sequence[Image2D], seed: int | None = None,
                workers: int | None = None, trajectory: list | None = None) -> Volume3D:
    """Fuse views, sample a latent, decode. Appends decoded intermediates to ``trajectory``."""
    seed = cfg.run.seed if seed is None else seed
    workers = cfg.run.workers if workers is None else workers
    ae = ToyAutoencoder()
    sc = sampler_config(cfg, ae, load_codebook(cfg))
    cond = condition_volume(cfg, xrays, workers).data
    callback = None
    if trajectory is not None:
        grid = volume_grid(cfg)

        def callback(t, x):
            trajectory.append(ae.decode(x, grid.spacing, grid.origin, Unit.HU))

    z = sample(sc.kind, sc.denoiser, cond, sc.schedule, sc.shape, w=sc.w, steps=sc.steps,
               seed=seed, callback=callback)
    return sc.decoder(z)


def evaluation_rows(cfg: PipelineConfig, recon: Volume3D, truth: Volume3D,
                    dose: Volume3D | None = None, mask: Volume3D | None = None,
                    gt_dose: Volume3D | None = None) -> list[MetricRow]:
    L = dataset_range(cfg.run.dataset)
    rows = [("psnr", "-", psnr(recon, truth, L)), ("ssim", "-", ssim3d(recon, truth, dynamic_range=L))]
    if dose is not None and mask is not None:
        d = cfg.dvh
        vp, vg = f"V{d.pct:g}%", f"V{d.threshold_gy:g}Gy"

        def report(dv):
            return (DvhReport()
                    .add(d.structure, vp, dvh_v_percent(dv, mask, d.prescription_gy, d.pct))
                    .add(d.structure, vg, dvh_v_gray(dv, mask, d.threshold_gy)))

        rec = report(dose)
        rows += rec.rows()
        if gt_dose is not None:
            rows += [(f"{m} error", s, v) for m, s, v in dvh_error(report(gt_dose), rec).rows()]
    return rows_with_bands(rows, cfg.run.tolerances)


def _read_volume(path) -> Volume3D:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"volume file not found: {p}")
    return sio.read_vol1(p)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_phantom(cfg: PipelineConfig, args) -> list[Path]:
    kind = args.kind or cfg.phantom.kind
    n = args.n or cfg.volume.n
    sigma = cfg.phantom.smooth_sigma if args.smooth_sigma is None else args.smooth_sigma
    vol = phantom_volume(kind, n, cfg.volume.voxel_mm, smooth_sigma=sigma)
    path = output_dir(cfg, args.out) / (args.name or f"phantom_{kind}_{n}.vol1")
    return [sio.write_vol1(path, vol)]


def cmd_drr(cfg: PipelineConfig, args) -> list[Path]:
    vol = _read_volume(args.volume)
    out = output_dir(cfg, args.out)
    written = []
    for k, angle in enumerate(cfg.geometry.angles):
        g = cfg.geometry.projection(angle)
        img = render_drr(vol, g, step=cfg.geometry.step, workers=cfg.run.workers)
        meta = {"geometry": g.to_dict(), "pixel_spacing": g.detector_spacing, "angle_deg": float(angle),
                "source": Path(args.volume).name}
        written.append(sio.write_image(out / f"{args.prefix}_{k:02d}.pgm", img.data, meta)[0])
    return written


def cmd_fuse(cfg: PipelineConfig, args) -> list[Path]:
    cond = condition_volume(cfg, load_xrays(args.xrays), cfg.run.workers)
    path = output_dir(cfg, args.out) / (args.name or "condition.volc")
    return [sio.write_volc(path, cond.channel_volumes())]


def cmd_reconstruct(cfg: PipelineConfig, args) -> list[Path]:
    traj = [] if cfg.run.trajectory else None
    vol = reconstruct(cfg, load_xrays(args.xrays), trajectory=traj)
    if not np.all(np.isfinite(vol.data)):
        raise SparseCTError("reconstruction contains non-finite values")
    out = output_dir(cfg, args.out)
    written = [sio.write_vol1(out / (args.name or "recon.vol1"), vol)]
    if traj is not None:
        written.append(sio.write_volc(out / "trajectory.volc", traj))
    return written


def cmd_uncertainty(cfg: PipelineConfig, args) -> list[Path]:
    n = cfg.run.n_samples
    if n < 2:
        raise ValidationError("uncertainty needs at least 2 samples")
    seeds = cfg.run.seeds
    if seeds is None:
        seeds = mc_seeds(cfg.run.seed, n)
    elif len(seeds) != n:
        raise ValidationError(f"run.seeds lists {len(seeds)} seeds but n_samples is {n}")
    truth = _read_volume(args.truth) if args.truth else None
    ae = ToyAutoencoder()
    sc = sampler_config(cfg, ae, load_codebook(cfg))
    cond = condition_volume(cfg, load_xrays(args.xrays), cfg.run.workers).data
    samples = mc_sample(sc, cond, n, seeds=seeds, workers=cfg.run.workers)
    maps = voxel_stats(samples, truth)   # raises if mse != bias^2 + variance
    out = output_dir(cfg, args.out)
    written = []
    for name, vol in maps.volumes().items():
        written.append(sio.write_vol1(out / f"{name}.vol1", vol))
        if name == "bias":
            continue    # signed; PGM holds nonnegative values only
        img = render_maps(maps, "axial", None, name)
        written.append(sio.write_image(out / f"{name}_axial.pgm", img.data,
                                       {"map": name, "plane": "axial"})[0])
    rows = [MetricRow(k, "-", float(v)) for k, v in maps.summary().items()]
    written.append(write_report(out / "uncertainty.csv", rows))
    return written


def cmd_evaluate(cfg: PipelineConfig, args) -> list[Path]:
    recon, truth = _read_volume(args.recon), _read_volume(args.truth)
    if bool(args.dose) != bool(args.mask):
        raise ValidationError("--dose and --mask must be given together")
    dose = _read_volume(args.dose) if args.dose else None
    mask = _read_volume(args.mask) if args.mask else None
    gt_dose = _read_volume(args.gt_dose) if args.gt_dose else None
    rows = evaluation_rows(cfg, recon, truth, dose, mask, gt_dose)
    for r in rows:
        print(",".join(r.cells()))
    return [write_report(output_dir(cfg, args.out) / (args.name or "evaluation.csv"), rows)]


def cmd_report(cfg: PipelineConfig, args) -> list[Path]:
    from . import plotting

    out = output_dir(cfg, args.out)
    recon = _read_volume(args.recon)
    written = [plotting.volume_slices(recon.data, out / "recon_slices.png", "recon")]
    rows = [("voxel_mean", "-", float(recon.data.mean())), ("voxel_min", "-", float(recon.data.min())),
            ("voxel_max", "-", float(recon.data.max()))]
    if args.truth:
        truth = _read_volume(args.truth)
        written.append(plotting.comparison(recon.data, truth.data, out / "comparison.png"))
        rows += [(r.metric, r.structure, r.value) for r in evaluation_rows(cfg, recon, truth)]
    if args.drr:
        images = load_xrays(args.drr)
        written.append(plotting.drr_montage([im.data for im in images],
                                            [im.geometry.angle_deg for im in images],
                                            out / "drr_montage.png"))
    if args.maps:
        maps_dir = Path(args.maps)
        found = {k: sio.read_vol1(maps_dir / f"{k}.vol1").data
                 for k in MAP_NAMES if k != "bias" and (maps_dir / f"{k}.vol1").is_file()}
        if not found:
            raise ValidationError(f"no uncertainty maps in {maps_dir}")
        written.append(plotting.uncertainty_panel(found, out / "uncertainty.png"))
        rows += [(f"volume_mean_{k}", "-", float(v.mean())) for k, v in found.items()]
    written.append(write_report(out / "report.csv", rows_with_bands(rows, cfg.run.tolerances)))
    return written


COMMANDS = {
    "phantom": cmd_phantom, "drr": cmd_drr, "fuse": cmd_fuse, "reconstruct": cmd_reconstruct,
    "uncertainty": cmd_uncertainty, "evaluate": cmd_evaluate, "report": cmd_report,
}


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML pipeline config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-o", "--out", help="output directory (default: run.output_dir)")
    common.add_argument("--name", help="output file name")
    common.add_argument("--seed", type=int, help="run.seed")
    common.add_argument("--workers", type=int, help="run.workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparsect", description="Sparse-view CT toolkit: phantoms, DRRs, fusion, sampling, uncertainty and metrics.",
                                epilog="Exit codes: 0 success, 2 invalid input, 3 runtime failure. Relative output dirs resolve against $SPARSECT_OUTPUT.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write a phantom volume (VOL1)")
    s.add_argument("--kind", help="shepp3d | lung | empty")
    s.add_argument("--n", type=int, help="cube size in voxels")
    s.add_argument("--smooth-sigma", type=float, help="Gaussian blur in voxels")

    s = sub.add_parser("drr", parents=[common], help="render DRRs of a volume (PGM + JSON)")
    s.add_argument("volume")
    s.add_argument("--angles", type=float, nargs="+", help="geometry.angles")
    s.add_argument("--beam", choices=("parallel", "cone"), help="geometry.beam")
    s.add_argument("--prefix", default="drr")

    s = sub.add_parser("fuse", parents=[common], help="fused feature volume from x-rays (VOLC)")
    s.add_argument("xrays", nargs="+")

    for name, helptext in (("reconstruct", "sample one reconstruction (VOL1)"),
                           ("uncertainty", "Monte Carlo maps and summary")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("xrays", nargs="+")
        s.add_argument("--sampler", choices=("fast", "ancestral"), help="schedule.sampler")
        s.add_argument("--steps", type=int, help="schedule.steps")
        s.add_argument("--w", type=float, help="schedule.w (guidance)")
        if name == "reconstruct":
            s.add_argument("--trajectory", action="store_true", help="also dump intermediates (VOLC)")
        else:
            s.add_argument("--n", type=int, help="run.n_samples")
            s.add_argument("--seeds", type=int, nargs="+", help="run.seeds")
            s.add_argument("--truth", help="ground truth VOL1 for bias/MSE maps")

    s = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM/DVH CSV report")
    s.add_argument("recon")
    s.add_argument("truth")
    s.add_argument("--dose", help="dose VOL1 (Gy) computed on the reconstruction")
    s.add_argument("--gt-dose", help="reference dose VOL1 (Gy) for DVH errors")
    s.add_argument("--mask", help="structure mask VOL1 (nonzero = inside)")
    s.add_argument("--dataset", choices=("lidc", "thoracic", "normalized"), help="run.dataset")

    s = sub.add_parser("report", parents=[common], help="PNG figures plus a CSV summary")
    s.add_argument("recon")
    s.add_argument("--truth")
    s.add_argument("--drr", nargs="+", help="x-ray PGM files to tile")
    s.add_argument("--maps", help="directory written by 'uncertainty'")
    s.add_argument("--dataset", choices=("lidc", "thoracic", "normalized"), help="run.dataset")
    return p


# flag attribute -> config key
FLAG_KEYS = {
    "seed": "run.seed", "workers": "run.workers", "n": None, "smooth_sigma": None,
    "angles": "geometry.angles", "beam": "geometry.beam", "sampler": "schedule.sampler",
    "steps": "schedule.steps", "w": "schedule.w", "seeds": "run.seeds", "dataset": "run.dataset",
    "trajectory": "run.trajectory",
}


def flag_overrides(args) -> list[str]:
    out = []
    for attr, key in FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if key is None or val is None or val is False:
            continue
        if isinstance(val, list):
            val = "[" + ", ".join(str(v) for v in val) + "]"
        elif isinstance(val, bool):
            val = "true"
        out.append(f"{key}={val}")
    if args.command == "uncertainty" and args.n is not None:
        out.append(f"run.n_samples={args.n}")
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides + flag_overrides(args))
        written = COMMANDS[args.command](cfg, args)
    except (ValidationError, FormatError, FileNotFoundError) as exc:
        print(f"sparsect {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SparseCTError, ArithmeticError, MemoryError) as exc:
        print(f"sparsect {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in written:
        log.info("wrote %s", p)
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
