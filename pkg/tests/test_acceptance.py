"""Exit criteria. Each test prints one PASS/FAIL line; tolerances are pinned below.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import bilinear_sample, brute_force_nearest, fine_step_drr, ssim_window_oracle  # noqa: E402
from sparsect.cli import main  # noqa: E402
from sparsect.diffusion import (AnalyticGaussianDenoiser, ConditionalGaussianDenoiser, absent,  # noqa: E402
                                cfg_combine, forward_sample, linear_schedule, make_rng, sample_ancestral,
                                sample_fast)
from sparsect.fusion import (FeatureImage, FeatureVolume, GridSpec, IdentityExtractor, backproject,  # noqa: E402
                             build_condition, fuse)
from sparsect.latent import random_codebook, quantize  # noqa: E402
from sparsect.metrics import (DvhReport, dvh_error, dvh_v_gray, dvh_v_percent, psnr_from_mse,  # noqa: E402
                              read_report, ssim3d)
from sparsect.projector import (DEFAULT_ANGLES, ProjectionGeometry, detector_rays, generate_views,  # noqa: E402
                                project_point_mm, render_drr)
from sparsect.uncertainty import voxel_stats  # noqa: E402
from sparsect.volume import Unit, Volume3D, centered_origin, phantom_volume  # noqa: E402

pytestmark = pytest.mark.acceptance

# Pinned tolerances.
DRR_MASS_RTOL = 1e-4
DRR_PIXEL_RTOL = 0.01
DRR_INTERIOR_FRAC = 0.01      # interior = oracle value >= 1% of the view maximum
DRR_SECONDS = 10.0
CONE_ATOL_MM = 1e-9
FORWARD_SE = 3.0
ANC_MEAN_RTOL, ANC_VAR_RTOL = 0.02, 0.05
FAST_MEAN_RTOL, FAST_VAR_RTOL = 0.05, 0.15
SAMPLER_SECONDS = 120.0
CFG_AFFINE_ATOL = 1e-12
IDENTITY_RTOL = 1e-10
SSIM_ORACLE_ATOL = 1e-9
BACKPROJECT_ATOL = 1e-6
CONDITION_SECONDS = 30.0
PIPELINE_SECONDS = 60.0


def verdict(n, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  [{n:2d}] {title}: {detail}"
    with _terminal():
        print(line)
    assert ok, line


class _terminal:
    """Let the verdict line through pytest's output capture."""

    def __enter__(self):
        self.cap = _CAPMAN[0]
        if self.cap is not None:
            self.cap.suspend_global_capture(in_=False)

    def __exit__(self, *exc):
        if self.cap is not None:
            self.cap.resume_global_capture()


_CAPMAN = [None]


@pytest.fixture(autouse=True)
def _capture_manager(request):
    _CAPMAN[0] = request.config.pluginmanager.getplugin("capturemanager")
    yield
    _CAPMAN[0] = None


def hu(data, spacing=1.0):
    data = np.asarray(data, dtype=np.float64)
    sp = (spacing,) * 3
    return Volume3D(data, sp, centered_origin(data.shape, sp), Unit.HU)


def test_01_drr_matches_fine_step_oracle():
    v = phantom_volume("shepp3d", 32, smooth_sigma=1.0)
    worst_mass = worst_pix = 0.0
    elapsed = 0.0
    for beam in ("parallel", "cone"):
        for a in DEFAULT_ANGLES:
            g = ProjectionGeometry(beam=beam, angle_deg=a, detector_px=(40, 40))
            t0 = time.perf_counter()
            img = render_drr(v, g, workers=1).data
            elapsed += time.perf_counter() - t0
            o, d = detector_rays(g)
            ref = fine_step_drr(v, o, d, 1.0 / 16, forward_only=beam == "cone").reshape(img.shape)
            worst_mass = max(worst_mass, abs(img.sum() - ref.sum()) / ref.sum())
            inside = ref >= DRR_INTERIOR_FRAC * ref.max()
            worst_pix = max(worst_pix, float((np.abs(img - ref)[inside] / ref[inside]).max()))
    ok = worst_mass <= DRR_MASS_RTOL and worst_pix <= DRR_PIXEL_RTOL and elapsed < DRR_SECONDS
    verdict(1, "DRR vs fine-step oracle", ok,
            f"mass {worst_mass:.2e} <= {DRR_MASS_RTOL:g}, interior pixel {worst_pix:.4f} <= {DRR_PIXEL_RTOL:g}, "
            f"16 views in {elapsed:.2f}s < {DRR_SECONDS:g}s")


def test_02_cone_beam_magnification():
    g = ProjectionGeometry(beam="cone", angle_deg=0.0, dso=1000.0, dsd=1500.0)
    col = project_point_mm(np.array([0.0, 100.0, 0.0]), g)
    row = project_point_mm(np.array([0.0, 0.0, 100.0]), g)
    err = max(abs(col[1] - 150.0), abs(col[0]), abs(row[0] - 150.0), abs(row[1]))
    verdict(2, "cone-beam magnification", err <= CONE_ATOL_MM,
            f"100 mm -> {col[1]!r} mm, |err| {err:.1e} <= {CONE_ATOL_MM:g}")


def test_03_forward_process_moments():
    s = linear_schedule()
    n, x0 = 100_000, 1.7
    r = make_rng(2024)
    worst = 0.0
    for t in (10, 500, 1000):
        xt = forward_sample(np.full(n, x0), t, r.standard_normal(n), s)
        ab = s.alpha_bar_at(t)
        m_se = math.sqrt((1 - ab) / n)
        v_se = (1 - ab) * math.sqrt(2.0 / (n - 1))
        z = max(abs(xt.mean() - math.sqrt(ab) * x0) / m_se, abs(xt.var(ddof=1) - (1 - ab)) / v_se)
        worst = max(worst, z)
    verdict(3, "forward-process moments", worst <= FORWARD_SE,
            f"worst deviation {worst:.2f} SE <= {FORWARD_SE:g} at t in (10, 500, 1000)")


def test_04_sampler_on_gaussian_toy():
    s = linear_schedule()
    m, v, n = 3.0, 0.25, 2000
    den = AnalyticGaussianDenoiser(s, m, v)
    t0 = time.perf_counter()
    anc = sample_ancestral(den, None, s, (n,), w=0.0, seed=0)
    fast = sample_fast(den, None, s, (n,), w=0.0, steps=10, seed=0)
    elapsed = time.perf_counter() - t0
    am, av = abs(anc.mean() / m - 1), abs(anc.var() / v - 1)
    fm, fv = abs(fast.mean() / anc.mean() - 1), abs(fast.var() / anc.var() - 1)
    ok = (am <= ANC_MEAN_RTOL and av <= ANC_VAR_RTOL and fm <= FAST_MEAN_RTOL and fv <= FAST_VAR_RTOL
          and elapsed < SAMPLER_SECONDS)
    verdict(4, "samplers on analytic Gaussian toy", ok,
            f"ancestral mean {am:.2%}/var {av:.2%} (<= {ANC_MEAN_RTOL:.0%}/{ANC_VAR_RTOL:.0%}), "
            f"fast vs ancestral mean {fm:.2%}/var {fv:.2%} (<= {FAST_MEAN_RTOL:.0%}/{FAST_VAR_RTOL:.0%}), "
            f"{elapsed:.1f}s")


def test_05_cfg_identities():
    r = make_rng(5)
    a, b, d = r.standard_normal((3, 10_000))
    w0 = np.array_equal(cfg_combine(a, b, 0.0), a)
    fixed = all(np.array_equal(cfg_combine(a, a, w), a) for w in (0.5, 1.0, 3.0, 7.5))
    aff = max(float(np.abs(cfg_combine(a + d, b + d, w) - (cfg_combine(a, b, w) + d)).max())
              for w in (0.5, 1.0, 3.0))
    s = linear_schedule(50)
    den = ConditionalGaussianDenoiser(s, offset=0.4, gain=1.0)
    cond = np.zeros((1, 4, 4, 4))
    traj = all(sample_ancestral(den, absent(cond), s, cond.shape, w=0.0, seed=k).tobytes()
               == sample_ancestral(den, None, s, cond.shape, w=0.0, seed=k).tobytes() for k in range(3))
    ok = w0 and fixed and traj and aff <= CFG_AFFINE_ATOL
    verdict(5, "CFG identities", ok,
            f"w=0 exact {w0}, fixed point exact {fixed}, sentinel trajectories identical {traj}, "
            f"affinity {aff:.1e} <= {CFG_AFFINE_ATOL:g}")


def test_06_bias_variance_identity():
    r = make_rng(6)
    truth = hu(r.standard_normal((32, 32, 32)) * 400.0)
    samples = [hu(r.standard_normal((32, 32, 32)) * 400.0 + 25.0) for _ in range(100)]
    m = voxel_stats(samples, truth)
    resid = float((np.abs(m.mse - (m.squared_bias + m.variance)) / np.maximum(1.0, m.mse)).max())
    verdict(6, "bias-variance identity", resid <= IDENTITY_RTOL,
            f"max relative residual {resid:.1e} <= {IDENTITY_RTOL:g} over 32^3 voxels")


def test_07_quantization_matches_brute_force():
    cb = random_codebook(7)
    z = make_rng(77).standard_normal((10_000, 8))
    idx, _, _ = quantize(z, cb, axis=1)
    ref = brute_force_nearest(z, cb.entries)
    mismatches = int(np.count_nonzero(idx != ref))
    verdict(7, "codebook quantization", mismatches == 0,
            f"{mismatches} mismatches over 10^4 vectors vs {cb.count}x{cb.dim} codebook")


def test_08_metrics():
    r = make_rng(8)
    a = r.random((16, 16, 16))
    b = 0.7 * a + 0.3 * r.random((16, 16, 16))
    self_one = ssim3d(a, a) == 1.0
    err = abs(ssim3d(a, b) - ssim_window_oracle(a, b, 11, 0.01 ** 2, 0.03 ** 2))
    c = a + 1.0
    err = max(err, abs(ssim3d(a, c) - ssim_window_oracle(a, c, 11, 0.01 ** 2, 0.03 ** 2)))
    endpoint = psnr_from_mse(4095.0 ** 2, 4095.0) == 0.0 and psnr_from_mse(1.0, 1.0) == 0.0
    ok = self_one and endpoint and err <= SSIM_ORACLE_ATOL
    verdict(8, "SSIM and PSNR", ok,
            f"ssim(a,a)==1 {self_one}, window oracle {err:.1e} <= {SSIM_ORACLE_ATOL:g}, 0 dB endpoint {endpoint}")


def _oracle_backproject(img, p, g):
    a = math.radians(g.angle_deg)
    x = p[0] * math.cos(a) + p[1] * math.sin(a) + g.translation[0]
    y = -p[0] * math.sin(a) + p[1] * math.cos(a) + g.translation[1]
    z = p[2] + g.translation[2]
    mag = g.dsd / (g.dso + x) if g.beam == "cone" else 1.0
    rows, cols = g.detector_px
    row = z * mag / g.detector_spacing + (rows - 1) / 2
    col = y * mag / g.detector_spacing + (cols - 1) / 2
    return bilinear_sample(img, row, col)


def test_09_fusion():
    r = make_rng(9)
    worst = 0.0
    grid = GridSpec((6, 5, 7), (1.7, 2.1, 1.3), (-4.0, -5.0, -3.5))
    pts = grid.points_xyz().reshape(-1, 3)
    for beam in ("parallel", "cone"):
        g = ProjectionGeometry(beam=beam, angle_deg=67.5, dso=120.0, dsd=190.0, detector_px=(18, 22),
                               detector_spacing=0.9, translation=(0.4, -0.6, 1.2))
        img = r.random((1, 18, 22))
        got = backproject(FeatureImage(img, g), grid).data.reshape(-1)
        want = np.array([_oracle_backproject(img[0], p, g) for p in pts])
        worst = max(worst, float(np.abs(got - want).max()))
    vols = [FeatureVolume(r.standard_normal((2, 4, 4, 4)) * 10.0 ** k, GridSpec((4, 4, 4), (1.0,) * 3, (0.0,) * 3))
            for k in range(-2, 4)]
    perm_ok = all(fuse(vols).data.tobytes() == fuse([vols[i] for i in r.permutation(len(vols))]).data.tobytes()
                  for _ in range(10))
    vol = phantom_volume("shepp3d", 128, smooth_sigma=2.0)
    views = generate_views(vol, DEFAULT_ANGLES, ProjectionGeometry(detector_px=(128, 128)))
    grid64 = GridSpec((64, 64, 64), (2.0,) * 3, centered_origin((64, 64, 64), (2.0,) * 3))
    t0 = time.perf_counter()
    cond = build_condition(views, IdentityExtractor(), grid64)
    elapsed = time.perf_counter() - t0
    ok = worst <= BACKPROJECT_ATOL and perm_ok and elapsed < CONDITION_SECONDS and cond.data.shape == (1, 64, 64, 64)
    verdict(9, "feature fusion", ok,
            f"two-step oracle {worst:.1e} <= {BACKPROJECT_ATOL:g}, permutation exact {perm_ok}, "
            f"8-view 64^3 condition {elapsed:.2f}s < {CONDITION_SECONDS:g}s")


def test_10_end_to_end(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("SPARSECT_OUTPUT", str(tmp_path))
    small = ["--set", "volume.n=32", "--set", "geometry.detector=[64, 64]"]
    out = tmp_path / "out"
    t0 = time.perf_counter()
    codes = [main(["phantom", *small])]
    phantom = str(out / "phantom_shepp3d_32.vol1")
    codes.append(main(["drr", phantom, *small]))
    views = [str(out / f"drr_{k:02d}.pgm") for k in range(8)]
    codes.append(main(["fuse", *views, *small]))
    codes.append(main(["reconstruct", *views, *small, "--seed", "11", "--name", "r1.vol1"]))
    codes.append(main(["evaluate", str(out / "r1.vol1"), phantom, *small]))
    elapsed = time.perf_counter() - t0
    codes.append(main(["reconstruct", *views, *small, "--seed", "11", "--name", "r2.vol1"]))
    codes.append(main(["reconstruct", *views, *small, "--seed", "11", "--name", "r3.vol1", "--workers", "4"]))
    blobs = {(out / n).read_bytes() for n in ("r1.vol1", "r2.vol1", "r3.vol1")}
    rows = {row["metric"] for row in read_report(out / "evaluation.csv")}
    ok = (not any(codes) and len(blobs) == 1 and elapsed < PIPELINE_SECONDS and {"psnr", "ssim"} <= rows)
    verdict(10, "end-to-end determinism", ok,
            f"exit codes {codes}, {len(blobs)} distinct output(s) across runs and 1/4 workers, "
            f"pipeline {elapsed:.1f}s < {PIPELINE_SECONDS:g}s")


def test_11_dvh_conventions():
    r = make_rng(11)
    dose = r.uniform(0.0, 60.0, (20, 20, 20))
    mask = r.random((20, 20, 20)) < 0.25
    inside = dose[mask]
    v90 = 100.0 * sum(1 for x in inside if x >= 0.9 * 50.0) / inside.size
    v20 = 100.0 * sum(1 for x in inside if x >= 20.0) / inside.size
    exact = dvh_v_percent(dose, mask, 50.0, 90.0) == v90 and dvh_v_gray(dose, mask, 20.0) == v20
    err = dvh_error(DvhReport().add("breast", "V90%", 95.0),
                    DvhReport().add("breast", "V90%", 86.0)).values[("breast", "V90%")]
    ok = exact and err == 9.0 and 1.0 <= err <= 9.0
    verdict(11, "DVH conventions", ok,
            f"V90%={v90:.4f} V20Gy={v20:.4f} match counting oracle {exact}, |95-86| = {err:g} inside [1, 9]")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
