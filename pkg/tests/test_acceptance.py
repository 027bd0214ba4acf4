"""The thirteen acceptance criteria. Run with ``pytest tests/test_acceptance.py -v``;
the terminal summary prints one verdict line per criterion."""

import csv
import hashlib
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from tomo4d.carve import cloudy_pixels, sees_domain, space_carve
from tomo4d.cli import main
from tomo4d.forward import LINEAR, SINGLE_SCATTER, ExtinctionField, OpticsModel, Renderer, render, render_clear_sky
from tomo4d.geometry import camera_rays, project_point, ring_views, setup_a, setup_c
from tomo4d.grid import VoxelGrid
from tomo4d.metrics import average_metrics
from tomo4d.phantom import MULTI_MODE, STATIC_BLOB, PhantomSpec, bandlimit_check, generate
from tomo4d.preprocess import ShadowObservation, cloud_height, estimate_albedo, estimate_drift
from tomo4d.recon import ReconConfig, ReconProblem, grad_hidden, reconstruct_4d, reconstruct_static
from tomo4d.sensor import SensorModel, apply_noise
from tomo4d.temporal import INFINITE, kernel_build, nyquist_period

from oracles import central_difference, max_relative_error, ray_voxels_slab
from scenes import random_problem
from test_preprocess import albedo_epoch

pytestmark = pytest.mark.acceptance
criterion = pytest.mark.criterion


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


# -- 1 ---------------------------------------------------------------------------------------

@criterion(1, "gradient fidelity against central differences")
def test_gradient_fidelity():
    worst = 0.0
    with Timer() as clock:
        for seed in range(5):
            n = 3 + seed % 3
            for mode in (LINEAR, SINGLE_SCATTER):
                renderer, data, hidden = random_problem(100 + seed, mode, n=n)
                kernel = kernel_build(hidden.times, [5.0, 10.0, 20.0, 40.0, INFINITE][seed])
                problem = ReconProblem(renderer, data, kernel)
                x = hidden.stack()
                fd = central_difference(lambda v: problem.value(v.reshape(x.shape)), x.ravel(), 1e-3)
                fd = fd.reshape(x.shape)
                for t in range(3):
                    g = grad_hidden(hidden, data, renderer, kernel, t).ravel(order="F")
                    worst = max(worst, max_relative_error(g, fd[t]))
    print(f"max relative error {worst:.2e} in {clock.elapsed:.1f} s")
    assert worst <= 1e-4
    assert clock.elapsed < 60


# -- 2 ---------------------------------------------------------------------------------------

_KERNEL_START = {}


@settings(max_examples=1000, deadline=None, database=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=12, unique=True).map(sorted),
       st.one_of(st.floats(1e-3, 1e5), st.just(INFINITE)))
def _kernel_rows_sum_to_one(times, sigma):
    w = kernel_build(times, sigma).weights
    assert np.all(w >= 0)
    assert np.abs(w.sum(axis=1) - 1.0).max() <= 1e-12
    if math.isinf(sigma):
        assert np.all(w == 1.0 / len(times))


@criterion(2, "temporal kernel laws")
def test_kernel_laws():
    with Timer() as clock:
        _kernel_rows_sum_to_one()
        for n in range(1, 12):
            times = [10.0 * k for k in range(n)]
            assert np.abs(kernel_build(times, 1e-9).weights - np.eye(n)).max() <= 1e-12
            assert np.all(kernel_build(times, INFINITE).weights == 1.0 / n)
    print(f"1000 property examples in {clock.elapsed:.2f} s")
    assert clock.elapsed < 5


# -- 3 ---------------------------------------------------------------------------------------

@criterion(3, "static-limit equivalence")
def test_static_limit_equivalence():
    grid = VoxelGrid(8, 8, 8, 50.0, 50.0, 50.0, (0.0, 0.0, 500.0))
    with Timer() as clock:
        truth = generate(PhantomSpec(kind=STATIC_BLOB, peak=10.0, duration=20.0), grid)
        epochs = setup_a(grid, n_epochs=3, interval=10.0)
        optics = OpticsModel(mode=SINGLE_SCATTER)
        data = Renderer(grid, epochs, optics).render_all(truth.stack())
        cfg = ReconConfig(sigma=INFINITE)
        states, _ = reconstruct_4d(data, epochs, cfg, optics, grid=grid)
        static = reconstruct_static(data, epochs, ReconConfig(sigma=20.0), optics, grid=grid)
    stack = states.stack()
    spread = max(np.abs(stack[i] - stack[j]).max() for i in range(3) for j in range(3))
    _, eps = average_metrics(truth, states)
    print(f"pairwise L-inf spread {spread:.2e}, epsilon {eps:.3f}, {clock.elapsed:.1f} s")
    assert spread <= 1e-6
    assert static.flat().tobytes() == states.states[1].flat().tobytes()
    assert clock.elapsed < 120


# -- 4 and 12 share one closed-loop pipeline ---------------------------------------------------

SIGMAS = "5,10,20,40,80,inf"


def pipeline_inputs(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    (root / "grid.json").write_text(json.dumps(
        {"nx": 16, "ny": 16, "nz": 16, "dx": 100.0, "dy": 100.0, "dz": 100.0, "origin": [0.0, 0.0, 500.0]}))
    (root / "phantom.json").write_text(json.dumps(
        {"kind": "TRANSLATING_BLOB", "radii": [200.0], "peak": 5.0, "velocity": [10.0, 0.0, 0.0],
         "duration": 60.0, "sample_period": 10.0}))
    (root / "optics.json").write_text(json.dumps({"mode": "linear"}))


PIPELINE = [
    ["simulate", "--spec", "phantom.json", "--grid", "grid.json", "--out", "truth.t4df"],
    ["render", "--truth", "truth.t4df", "--setup", "A", "--optics", "optics.json", "--out", "images"],
    ["reconstruct", "--images", "images", "--sigma", "20", "--truth", "truth.t4df", "--out", "est20.t4df",
     "--log", "iters20.csv"],
    ["evaluate", "--truth", "truth.t4df", "--est", "est20.t4df", "--out", "metrics20.csv"],
    ["sweep-sigma", "--truth", "truth.t4df", "--setup", "A", "--optics", "optics.json", "--sigmas", SIGMAS,
     "--out", "sweep.csv"],
]

OUTPUTS = ["truth.t4df", "images", "est20.t4df", "iters20.csv", "metrics20.csv", "sweep.csv"]


def output_hashes(root: Path) -> dict:
    out = {}
    for name in OUTPUTS:
        p = root / name
        files = sorted(q for q in p.iterdir()) if p.is_dir() else [p]
        for f in files:
            out[str(f.relative_to(root))] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def unimodal_ish(values, slack=0.05):
    k = int(np.argmin(values))
    down = all(values[i + 1] <= values[i] * (1 + slack) for i in range(k))
    up = all(values[i + 1] >= values[i] * (1 - slack) for i in range(k, len(values) - 1))
    return down and up


@criterion(4, "dynamic recovery beats the static baseline")
def test_dynamic_beats_static(tmp_path, monkeypatch):
    pipeline_inputs(tmp_path)
    monkeypatch.chdir(tmp_path)
    with Timer() as clock:
        for argv in PIPELINE:
            assert main(argv) == 0, argv
    with open(tmp_path / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    eps = {r["sigma"]: float(r["epsilon"]) for r in rows}
    print("sweep:", ", ".join(f"sigma={k} eps={v:.3f}" for k, v in eps.items()), f"({clock.elapsed:.0f} s)")
    from tomo4d.geometry import angular_extent
    from tomo4d.io import read_image_dir
    epochs = read_image_dir(tmp_path / "images")[1]
    mid = epochs[len(epochs) // 2]
    grid_center = np.array([800.0, 800.0, 1300.0])
    assert math.degrees(angular_extent([mid], grid_center)) >= 100.0
    assert len(mid.cameras) == 3 and len(epochs) == 7
    assert eps["20.0"] < 0.9 * eps["inf"]
    series = [float(r["epsilon"]) for r in rows]
    assert rows[int(np.argmin(series))]["sigma"] != "inf"
    assert unimodal_ish(series)
    # the stored images are float32, so this run differs slightly from the in-memory sweep
    with open(tmp_path / "metrics20.csv", newline="") as fh:
        mean = list(csv.DictReader(fh))[-1]
    assert float(mean["epsilon_t"]) == pytest.approx(eps["20.0"], rel=0.05)
    assert clock.elapsed < 600


# -- 5 ---------------------------------------------------------------------------------------

EXTENTS = (10.0, 20.0, 40.0, 60.0, 90.0)


@pytest.fixture(scope="module")
def extent_sweep():
    grid = VoxelGrid(12, 12, 12, 50.0, 50.0, 50.0, (0.0, 0.0, 500.0))
    truth = generate(PhantomSpec(kind=STATIC_BLOB, peak=10.0, duration=0.0), grid)
    optics = OpticsModel(mode=LINEAR)
    sensor = SensorModel(seed=0)
    out = {}
    with Timer() as clock:
        for ext in EXTENTS:
            ep = ring_views(9, ext, 20.0 * 600.0, grid.center, gsd=50.0, grid=grid)
            renderer = Renderer(grid, [ep], optics)
            data = [apply_noise(renderer.render(0, truth.states[0].flat()), sensor, 0)]
            est, _ = reconstruct_4d(data, [ep], ReconConfig(sigma=INFINITE), optics, grid=grid, renderer=renderer)
            out[ext] = average_metrics(truth, est)[1]
    print("extent sweep:", ", ".join(f"{k:g} deg eps={v:.3f}" for k, v in out.items()), f"({clock.elapsed:.0f} s)")
    return out, clock.elapsed


@criterion(5, "angular-extent trend")
def test_extent_improves_recovery(extent_sweep):
    eps, elapsed = extent_sweep
    assert eps[90.0] < 0.5 * eps[20.0]
    assert eps[10.0] > eps[20.0] > eps[40.0]
    assert elapsed < 600


@criterion(5, "angular-extent trend")
@pytest.mark.xfail(strict=True, reason="epsilon keeps falling between 60 and 90 deg on the desk problem")
def test_extent_plateau(extent_sweep):
    eps, _ = extent_sweep
    print(f"eps(60)/eps(90) = {eps[60.0] / eps[90.0]:.3f}")
    assert abs(eps[60.0] - eps[90.0]) <= 0.2 * eps[90.0]


# -- 6 ---------------------------------------------------------------------------------------

@criterion(6, "Nyquist arithmetic")
def test_nyquist_arithmetic():
    assert nyquist_period(1 / 50) == 25.0
    assert nyquist_period(1 / 70) == 35.0


# -- 7 ---------------------------------------------------------------------------------------

@criterion(7, "sensor statistics")
def test_sensor_statistics():
    from tomo4d.forward import ImageSet

    with Timer() as clock:
        flat = ImageSet(0.0, (np.full((100, 100), 100_000.0),))
        # 16-bit depth keeps quantisation variance negligible next to shot plus read noise
        e = apply_noise(flat, SensorModel(bits=16, electrons_per_unit=1.0, seed=1)).images[0].ravel()
        mean_ok = abs(e.mean() - 100_000.0) <= 3 * math.sqrt(100_000.0) / math.sqrt(1e4)
        var_ok = abs(e.var(ddof=1) - (100_000.0 + 20.0 ** 2)) <= 0.1 * (100_000.0 + 20.0 ** 2)
        model = SensorModel()
        ramp = np.linspace(0, model.full_well / model.electrons_per_unit, 200_000).reshape(400, 500)
        out = apply_noise(ImageSet(0.0, (ramp,)), model).images[0]
        levels = np.unique(np.rint(out * model.electrons_per_unit / model.quantum))
    print(f"mean {e.mean():.1f}, variance {e.var(ddof=1):.0f}, {levels.size} levels, {clock.elapsed:.2f} s")
    assert mean_ok and var_ok
    assert levels.size == 512
    assert clock.elapsed < 30


# -- 8 ---------------------------------------------------------------------------------------

@criterion(8, "shadow height")
def test_shadow_height():
    rng = np.random.default_rng(8)
    for _ in range(100):
        cloud = rng.uniform(-5e3, 5e3, 2)
        shadow = rng.uniform(-5e3, 5e3, 2)
        theta = rng.uniform(1e-3, math.pi / 2 - 1e-3)
        r = math.hypot(*(cloud - shadow))
        got = cloud_height(ShadowObservation(tuple(cloud), tuple(shadow), theta))
        assert got == pytest.approx(r / math.tan(theta), rel=1e-12)
    # radians(45) is not exactly pi/4, so tan gives 1 - 2**-53 and the result sits one ulp above 600
    h = cloud_height(ShadowObservation((0.0, 0.0), (600.0, 0.0), math.radians(45.0)))
    assert abs(h - 600.0) <= math.ulp(600.0)


# -- 9 ---------------------------------------------------------------------------------------

@criterion(9, "albedo recovery")
def test_albedo_recovery():
    ep = albedo_epoch()
    optics = OpticsModel()
    with Timer() as clock:
        clean = render_clear_sky(optics, ep, 1.0, 0.04)
        a_clean = estimate_albedo(clean, ep, optics)
        a_noisy = estimate_albedo(apply_noise(clean, SensorModel(seed=9)), ep, optics)
    print(f"noiseless {a_clean.albedo:.7f}, noisy {a_noisy.albedo:.5f} over {a_noisy.n_pixels} pixels")
    assert a_noisy.n_pixels >= 10_000
    assert abs(a_clean.albedo - 0.04) <= 1e-4
    assert abs(a_noisy.albedo - 0.04) <= 0.01
    assert clock.elapsed < 60


# -- 10 --------------------------------------------------------------------------------------

@criterion(10, "drift recovery")
@pytest.mark.parametrize("setup", ["A", "C"])
def test_drift_recovery(setup):
    grid = VoxelGrid(16, 16, 16, 50.0, 50.0, 50.0, (0.0, 0.0, 500.0))
    epochs = setup_a(grid) if setup == "A" else setup_c(grid)
    t_mid = 0.5 * (epochs[0].time + epochs[-1].time)
    p0 = np.array([420.0, 390.0, 900.0])
    v = np.array([10.0, 0.0, 0.0])
    centroids = [project_point(ep.cameras[0], p0 + v * (ep.time - t_mid)) for ep in epochs]
    est = estimate_drift(centroids, epochs, 900.0)
    print(f"setup {setup}: velocity {est.velocity}")
    assert abs(est.velocity[0] - 10.0) <= 1e-6
    assert abs(est.velocity[1]) <= 1e-6


# -- 11 --------------------------------------------------------------------------------------

PIXEL_THRESHOLD = 0.02


def oracle_carve(grid, epoch, images, clear, pad):
    """Voting with brute-force slab intersections in place of the traversal."""
    coarse = grid.coarsen(2)
    votes = np.zeros(coarse.size, dtype=int)
    seeing = 0
    for cam, im, c in zip(epoch.cameras, images.images, clear.images):
        seeing += sees_domain(coarse, cam)
        cloudy = cloudy_pixels(im, c, PIXEL_THRESHOLD).ravel()
        origins, dirs = camera_rays(cam)
        hits = np.zeros(coarse.size, dtype=bool)
        for o, d in zip(origins[cloudy], dirs[cloudy]):
            hits[list(ray_voxels_slab(coarse, o, d, pad))] = True
        hits = ndimage.binary_dilation(hits.reshape(coarse.shape, order="F"), np.ones((3, 3, 3), bool))
        votes += hits.ravel(order="F")
    keep = (votes > seeing - 1).reshape(coarse.shape, order="F")
    return keep[np.ix_(*[np.arange(n) // 2 for n in grid.shape])]


@criterion(11, "space-carving soundness")
def test_carving_soundness():
    optics = OpticsModel(mode=LINEAR)
    nonempty = carved = ties = 0
    with Timer() as clock:
        for k in range(50):
            rng = np.random.default_rng(1000 + k)
            d = float(rng.uniform(30.0, 80.0))
            grid = VoxelGrid(*[int(n) for n in rng.integers(6, 17, 3)], d, d, d, (0.0, 0.0, 500.0))
            nb = int(rng.integers(1, 4))
            centers = tuple(tuple(grid.lower + rng.uniform(0.3, 0.7, 3) * (grid.upper - grid.lower)) for _ in range(nb))
            radii = tuple(float(rng.uniform(0.5, 1.5) * d) for _ in range(nb))
            field = generate(PhantomSpec(centers=centers, radii=radii, peak=float(rng.uniform(20, 60)),
                                         duration=0.0), grid).states[0]
            ep = ring_views(int(rng.integers(3, 6)), float(rng.uniform(40, 120)), 15e3, grid.center,
                            heading=float(rng.uniform(0, 360)), gsd=0.8 * d, grid=grid)
            images = render(field, ep, optics)
            clear = render(ExtinctionField.zeros(grid), ep, optics)
            mask = space_carve([images], [ep], grid, pixel_threshold=PIXEL_THRESHOLD, clear_sky=[clear], dilate=0)
            # a voxel this dense darkens any ray through its interpolation footprint by more than the threshold
            floor = 20.0 * PIXEL_THRESHOLD / (d / 1000.0)
            support = field.values > floor
            nonempty += bool(support.any())
            carved += mask.count() < grid.size
            assert np.all(mask.flags[support]), f"phantom {k}: dense voxel carved away"
            # rays running along a voxel face may or may not count it; bracket the tie from both sides
            inner = oracle_carve(grid, ep, images, clear, -1e-6 * d)
            outer = oracle_carve(grid, ep, images, clear, 1e-6 * d)
            assert np.all(mask.flags[inner]) and not np.any(mask.flags[~outer]), f"phantom {k}"
            ties += int((outer & ~inner).sum())
    print(f"{nonempty} phantoms with support above the floor, {carved} masks smaller than the grid, "
          f"{ties} face-tie voxels, {clock.elapsed:.1f} s")
    assert nonempty >= 40 and carved >= 25
    assert clock.elapsed < 120


# -- 12 --------------------------------------------------------------------------------------

@criterion(12, "determinism across thread counts")
def test_determinism_across_threads(tmp_path):
    hashes = {}
    for threads in ("1", "4"):
        root = tmp_path / f"threads{threads}"
        pipeline_inputs(root)
        env = {**os.environ, "T4D_THREADS": threads}
        for argv in PIPELINE:
            run = subprocess.run([sys.executable, "-m", "tomo4d.cli", *argv], cwd=root, env=env,
                                 capture_output=True, text=True)
            assert run.returncode == 0, run.stderr
        hashes[threads] = output_hashes(root)
    print(f"{len(hashes['1'])} output files compared")
    assert len(hashes["1"]) > 6
    assert hashes["1"] == hashes["4"]


# -- 13 --------------------------------------------------------------------------------------

@criterion(13, "spectrum oracle")
def test_spectrum_oracle():
    grid = VoxelGrid(6, 6, 6, 50.0, 50.0, 50.0, (0.0, 0.0, 500.0))
    seq = generate(PhantomSpec(kind=MULTI_MODE, frequencies=(0.02,), duration=640.0, sample_period=5.0, seed=13), grid)
    report = bandlimit_check(seq, fraction=0.95)
    bin_width = report.frequencies[1] - report.frequencies[0]
    print(f"cutoff {report.cutoff:.5f} Hz, bin {bin_width:.5f} Hz")
    assert abs(report.cutoff - 0.02) <= bin_width
