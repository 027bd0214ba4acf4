"""Command-line driver for the simulate, render, reconstruct and evaluate loop.

Exit status: 0 success, 1 replay mismatch or unexpected failure, 2 malformed
input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .carve import space_carve
from .forward import ImageSet, OpticsModel, Renderer, render_clear_sky
from .geometry import PODEX_ANGLES, SETUPS, ring_views, setup_c
from .grid import FieldSequence, VoxelGrid
from .metrics import average_metrics, per_state, write_metrics_csv
from .phantom import PhantomSpec, generate
from .preprocess import ShadowObservation, center_of_mass, cloud_height, estimate_albedo, estimate_drift
from .recon import NumericalError, ReconConfig, reconstruct_4d
from .sensor import SensorModel, apply_noise
from .temporal import format_sigma, nyquist_period, parse_sigma, sampling_adequate, spectrum_cutoff

log = logging.getLogger("tomo4d")

EXIT_MISMATCH = 1
EXIT_MALFORMED = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


# -- helpers --------------------------------------------------------------------------------

def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} numbers, got {text!r}")
    return vals


def parse_sigmas(text: str) -> list[float]:
    try:
        return [parse_sigma(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def parse_extents(text: str) -> list[float]:
    """``10,20,40`` or ``10..120`` (step 10) or ``10..120:5``."""
    if ".." in text:
        rng, _, step = text.partition(":")
        a, b = rng.split("..")
        a, b = float(a), float(b)
        s = float(step) if step else 10.0
        if s <= 0 or b < a:
            raise UsageError(f"bad extent range {text!r}")
        return [float(v) for v in np.arange(a, b + s * 0.5, s)]
    return _floats(text)


def load_optics(path) -> OpticsModel:
    if path is None:
        return OpticsModel()
    try:
        return OpticsModel.from_dict(io.read_json(path))
    except (TypeError, KeyError) as exc:
        raise io.MalformedFileError(f"{path}: {exc}") from exc


def load_sensor(path, seed) -> SensorModel | None:
    if path is None:
        return None
    try:
        d = io.read_json(path)
        if seed is not None:
            d["seed"] = int(seed)
        return SensorModel.from_dict(d)
    except (TypeError, KeyError) as exc:
        raise io.MalformedFileError(f"{path}: {exc}") from exc


def load_recon_config(path, sigma=None) -> ReconConfig:
    d = io.read_json(path) if path else {}
    if sigma is not None:
        d["sigma"] = sigma
    try:
        return ReconConfig.from_dict(d)
    except TypeError as exc:
        raise io.MalformedFileError(f"{path}: {exc}") from exc


def build_setup(setup: str, grid: VoxelGrid, times) -> list:
    """Acquisition epochs matching the given state times."""
    times = [float(t) for t in times]
    n = len(times)
    if setup in SETUPS:
        if n > 1:
            steps = np.diff(times)
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
                raise UsageError("preset setups need uniformly spaced states")
            interval = float(steps[0])
        else:
            interval = 0.0
        if setup == "C":
            if n > len(PODEX_ANGLES):
                raise UsageError(f"setup C has at most {len(PODEX_ANGLES)} epochs")
            pick = np.round(np.linspace(0, len(PODEX_ANGLES) - 1, n)).astype(int) if n > 1 else [10]
            return setup_c(grid, interval=interval, angles=[PODEX_ANGLES[i] for i in pick], t0=times[0])
        return SETUPS[setup](grid, n_epochs=n, interval=interval, t0=times[0])
    epochs = io.read_epochs(setup)
    if len(epochs) != n or not np.allclose([e.time for e in epochs], times, rtol=0, atol=1e-9):
        raise UsageError(f"{setup}: epoch times do not match the field's state times")
    return epochs


def render_states(truth: FieldSequence, epochs, optics: OpticsModel, gain: float,
                  sensor: SensorModel | None) -> list[ImageSet]:
    renderer = Renderer(truth.grid, epochs, optics, gain)
    clean = renderer.render_all([s.flat() for s in truth.states])
    if sensor is None:
        return clean
    return [apply_noise(im, sensor, e) for e, im in enumerate(clean)]


def carve_mask(images, epochs, grid, optics, gain, args):
    clear = [render_clear_sky(optics, ep, gain, optics.surface_albedo) for ep in epochs]
    return space_carve(images, epochs, grid, args.carve_threshold, args.carve_votes, args.carve_dilate, clear)


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


def _default_manifest(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _csv_text(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


# -- commands -------------------------------------------------------------------------------

def cmd_simulate(args):
    spec = PhantomSpec.from_dict(io.read_json(args.spec))
    grid = VoxelGrid.from_dict(io.read_json(args.grid))
    seq = generate(spec, grid)
    io.write_field(args.out, seq)
    io.write_manifest(_manifest_path(args, _default_manifest(args.out)), "simulate", args.argv,
                      {"phantom": spec.to_dict(), "grid": grid.to_dict()}, [args.spec, args.grid], [args.out])


def cmd_render(args):
    truth = io.read_field(args.truth)
    optics = load_optics(args.optics)
    sensor = load_sensor(args.noise, args.seed)
    epochs = build_setup(args.setup, truth.grid, truth.times)
    images = render_states(truth, epochs, optics, args.gain, sensor)
    extra = {"setup": args.setup, "sensor": sensor.to_dict() if sensor else None}
    io.write_image_dir(args.out, images, epochs, truth.grid, optics, args.gain, extra)
    io.write_manifest(_manifest_path(args, _default_manifest(args.out)), "render", args.argv,
                      {"optics": optics.to_dict(), "sensor": extra["sensor"], "setup": args.setup,
                       "gain": args.gain},
                      [p for p in (args.truth, args.optics, args.noise) if p], [args.out])


def _reconstruct(images, epochs, grid, optics, gain, cfg, args, truth=None, log_path=None):
    if getattr(args, "carve", False):
        cfg.mask = carve_mask(images, epochs, grid, optics, gain, args)
        log.info("carved mask keeps %d of %d voxels", cfg.mask.count(), grid.size)
    return reconstruct_4d(images, epochs, cfg, optics, gain, grid=grid, truth=truth, log_path=log_path)


def cmd_reconstruct(args):
    images, epochs, scene = io.read_image_dir(args.images)
    if args.setup and args.setup not in SETUPS:
        epochs = io.read_epochs(args.setup)
        if len(epochs) != len(images):
            raise UsageError("setup file has a different number of epochs than the images")
    grid = VoxelGrid.from_dict(io.read_json(args.grid) if args.grid else scene["grid"])
    optics = load_optics(args.optics) if args.optics else OpticsModel.from_dict(scene["optics"])
    gain = float(scene.get("gain", 1.0))
    cfg = load_recon_config(args.config, args.sigma)
    truth = io.read_field(args.truth) if args.truth else None
    est, state = _reconstruct(images, epochs, grid, optics, gain, cfg, args, truth, args.log)
    io.write_field(args.out, est)
    outputs = [args.out] + ([args.log] if args.log else [])
    metrics = {"final_cost": state.cost_history[-1], "iterations": state.iterations, "stop": state.stop_reason}
    if truth is not None:
        delta, eps = average_metrics(truth, est)
        metrics.update(epsilon=eps, delta=delta)
    io.write_manifest(_manifest_path(args, _default_manifest(args.out)), "reconstruct", args.argv,
                      {"recon": cfg.to_dict(), "optics": optics.to_dict(), "carve": bool(args.carve)},
                      [p for p in (args.images, args.config, args.grid, args.optics, args.truth) if p],
                      outputs, metrics)


def cmd_evaluate(args):
    truth = io.read_field(args.truth)
    est = io.read_field(args.est)
    delta, epsilon = write_metrics_csv(args.out, truth, est)
    print(f"delta={delta:.6g} epsilon={epsilon:.6g}")
    io.write_manifest(_manifest_path(args, _default_manifest(args.out)), "evaluate", args.argv, {},
                      [args.truth, args.est], [args.out], {"delta": delta, "epsilon": epsilon})


def cmd_sweep_sigma(args):
    truth = io.read_field(args.truth)
    optics = load_optics(args.optics)
    sensor = load_sensor(args.noise, args.seed)
    epochs = build_setup(args.setup, truth.grid, truth.times)
    images = render_states(truth, epochs, optics, args.gain, sensor)
    base = load_recon_config(args.config)
    n = len(truth)
    rows = [["sigma", "epsilon", "delta"] + [f"epsilon_t{i}" for i in range(n)] + [f"delta_t{i}" for i in range(n)]]
    renderer = Renderer(truth.grid, epochs, optics, args.gain)
    mask = carve_mask(images, epochs, truth.grid, optics, args.gain, args) if args.carve else None
    summary = {}
    for sigma in parse_sigmas(args.sigmas):
        cfg = ReconConfig.from_dict({**base.to_dict(), "sigma": sigma})
        cfg.mask = mask
        est, _ = reconstruct_4d(images, epochs, cfg, optics, args.gain, grid=truth.grid, renderer=renderer)
        deltas, eps = per_state(truth, est)
        e, d = float(np.mean(eps)), float(np.mean(deltas))
        summary[format_sigma(sigma)] = {"epsilon": e, "delta": d}
        log.info("sigma=%s epsilon=%.4f delta=%.4f", format_sigma(sigma), e, d)
        rows.append([format_sigma(sigma), repr(e), repr(d)] + [repr(v) for v in eps] + [repr(v) for v in deltas])
    io.atomic_write_text(args.out, _csv_text(rows))
    io.write_manifest(_manifest_path(args, _default_manifest(args.out)), "sweep-sigma", args.argv,
                      {"recon": base.to_dict(), "optics": optics.to_dict(), "setup": args.setup,
                       "sensor": sensor.to_dict() if sensor else None, "sigmas": args.sigmas},
                      [p for p in (args.truth, args.optics, args.noise, args.config) if p], [args.out], summary)


def cmd_sweep_extent(args):
    truth = io.read_field(args.truth)
    state = truth.states[(len(truth) - 1) // 2]
    grid = truth.grid
    optics = load_optics(args.optics)
    sensor = load_sensor(args.noise, args.seed)
    base = load_recon_config(args.config)
    extent_xy = max(grid.upper[0] - grid.lower[0], grid.upper[1] - grid.lower[1])
    distance = args.distance or 20.0 * extent_xy
    target = np.array([grid.center[0], grid.center[1], grid.center[2]])
    rows = [["extent_deg", "epsilon", "delta"]]
    summary = {}
    for ext in parse_extents(args.extents):
        ep = ring_views(args.views, ext, distance, target, gsd=args.gsd or grid.dx, grid=grid)
        seq = FieldSequence((ep.time,), (state,))
        images = render_states(seq, [ep], optics, args.gain, sensor)
        cfg = ReconConfig.from_dict({**base.to_dict(), "sigma": math.inf})
        est, _ = reconstruct_4d(images, [ep], cfg, optics, args.gain, grid=grid)
        d, e = average_metrics(seq, est)
        summary[f"{ext:g}"] = {"epsilon": e, "delta": d}
        log.info("extent=%g epsilon=%.4f delta=%.4f", ext, e, d)
        rows.append([f"{ext:g}", repr(e), repr(d)])
    io.atomic_write_text(args.out, _csv_text(rows))
    io.write_manifest(_manifest_path(args, _default_manifest(args.out)), "sweep-extent", args.argv,
                      {"recon": base.to_dict(), "optics": optics.to_dict(), "views": args.views,
                       "distance": distance, "extents": args.extents},
                      [p for p in (args.truth, args.optics, args.noise, args.config) if p], [args.out], summary)


def cmd_analyze_spectrum(args):
    truth = io.read_field(args.truth)
    times = np.asarray(truth.times)
    if len(times) < 2:
        raise UsageError("spectrum analysis needs at least two states")
    period = float(times[1] - times[0])
    report = spectrum_cutoff(truth.stack().T, period, min(args.window, len(times)), args.fraction)
    report.write_csv(args.out)
    summary = {"cutoff_hz": report.cutoff, "sample_period": period}
    if report.cutoff > 0:
        summary["nyquist_period"] = nyquist_period(report.cutoff)
    summary["adequately_sampled"] = sampling_adequate(report.cutoff, period)
    print(json.dumps(summary, sort_keys=True))
    io.write_manifest(_manifest_path(args, _default_manifest(args.out)), "analyze-spectrum", args.argv,
                      {"fraction": args.fraction, "window": args.window}, [args.truth], [args.out], summary)


def cmd_preprocess(args):
    if args.tool == "height":
        cx, cy = _floats(args.cloud, 2)
        sx, sy = _floats(args.shadow, 2)
        z = cloud_height(ShadowObservation((cx, cy), (sx, sy), math.radians(args.sun_zenith)))
        result = {"altitude_m": z}
        inputs = []
    elif args.tool == "drift":
        images, epochs, _ = io.read_image_dir(args.images)
        cents = [center_of_mass(s.images[args.camera], args.threshold) for s in images]
        result = estimate_drift(cents, epochs, args.altitude, args.camera).to_dict()
        inputs = [args.images]
    else:
        images, epochs, scene = io.read_image_dir(args.images)
        optics = load_optics(args.optics) if args.optics else OpticsModel.from_dict(scene["optics"])
        res = estimate_albedo(images[args.epoch], epochs[args.epoch], optics, float(scene.get("gain", 1.0)),
                              tuple(_floats(args.bracket, 2)))
        result = {"albedo": res.albedo, "objective": res.objective, "n_pixels": res.n_pixels}
        inputs = [args.images]
    print(json.dumps(result, sort_keys=True))
    outputs = []
    if args.out:
        io.write_json(args.out, result)
        outputs = [args.out]
    manifest = args.manifest or (str(_default_manifest(args.out)) if args.out else None)
    if manifest:
        io.write_manifest(manifest, f"preprocess {args.tool}", args.argv, {}, inputs, outputs, result)


def cmd_replay(args):
    manifest = io.read_json(args.manifest)
    argv = manifest.get("argv")
    if not isinstance(argv, list) or not argv:
        raise io.MalformedFileError(f"{args.manifest}: no recorded command line")
    expected = manifest.get("outputs", {})
    replay_manifest = str(Path(args.manifest).with_name(Path(args.manifest).name + ".replay.json"))
    code = main(list(argv) + ["--manifest", replay_manifest])
    if code != 0:
        return code
    mismatched = [p for p, h in expected.items() if not Path(p).exists() or io.sha256_file(p) != h]
    for p in mismatched:
        print(f"hash mismatch: {p}", file=sys.stderr)
    if not mismatched:
        print(f"replay reproduced {len(expected)} output file(s)")
    return EXIT_MISMATCH if mismatched else 0


# -- parser ---------------------------------------------------------------------------------

def _add_render_opts(p):
    p.add_argument("--truth", required=True)
    p.add_argument("--setup", default="A", help="A, B, C or an epochs JSON file")
    p.add_argument("--optics")
    p.add_argument("--gain", type=float, default=1.0)
    p.add_argument("--noise", help="sensor JSON; omit for noiseless images")
    p.add_argument("--seed", type=int)


def _add_carve_opts(p):
    p.add_argument("--carve", action="store_true", help="restrict the unknowns to a space-carved mask")
    p.add_argument("--carve-threshold", type=float, default=None)
    p.add_argument("--carve-votes", type=int, default=None)
    p.add_argument("--carve-dilate", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tomo4d", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a phantom field sequence")
    p.add_argument("--spec", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("render", help="render (and optionally noise) images of a field sequence")
    _add_render_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("reconstruct", help="recover a field sequence from images")
    p.add_argument("--images", required=True)
    p.add_argument("--setup", help="epochs JSON overriding the geometry stored with the images")
    p.add_argument("--grid")
    p.add_argument("--optics")
    p.add_argument("--sigma", default=None)
    p.add_argument("--config")
    p.add_argument("--truth", help="ground truth for per-iteration error logging")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    _add_carve_opts(p)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="mass bias and relative error per state")
    p.add_argument("--truth", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep-sigma", help="reconstruct for several correlation times")
    _add_render_opts(p)
    p.add_argument("--sigmas", default="5,10,20,40,80,inf")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_carve_opts(p)
    p.set_defaults(fn=cmd_sweep_sigma)

    p = sub.add_parser("sweep-extent", help="static recovery versus angular extent of simultaneous views")
    p.add_argument("--truth", required=True)
    p.add_argument("--extents", default="10,20,40,60,90")
    p.add_argument("--views", type=int, default=9)
    p.add_argument("--distance", type=float, default=None)
    p.add_argument("--gsd", type=float, default=None)
    p.add_argument("--optics")
    p.add_argument("--gain", type=float, default=1.0)
    p.add_argument("--noise")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep_extent)

    p = sub.add_parser("analyze-spectrum", help="temporal spectrum and cutoff of a field sequence")
    p.add_argument("--truth", required=True)
    p.add_argument("--fraction", type=float, default=0.95)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze_spectrum)

    p = sub.add_parser("preprocess", help="cloud height, drift and surface albedo")
    tools = p.add_subparsers(dest="tool", required=True)
    t = tools.add_parser("height")
    t.add_argument("--cloud", required=True, help="x,y in metres")
    t.add_argument("--shadow", required=True, help="x,y in metres")
    t.add_argument("--sun-zenith", type=float, required=True, help="degrees")
    t = tools.add_parser("drift")
    t.add_argument("--images", required=True)
    t.add_argument("--altitude", type=float, required=True)
    t.add_argument("--camera", type=int, default=0)
    t.add_argument("--threshold", type=float, default=None)
    t = tools.add_parser("albedo")
    t.add_argument("--images", required=True)
    t.add_argument("--epoch", type=int, default=0)
    t.add_argument("--optics")
    t.add_argument("--bracket", default="0,1")
    for t in tools.choices.values():
        t.add_argument("--out")
        t.add_argument("--manifest")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest")
    p.set_defaults(fn=cmd_replay, no_manifest=True)

    for name, sp in sub.choices.items():
        if name not in ("replay", "preprocess"):
            sp.add_argument("--manifest", help="where to write the run manifest")
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = [a for a in argv]
    # replays pass their own --manifest; strip it so the recorded command line stays stable
    if "--manifest" in args.argv:
        i = args.argv.index("--manifest")
        del args.argv[i:i + 2]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.fn(args)
        return int(code or 0)
    except (io.MalformedFileError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
