"""Procedural dynamic ground truth: Gaussian blobs that move, grow or pulse."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import ExtinctionField, FieldSequence, VoxelGrid
from .temporal import SpectrumReport, spectrum_cutoff

STATIC_BLOB = "STATIC_BLOB"
TRANSLATING_BLOB = "TRANSLATING_BLOB"
GROWING_BLOB = "GROWING_BLOB"
MULTI_MODE = "MULTI_MODE"
KINDS = (STATIC_BLOB, TRANSLATING_BLOB, GROWING_BLOB, MULTI_MODE)


@dataclass(frozen=True)
class PhantomSpec:
    """Blob parameters.

    ``centers`` are blob positions at the middle of the acquisition (metres);
    empty means the grid centre. ``radii`` are Gaussian standard deviations;
    empty means a sixth of the smallest grid extent.
    """

    kind: str = STATIC_BLOB
    centers: tuple = ()
    radii: tuple = ()
    peak: float = 60.0
    velocity: tuple = (0.0, 0.0, 0.0)
    growth_rate: float = 0.0
    frequencies: tuple = ()
    modulation: float = 0.5
    duration: float = 60.0
    sample_period: float = 10.0
    t0: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")
        if self.peak < 0:
            raise ValueError("peak must be non-negative")
        if not self.sample_period > 0 or self.duration < 0:
            raise ValueError("sample_period must be positive and duration non-negative")
        if not 0 <= self.modulation <= 1:
            raise ValueError("modulation depth must lie in [0, 1]")
        vel = tuple(float(v) for v in self.velocity)
        if len(vel) == 2:
            vel = vel + (0.0,)
        object.__setattr__(self, "velocity", vel)

    @property
    def times(self) -> np.ndarray:
        n = int(math.floor(self.duration / self.sample_period + 1e-9)) + 1
        return self.t0 + np.arange(n) * self.sample_period

    @property
    def max_frequency(self) -> float:
        return max(self.frequencies, default=0.0)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["centers"] = [list(c) for c in self.centers]
        d["radii"] = list(self.radii)
        d["velocity"] = list(self.velocity)
        d["frequencies"] = list(self.frequencies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["centers"] = tuple(tuple(float(x) for x in c) for c in d.get("centers", ()))
        d["radii"] = tuple(float(r) for r in d.get("radii", ()))
        d["frequencies"] = tuple(float(f) for f in d.get("frequencies", ()))
        d["velocity"] = tuple(d.get("velocity", (0.0, 0.0, 0.0)))
        return cls(**d)


def _zero_shell(values: np.ndarray) -> np.ndarray:
    values[0, :, :] = values[-1, :, :] = 0.0
    values[:, 0, :] = values[:, -1, :] = 0.0
    values[:, :, 0] = values[:, :, -1] = 0.0
    return values


def generate(spec: PhantomSpec, grid: VoxelGrid) -> FieldSequence:
    """Sample the phantom on ``grid`` at ``spec.times``; deterministic for a given seed."""
    centers = np.array(spec.centers, dtype=float).reshape(-1, 3) if spec.centers else grid.center[None, :]
    default_r = min(grid.upper - grid.lower) / 6.0
    radii = np.array(spec.radii, dtype=float) if spec.radii else np.full(len(centers), default_r)
    if radii.size == 1 and len(centers) > 1:
        radii = np.full(len(centers), radii[0])
    if radii.size != len(centers):
        raise ValueError("need one radius per centre")
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(0.0, 2 * math.pi, size=len(spec.frequencies))
    pts = grid.voxel_centers()
    times = spec.times
    t_mid = spec.t0 + spec.duration / 2.0
    vel = np.array(spec.velocity)
    states = []
    for t in times:
        dt = t - t_mid
        amp = spec.peak
        r_scale = 1.0
        shift = np.zeros(3)
        if spec.kind == TRANSLATING_BLOB:
            shift = vel * dt
        elif spec.kind == GROWING_BLOB:
            r_scale = 1.0 + spec.growth_rate * dt
            if r_scale <= 0:
                raise ValueError("growth rate shrinks the blob to zero within the acquisition")
        elif spec.kind == MULTI_MODE and spec.frequencies:
            osc = np.sin(2 * math.pi * np.array(spec.frequencies) * t + phases).mean()
            amp = spec.peak * (1.0 + spec.modulation * osc)
        vals = np.zeros(grid.size)
        for c, r in zip(centers, radii):
            d2 = np.sum((pts - (c + shift)) ** 2, axis=1)
            vals += amp * np.exp(-0.5 * d2 / (r * r_scale) ** 2)
        vals = _zero_shell(vals.reshape(grid.shape, order="F"))
        states.append(ExtinctionField(grid, vals))
    return FieldSequence(tuple(times), tuple(states))


def center_of_mass(field: ExtinctionField) -> np.ndarray:
    w = field.flat()
    return (field.grid.voxel_centers() * w[:, None]).sum(axis=0) / w.sum()


def bandlimit_check(seq: FieldSequence, fraction: float = 0.95, window: int = 64) -> SpectrumReport:
    """Temporal spectrum of every voxel's series, aggregated."""
    times = np.asarray(seq.times)
    if len(times) < 2:
        raise ValueError("need at least two states for a temporal spectrum")
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
        raise ValueError("spectrum analysis needs uniformly spaced states")
    return spectrum_cutoff(seq.stack().T, float(steps[0]), min(window, len(times)), fraction)
