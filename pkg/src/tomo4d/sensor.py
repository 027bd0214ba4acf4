"""Sensor noise: photon shot noise, readout noise, full-well clipping, quantisation.

Random draws use numpy's PCG64 generator. Each image gets its own stream,
seeded from ``SeedSequence(seed, spawn_key=(epoch, camera))``, so the
output does not depend on the order or parallelism of the calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ImageSet


@dataclass(frozen=True)
class SensorModel:
    full_well: float = 200_000.0
    readout_sigma: float = 20.0
    bits: int = 9
    # rendered intensity 1.0 sits at half the full well
    electrons_per_unit: float = 100_000.0
    seed: int = 0

    def __post_init__(self):
        if not self.full_well > 0:
            raise ValueError("full_well must be positive")
        if not 1 <= int(self.bits) <= 16 or int(self.bits) != self.bits:
            raise ValueError("bits must be an integer in [1, 16]")
        if self.readout_sigma < 0:
            raise ValueError("readout_sigma must be >= 0")
        if not self.electrons_per_unit > 0:
            raise ValueError("electrons_per_unit must be positive")

    @property
    def levels(self) -> int:
        return 2 ** int(self.bits)

    @property
    def quantum(self) -> float:
        """Electrons between adjacent output levels."""
        return self.full_well / (self.levels - 1)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        return cls(**d)


def image_rng(seed: int, epoch: int, camera: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(epoch, camera))))


def noisy_electrons(expected: np.ndarray, model: SensorModel, rng: np.random.Generator) -> np.ndarray:
    """One noisy, clipped and quantised electron count per pixel."""
    expected = np.asarray(expected, dtype=float)
    if np.any(expected < 0) or not np.all(np.isfinite(expected)):
        raise ValueError("expected intensities must be finite and non-negative")
    e = rng.poisson(expected * model.electrons_per_unit).astype(float)
    if model.readout_sigma > 0:
        e += rng.normal(0.0, model.readout_sigma, size=e.shape)
    e = np.clip(e, 0.0, model.full_well)
    q = model.quantum
    return np.rint(e / q) * q


def apply_noise_array(expected: np.ndarray, model: SensorModel, rng: np.random.Generator) -> np.ndarray:
    return noisy_electrons(expected, model, rng) / model.electrons_per_unit


def apply_noise(expected: ImageSet, model: SensorModel, epoch_index: int = 0) -> ImageSet:
    """Raw measurements for one epoch, in the same intensity units as the input."""
    out = []
    for c, im in enumerate(expected.images):
        rng = image_rng(model.seed, epoch_index, c)
        out.append(apply_noise_array(im, model, rng))
    return ImageSet(expected.time, tuple(out), expected.camera_ids)
