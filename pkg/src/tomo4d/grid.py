"""Regular voxel grids, extinction fields and 4D field sequences.

Voxel values live at cell centres. The continuous field is the trilinear
interpolant of the centres, clamped to the edge voxel inside the grid's
bounding box and zero outside it. Values are stored as arrays of shape
``(nx, ny, nz)``; the flat order used by files and gradients is x-fastest
(``order="F"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GridMismatchError(ValueError):
    """Raised when two objects that must share a grid do not."""


@dataclass(frozen=True)
class VoxelGrid:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for n in (self.nx, self.ny, self.nz):
            if int(n) != n or n < 1:
                raise ValueError(f"voxel counts must be positive integers, got {n}")
        for d in (self.dx, self.dy, self.dz):
            if not (np.isfinite(d) and d > 0):
                raise ValueError(f"voxel edges must be positive, got {d}")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "nz", int(self.nz))
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dz", float(self.dz))
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise ValueError("origin must be a finite 3-vector")
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def spacing(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.array(self.shape) * self.spacing

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def min_edge(self) -> float:
        return min(self.dx, self.dy, self.dz)

    def compatible(self, other: "VoxelGrid") -> bool:
        return self == other

    def voxel_centers(self) -> np.ndarray:
        """Centres of every voxel in flat (x-fastest) order, shape ``(size, 3)``."""
        ix, iy, iz = np.meshgrid(
            np.arange(self.nx), np.arange(self.ny), np.arange(self.nz), indexing="ij"
        )
        idx = np.stack([ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1)
        return self.lower + (idx + 0.5) * self.spacing

    def flat_index(self, ix, iy, iz):
        return ix + self.nx * (iy + self.ny * iz)

    def coarsen(self, factor: int) -> "VoxelGrid":
        return VoxelGrid(
            -(-self.nx // factor), -(-self.ny // factor), -(-self.nz // factor),
            self.dx * factor, self.dy * factor, self.dz * factor, self.origin,
        )

    def to_dict(self) -> dict:
        return {
            "nx": self.nx, "ny": self.ny, "nz": self.nz,
            "dx": self.dx, "dy": self.dy, "dz": self.dz,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGrid":
        return cls(d["nx"], d["ny"], d["nz"], d["dx"], d["dy"], d["dz"],
                   tuple(d.get("origin", (0.0, 0.0, 0.0))))


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=float, copy=True)
    values.flags.writeable = False
    return values


@dataclass(frozen=True, eq=False)
class ExtinctionField:
    """One 3D extinction state, km^-1 per voxel."""

    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            if values.size != self.grid.size:
                raise GridMismatchError(f"expected {self.grid.size} values, got {values.size}")
            values = values.reshape(self.grid.shape, order="F")
        if values.shape != self.grid.shape:
            raise GridMismatchError(f"values shape {values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("extinction values must be finite")
        if np.any(values < 0):
            raise ValueError("extinction values must be non-negative")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def zeros(cls, grid: VoxelGrid) -> "ExtinctionField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: VoxelGrid, value: float) -> "ExtinctionField":
        return cls(grid, np.full(grid.shape, float(value)))

    def flat(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def mass(self) -> float:
        """L1 norm of the voxel values."""
        return float(np.abs(self.values).sum())


@dataclass(frozen=True, eq=False)
class FieldSequence:
    """States sampled at strictly increasing times, all on one grid."""

    times: tuple[float, ...]
    states: tuple[ExtinctionField, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        states = tuple(self.states)
        if len(times) < 1 or len(times) != len(states):
            raise ValueError("need one state per time and at least one state")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("times must be strictly increasing")
        grid = states[0].grid
        if any(s.grid != grid for s in states):
            raise GridMismatchError("all states must share one grid")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def grid(self) -> VoxelGrid:
        return self.states[0].grid

    def __len__(self) -> int:
        return len(self.states)

    def stack(self) -> np.ndarray:
        """States as an ``(n_state, n_voxel)`` array in flat order."""
        return np.stack([s.flat() for s in self.states])

    @classmethod
    def from_stack(cls, grid: VoxelGrid, times: Sequence[float], stack: np.ndarray) -> "FieldSequence":
        return cls(tuple(times), tuple(ExtinctionField(grid, row) for row in np.asarray(stack)))


@dataclass(frozen=True, eq=False)
class CarveMask:
    grid: VoxelGrid
    flags: np.ndarray = field(repr=False)

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        if flags.ndim == 1:
            if flags.size != self.grid.size:
                raise GridMismatchError("flag count must equal voxel count")
            flags = flags.reshape(self.grid.shape, order="F")
        if flags.shape != self.grid.shape:
            raise GridMismatchError("flag count must equal voxel count")
        flags = flags.copy()
        flags.flags.writeable = False
        object.__setattr__(self, "flags", flags)

    @classmethod
    def full(cls, grid: VoxelGrid, value: bool = True) -> "CarveMask":
        return cls(grid, np.full(grid.shape, value))

    def flat(self) -> np.ndarray:
        return self.flags.ravel(order="F")

    def count(self) -> int:
        return int(self.flags.sum())


def trilinear_weights(grid: VoxelGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat voxel indices and weights of the 8 interpolation corners.

    Returns ``(idx, w)`` of shape ``(n, 8)``. Points outside the bounding box
    get all-zero weights (their indices are valid but irrelevant).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lo, hi = grid.lower, grid.upper
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    dims = np.array(grid.shape)
    u = (pts - lo) / grid.spacing - 0.5
    u = np.clip(u, 0.0, dims - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
    frac = u - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    idx = np.empty((pts.shape[0], 8), dtype=np.int64)
    w = np.empty((pts.shape[0], 8))
    k = 0
    for cz in (0, 1):
        z = i1[:, 2] if cz else i0[:, 2]
        wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
        for cy in (0, 1):
            y = i1[:, 1] if cy else i0[:, 1]
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            for cx in (0, 1):
                x = i1[:, 0] if cx else i0[:, 0]
                wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
                idx[:, k] = x + grid.nx * (y + grid.ny * z)
                w[:, k] = wx * wy * wz
                k += 1
    w[~inside] = 0.0
    return idx, w


def _lerp(a, b, f):
    # exact at f = 0, f = 1 and for a == b
    d = b - a
    return np.where(f < 0.5, a + f * d, b - (1.0 - f) * d)


def sample_many(field: ExtinctionField, points: np.ndarray) -> np.ndarray:
    """Interpolated extinction at many points, by successive linear blends along x, y, z."""
    idx, w = trilinear_weights(field.grid, points)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    grid = field.grid
    u = np.clip((pts - grid.lower) / grid.spacing - 0.5, 0.0, np.array(grid.shape) - 1)
    frac = u - np.minimum(np.floor(u), np.maximum(np.array(grid.shape) - 2, 0))
    c = field.flat()[idx]  # corner order: x fastest, then y, then z
    x = _lerp(c[:, 0::2], c[:, 1::2], frac[:, [0]])
    y = _lerp(x[:, 0::2], x[:, 1::2], frac[:, [1]])
    z = _lerp(y[:, 0], y[:, 1], frac[:, 2])
    return np.where(w.any(axis=1), z, 0.0)


def trilinear_sample(field: ExtinctionField, point) -> float:
    """Extinction (km^-1) at a point in metres; zero outside the bounding box."""
    point = np.asarray(point, dtype=float)
    if point.shape != (3,) or not np.all(np.isfinite(point)):
        raise ValueError("point must be a finite 3-vector")
    return float(sample_many(field, point[None, :])[0])


def mask_apply(field: ExtinctionField, mask: CarveMask) -> ExtinctionField:
    if field.grid != mask.grid:
        raise GridMismatchError("field and mask grids differ")
    return ExtinctionField(field.grid, np.where(mask.flags, field.values, 0.0))
