"""Differentiable image formation for extinction fields.

Two optics modes are provided:

``linear``
    Pure attenuation. A pixel sees a background radiance (plus an optional
    sunlit Lambertian ground) through the medium along its central ray.

``single_scatter``
    Sunlight scattered once inside the medium (Henyey-Greenstein phase
    function) plus the sunlit Lambertian ground, both attenuated toward the
    camera.

Rays are integrated with a fixed-step midpoint rule. Everything that depends
on geometry only (sample positions, trilinear weights, air transmittance) is
precomputed once per camera, so a render is a handful of sparse products and
the gradient is their exact adjoint. The optical depth toward the sun is
marched from every voxel centre and trilinearly interpolated at the sample
points (a light volume, one per epoch).

Extinction is in km^-1 and geometry in metres.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .config import thread_count
from .geometry import ViewEpoch, camera_rays
from .grid import ExtinctionField, VoxelGrid, trilinear_weights

LINEAR = "linear"
SINGLE_SCATTER = "single_scatter"


@dataclass(frozen=True)
class OpticsModel:
    mode: str = SINGLE_SCATTER
    phase_g: float = 0.85
    single_scatter_albedo: float = 1.0
    surface_albedo: float = 0.0
    air_extinction: float = 0.0
    air_top: float = 10.0e3
    sun_irradiance: float = 1.0
    background: float = 1.0

    def __post_init__(self):
        if self.mode not in (LINEAR, SINGLE_SCATTER):
            raise ValueError(f"unknown optics mode {self.mode!r}")
        if not -1.0 < self.phase_g < 1.0:
            raise ValueError("phase_g must lie in (-1, 1)")
        if not 0.0 <= self.single_scatter_albedo <= 1.0:
            raise ValueError("single_scatter_albedo must lie in [0, 1]")
        if not 0.0 <= self.surface_albedo <= 1.0:
            raise ValueError("surface_albedo must lie in [0, 1]")
        if self.air_extinction < 0 or self.air_top < 0 or self.sun_irradiance < 0 or self.background < 0:
            raise ValueError("air, irradiance and background terms must be non-negative")

    def with_albedo(self, a: float) -> "OpticsModel":
        return OpticsModel(**{**self.to_dict(), "surface_albedo": float(a)})

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "OpticsModel":
        return cls(**d)


@dataclass(frozen=True)
class RenderWorkspace:
    """Ray-march step in metres; ``None`` means half the smallest voxel edge."""

    step: float | None = None

    def resolve(self, grid: VoxelGrid) -> float:
        limit = grid.min_edge / 2.0
        if self.step is None:
            return limit
        if not 0 < self.step <= limit * (1 + 1e-12):
            raise ValueError(f"step must be in (0, {limit}] for this grid")
        return float(self.step)


@dataclass(frozen=True, eq=False)
class ImageSet:
    """Images of one epoch, one ``(rows, cols)`` plane per camera."""

    time: float
    images: tuple[np.ndarray, ...]
    camera_ids: tuple[str, ...] = ()

    def vector(self) -> np.ndarray:
        return np.concatenate([im.ravel() for im in self.images])

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [im.shape for im in self.images]

    def map(self, fn) -> "ImageSet":
        return ImageSet(self.time, tuple(fn(im) for im in self.images), self.camera_ids)


def henyey_greenstein(cos_angle, g: float):
    """Phase function normalised to 1 over the sphere."""
    mu = np.asarray(cos_angle, dtype=float)
    return (1.0 - g * g) / (4.0 * math.pi * (1.0 + g * g - 2.0 * g * mu) ** 1.5)


def _clip_box(grid: VoxelGrid, origins, dirs, t_max=None):
    """Parametric entry/exit of rays with the grid's bounding box (t >= 0)."""
    lo, hi = grid.lower, grid.upper
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    par = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    if t_max is not None:
        t_far = np.minimum(t_far, t_max)
    t_far = np.where(t_far > t_near, t_far, t_near)
    return t_near, t_far


def _march(grid: VoxelGrid, origins, dirs, t_near, t_far, step):
    """Midpoint samples tiling each ray segment. Returns (ray index, points, h in metres)."""
    length = t_far - t_near
    n = np.where(length > 0, np.ceil(length / step - 1e-9).astype(np.int64), 0)
    n = np.maximum(n, (length > 0).astype(np.int64))
    ray = np.repeat(np.arange(origins.shape[0]), n)
    starts = np.concatenate([[0], np.cumsum(n)])
    k = np.arange(ray.size) - starts[ray]
    h = np.zeros(origins.shape[0])
    np.divide(length, n, out=h, where=n > 0)
    t = t_near[ray] + (k + 0.5) * h[ray]
    points = origins[ray] + t[:, None] * dirs[ray]
    return ray, points, h[ray], starts


def _weights_matrix(grid: VoxelGrid, points, scale=None, rows=None, n_rows=None):
    """Sparse matrix of trilinear weights (optionally scaled and summed into ``rows``)."""
    idx, w = trilinear_weights(grid, points)
    if scale is not None:
        w = w * scale[:, None]
    if rows is None:
        rows = np.arange(points.shape[0])
        n_rows = points.shape[0]
    r = np.repeat(rows, 8)
    m = sp.coo_matrix((w.ravel(), (r, idx.ravel())), shape=(n_rows, grid.size))
    m = m.tocsr()
    m.sum_duplicates()
    m.eliminate_zeros()
    return m


def _integral_matrix(grid, origins, dirs, t_near, t_far, step):
    """Matrix mapping voxel values to the optical depth (km^-1 x km) of each ray segment."""
    ray, pts, h, _ = _march(grid, origins, dirs, t_near, t_far, step)
    return _weights_matrix(grid, pts, h / 1000.0, ray, origins.shape[0])


def _air_path(z0, z1, dist, top):
    """Length inside the air layer ``0 <= z <= top`` of straight segments of length ``dist``."""
    lo = np.minimum(z0, z1)
    hi = np.maximum(z0, z1)
    overlap = np.clip(np.minimum(hi, top) - np.maximum(lo, 0.0), 0.0, None)
    span = hi - lo
    flat = span <= 1e-12
    frac = np.where(flat, ((lo >= 0) & (lo <= top)).astype(float), overlap / np.where(flat, 1.0, span))
    return dist * frac


def _air_to_sun(z, sun_z, top):
    if sun_z <= 0:
        return np.full(np.shape(z), np.inf)
    return np.clip(top - np.maximum(z, 0.0), 0.0, None) / sun_z


class _CameraOperator:
    """Precomputed geometry of one camera for one epoch."""

    def __init__(self, grid: VoxelGrid, camera, epoch: ViewEpoch, optics: OpticsModel, step: float):
        origins, dirs = camera_rays(camera)
        self.shape = (camera.rows, camera.cols)
        n_pix = origins.shape[0]
        self.n_pix = n_pix
        sun = epoch.sun_direction
        km_air = optics.air_extinction / 1000.0

        # ground intersection
        down = (dirs[:, 2] < 0) & (origins[:, 2] > 0)
        t_ground = np.where(down, -origins[:, 2] / np.where(down, dirs[:, 2], -1.0), np.inf)
        t_near, t_far = _clip_box(grid, origins, dirs, t_ground)
        ray, pts, h_m, starts = _march(grid, origins, dirs, t_near, t_far, step)
        self.ray = ray
        self.starts = starts
        self.h = h_m / 1000.0
        self.W = _weights_matrix(grid, pts)
        self.A = _weights_matrix(grid, pts, self.h, ray, n_pix)
        self.WT = self.W.T.tocsr()
        self.AT = self.A.T.tocsr()

        # air optical depth, camera leg (to the ground or out of the layer)
        zc = origins[:, 2]
        up = dirs[:, 2] > 0
        air_cam_total = np.zeros(n_pix)
        air_cam_total[down] = _air_path(zc[down], 0.0, t_ground[down], optics.air_top)
        air_cam_total[up] = np.clip(optics.air_top - np.maximum(zc[up], 0.0), 0.0, None) / dirs[up, 2]
        air_cam_total *= km_air
        self.lin_background = optics.background * np.exp(-air_cam_total)

        sunlit = 1.0 if sun[2] > 0 else 0.0
        cos_sun = max(float(sun[2]), 0.0)
        E = optics.sun_irradiance

        # single-scatter per-sample constants
        if optics.mode == SINGLE_SCATTER and ray.size:
            t_s = np.einsum("ij,ij->i", pts - origins[ray], dirs[ray])
            air_cam = km_air * _air_path(pts[:, 2], zc[ray], t_s, optics.air_top)
            air_sun = km_air * _air_to_sun(pts[:, 2], sun[2], optics.air_top) if sunlit else np.zeros(ray.size)
            mu = dirs[ray] @ sun
            phase = henyey_greenstein(mu, optics.phase_g)
            self.ss_const = (self.h * optics.single_scatter_albedo * phase * E * sunlit
                             * np.exp(-air_cam - air_sun))
        else:
            self.ss_const = np.zeros(ray.size)

        # sunlit Lambertian ground seen through the medium
        g_pts = origins + np.where(down, t_ground, 0.0)[:, None] * dirs
        sun_dirs = np.broadcast_to(sun, g_pts.shape)
        gn, gf = _clip_box(grid, g_pts, sun_dirs)
        gf = np.where(down, gf, gn)
        self.G = _integral_matrix(grid, g_pts, sun_dirs, gn, gf, step)
        self.GT = self.G.T.tocsr()
        air_g = np.zeros(n_pix)
        if down.any():
            air_g = km_air * (_air_path(zc, np.zeros(n_pix), np.where(down, t_ground, 0.0), optics.air_top)
                              + (_air_to_sun(np.zeros(n_pix), sun[2], optics.air_top) if sunlit else 0.0))
        self.surf_const = np.where(
            down, optics.surface_albedo * E * cos_sun / math.pi * sunlit * np.exp(-np.where(down, air_g, 0.0)), 0.0)

    # -- segmented prefix sums along rays -------------------------------------------------
    def _prefix_excl(self, v):
        cs = np.cumsum(v)
        offset = np.concatenate([[0.0], cs])[self.starts[:-1]]
        return cs - v - offset[self.ray]

    def _suffix_excl(self, v):
        cs = np.cumsum(v)
        offset = np.concatenate([[0.0], cs])[self.starts[:-1]]
        total = np.bincount(self.ray, v, minlength=self.n_pix)
        return total[self.ray] - (cs - offset[self.ray])

    def forward(self, beta, sun_tau_nodes, mode, gain):
        tau = self.A @ beta
        tau_g = self.G @ beta
        surf = self.surf_const * np.exp(-tau - tau_g)
        cache = {"tau": tau, "surf": surf}
        if mode == LINEAR:
            pix = np.exp(-tau) * self.lin_background + surf
        else:
            b = self.W @ beta
            tau_s = self.W @ sun_tau_nodes
            prefix = self.h * (self._prefix_excl(b) + 0.5 * b)
            e = self.ss_const * np.exp(-prefix - tau_s)
            pix = np.bincount(self.ray, e * b, minlength=self.n_pix) + surf
            cache.update(b=b, e=e)
        return gain * pix, cache

    def adjoint(self, residual, pixels, cache, mode, gain):
        """Gradient of ``sum(residual * pixels)`` w.r.t. voxels, plus the light-volume term."""
        r = residual
        s = gain * cache["surf"]
        if mode == LINEAR:
            grad = self.AT @ (-r * pixels) + self.GT @ (-r * s)
            return grad, None
        b, e = cache["b"], cache["e"]
        rk = r[self.ray]
        direct = gain * rk * e
        u = -direct * b
        db = direct + self.h * (self._suffix_excl(u) + 0.5 * u)
        grad = self.WT @ db + self.AT @ (-r * s) + self.GT @ (-r * s)
        return grad, self.WT @ u


class EpochOperator:
    """All cameras of one epoch plus the epoch's light volume."""

    def __init__(self, grid: VoxelGrid, epoch: ViewEpoch, optics: OpticsModel, step: float):
        self.grid = grid
        self.epoch = epoch
        self.optics = optics
        self.cameras = [_CameraOperator(grid, cam, epoch, optics, step) for cam in epoch.cameras]
        if optics.mode == SINGLE_SCATTER:
            centers = grid.voxel_centers()
            sun_dirs = np.broadcast_to(epoch.sun_direction, centers.shape)
            n, f = _clip_box(grid, centers, sun_dirs)
            self.S = _integral_matrix(grid, centers, sun_dirs, n, f, step)
            self.ST = self.S.T.tocsr()
        else:
            self.S = None

    def render(self, beta, gain):
        nodes = self.S @ beta if self.S is not None else None
        return [op.forward(beta, nodes, self.optics.mode, gain) for op in self.cameras]

    def images(self, beta, gain) -> ImageSet:
        out = self.render(beta, gain)
        return ImageSet(self.epoch.time, tuple(p.reshape(op.shape) for (p, _), op in zip(out, self.cameras)),
                        tuple(c.id for c in self.epoch.cameras))

    def gradient(self, beta, gain, residuals: Sequence[np.ndarray], rendered=None):
        """Sum over cameras (in camera order) of residual-weighted pixel gradients."""
        if rendered is None:
            rendered = self.render(beta, gain)
        grad = np.zeros(self.grid.size)
        light = np.zeros(self.grid.size) if self.S is not None else None
        for op, (pix, cache), r in zip(self.cameras, rendered, residuals):
            g, u = op.adjoint(np.asarray(r, float).ravel(), pix, cache, self.optics.mode, gain)
            grad += g
            if u is not None:
                light += u
        if light is not None:
            grad += self.ST @ light
        return grad

    def value_and_grad(self, beta, gain, data: ImageSet):
        """Half squared residual norm of this epoch and its gradient."""
        rendered = self.render(beta, gain)
        residuals = [pix - y.ravel() for (pix, _), y in zip(rendered, data.images)]
        value = 0.5 * sum(float(r @ r) for r in residuals)
        return value, self.gradient(beta, gain, residuals, rendered), rendered


def parallel_map(fn, items):
    """Order-preserving map over a thread pool sized by ``T4D_THREADS``."""
    items = list(items)
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


class Renderer:
    """Caches per-epoch operators for repeated renders on one grid."""

    def __init__(self, grid: VoxelGrid, epochs: Sequence[ViewEpoch], optics: OpticsModel,
                 gain: float = 1.0, workspace: RenderWorkspace = RenderWorkspace()):
        self.grid = grid
        self.epochs = list(epochs)
        self.optics = optics
        self.gain = float(gain)
        self.step = workspace.resolve(grid)
        self._ops = parallel_map(lambda ep: EpochOperator(grid, ep, optics, self.step), self.epochs)

    def op(self, e: int) -> EpochOperator:
        return self._ops[e]

    def render(self, e: int, beta: np.ndarray) -> ImageSet:
        return self._ops[e].images(_flat(beta, self.grid), self.gain)

    def render_all(self, betas) -> list[ImageSet]:
        return parallel_map(lambda eb: self.render(*eb), list(enumerate(betas)))

    def gradient(self, e: int, beta, residual: ImageSet | Sequence[np.ndarray]) -> np.ndarray:
        images = residual.images if isinstance(residual, ImageSet) else residual
        _check_dims(self._ops[e], images)
        return self._ops[e].gradient(_flat(beta, self.grid), self.gain, images)

    def value_and_grad(self, e: int, beta, data: ImageSet):
        _check_dims(self._ops[e], data.images)
        value, grad, _ = self._ops[e].value_and_grad(_flat(beta, self.grid), self.gain, data)
        return value, grad


def _flat(beta, grid: VoxelGrid) -> np.ndarray:
    if isinstance(beta, ExtinctionField):
        return beta.flat()
    beta = np.asarray(beta, dtype=float)
    if beta.ndim == 3:
        return beta.ravel(order="F")
    return beta


def _check_dims(op: EpochOperator, images) -> None:
    if len(images) != len(op.cameras):
        raise ValueError(f"expected {len(op.cameras)} images, got {len(images)}")
    for im, cam in zip(images, op.cameras):
        if np.asarray(im).size != cam.n_pix:
            raise ValueError(f"image of size {np.asarray(im).size} does not match a {cam.shape} camera")


def _check_field(field: ExtinctionField) -> None:
    if not np.all(np.isfinite(field.values)):
        raise ValueError("field must be finite")


def render(field: ExtinctionField, epoch: ViewEpoch, optics: OpticsModel, gain: float = 1.0,
           workspace: RenderWorkspace = RenderWorkspace()) -> ImageSet:
    _check_field(field)
    op = EpochOperator(field.grid, epoch, optics, workspace.resolve(field.grid))
    return op.images(field.flat(), float(gain))


def render_gradient(field: ExtinctionField, epoch: ViewEpoch, optics: OpticsModel, gain: float,
                    residual: ImageSet, workspace: RenderWorkspace = RenderWorkspace()) -> np.ndarray:
    """Per-voxel gradient of ``sum(residual * pixel)``, shaped like the grid."""
    _check_field(field)
    op = EpochOperator(field.grid, epoch, optics, workspace.resolve(field.grid))
    images = residual.images if isinstance(residual, ImageSet) else residual
    _check_dims(op, images)
    g = op.gradient(field.flat(), float(gain), images)
    return g.reshape(field.grid.shape, order="F")


def render_clear_sky(optics: OpticsModel, epoch: ViewEpoch, gain: float, albedo: float,
                     grid: VoxelGrid | None = None) -> ImageSet:
    """Cloud-free render: only air attenuation and the ground remain."""
    if grid is None:
        grid = VoxelGrid(1, 1, 1, 1.0, 1.0, 1.0, (0.0, 0.0, -10.0))
    return render(ExtinctionField.zeros(grid), epoch, optics.with_albedo(albedo), gain)
