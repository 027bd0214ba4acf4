"""Occupancy bound from multi-view images by back-projecting cloudy pixels.

Each cloudy pixel's ray is traversed through a coarse voxel grid with a 3D
digital differential analyser. A view votes for a voxel when one of its
cloudy rays crosses it; voxels with more votes than the threshold survive.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .forward import ImageSet, _clip_box
from .geometry import Camera, ViewEpoch, camera_rays
from .grid import CarveMask, VoxelGrid

_CUBE = np.ones((3, 3, 3), dtype=bool)


def traverse(grid: VoxelGrid, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Every (ray, flat voxel) pair where a ray (t >= 0) crosses a voxel.

    Vectorised Amanatides-Woo stepping: all rays advance one voxel per pass.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    t_near, t_far = _clip_box(grid, origins, dirs)
    hit = t_far > t_near
    rays = np.flatnonzero(hit)
    if rays.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    o, d = origins[rays], dirs[rays]
    tn, tf = t_near[rays], t_far[rays]
    n = np.array(grid.shape)
    sp = grid.spacing
    lo = grid.lower
    entry = o + (0.5 * (tn + np.minimum(tf, tn + 1e-9 * grid.min_edge)))[:, None] * d
    idx = np.clip(np.floor((entry - lo) / sp).astype(np.int64), 0, n - 1)
    step = np.where(d > 0, 1, np.where(d < 0, -1, 0))
    with np.errstate(divide="ignore"):
        inv = np.where(d != 0, 1.0 / np.abs(d), np.inf)
    nxt = lo + (idx + (step > 0)) * sp
    t_max = np.where(d != 0, (nxt - o) / np.where(d != 0, d, 1.0), np.inf)
    t_delta = sp * inv
    out_r, out_v = [], []
    active = np.arange(rays.size)
    while active.size:
        i = idx[active]
        out_r.append(rays[active])
        out_v.append(i[:, 0] + n[0] * (i[:, 1] + n[1] * i[:, 2]))
        tm = t_max[active]
        axis = np.argmin(tm, axis=1)
        rows = np.arange(active.size)
        t_next = tm[rows, axis]
        idx[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        inside = np.all((idx[active] >= 0) & (idx[active] < n), axis=1)
        active = active[(t_next < tf[active]) & inside]
    return np.concatenate(out_r), np.concatenate(out_v)


def cloudy_pixels(image: np.ndarray, clear: np.ndarray | None, threshold: float | None) -> np.ndarray:
    """Boolean map of pixels whose departure from the clear-sky prediction exceeds the threshold.

    Without a clear-sky prediction the image median stands in for it. Without
    a threshold, Otsu's method on the departure picks one.
    """
    image = np.asarray(image, dtype=float)
    ref = np.median(image) if clear is None else np.asarray(clear, dtype=float)
    resid = np.abs(image - ref)
    if threshold is None:
        if np.ptp(resid) == 0:
            return np.zeros(image.shape, dtype=bool)
        threshold = float(threshold_otsu(resid))
    return resid > threshold


def view_hits(grid: VoxelGrid, camera: Camera, cloudy: np.ndarray) -> np.ndarray:
    """Flat boolean array of voxels crossed by the camera's cloudy rays."""
    hits = np.zeros(grid.size, dtype=bool)
    sel = np.asarray(cloudy, dtype=bool).ravel()
    if not sel.any():
        return hits
    origins, dirs = camera_rays(camera)
    _, vox = traverse(grid, origins[sel], dirs[sel])
    hits[vox] = True
    return hits


def sees_domain(grid: VoxelGrid, camera: Camera) -> bool:
    origins, dirs = camera_rays(camera)
    t_near, t_far = _clip_box(grid, origins, dirs)
    return bool(np.any(t_far > t_near))


def _upsample(coarse: np.ndarray, fine: VoxelGrid, factor: int) -> np.ndarray:
    ix = np.arange(fine.nx) // factor
    iy = np.arange(fine.ny) // factor
    iz = np.arange(fine.nz) // factor
    return coarse[np.ix_(ix, iy, iz)]


def space_carve(images: Sequence[ImageSet], epochs: Sequence[ViewEpoch], grid: VoxelGrid,
                pixel_threshold: float | None = None, vote_threshold: int | None = None,
                dilate: int = 1, clear_sky: Sequence[ImageSet] | None = None,
                coarse_factor: int = 2, footprint: bool = True) -> CarveMask:
    """Carve the object support.

    ``footprint`` grows each view's crossed set by one coarse voxel before
    voting, so a voxel is credited by a view whenever a cloudy ray passes
    through its interpolation footprint. The default vote threshold is one
    less than the number of cameras that see the domain.
    """
    if len(images) != len(epochs):
        raise ValueError(f"{len(images)} image sets for {len(epochs)} epochs")
    if clear_sky is not None and len(clear_sky) != len(epochs):
        raise ValueError("clear-sky predictions must match the epochs")
    if pixel_threshold is not None and pixel_threshold < 0:
        raise ValueError("pixel_threshold must be >= 0")
    if vote_threshold is not None and vote_threshold < 0:
        raise ValueError("vote_threshold must be >= 0")
    if dilate < 0 or coarse_factor < 1:
        raise ValueError("dilate must be >= 0 and coarse_factor >= 1")
    coarse = grid.coarsen(coarse_factor)
    votes = np.zeros(coarse.size, dtype=np.int64)
    n_seeing = 0
    for e, (imset, ep) in enumerate(zip(images, epochs)):
        if len(imset.images) != len(ep.cameras):
            raise ValueError(f"epoch {e}: {len(imset.images)} images for {len(ep.cameras)} cameras")
        for c, (im, cam) in enumerate(zip(imset.images, ep.cameras)):
            if np.shape(im) != (cam.rows, cam.cols):
                raise ValueError(f"epoch {e} camera {cam.id}: image shape {np.shape(im)} != {(cam.rows, cam.cols)}")
            if sees_domain(coarse, cam):
                n_seeing += 1
            clear = None if clear_sky is None else clear_sky[e].images[c]
            hits = view_hits(coarse, cam, cloudy_pixels(im, clear, pixel_threshold))
            if footprint and hits.any():
                hits = ndimage.binary_dilation(hits.reshape(coarse.shape, order="F"), _CUBE).ravel(order="F")
            votes += hits
    if vote_threshold is None:
        vote_threshold = max(n_seeing - 1, 0)
    keep = (votes > vote_threshold).reshape(coarse.shape, order="F")
    flags = _upsample(keep, grid, coarse_factor)
    if dilate and flags.any():
        flags = ndimage.binary_dilation(flags, _CUBE, iterations=dilate)
    return CarveMask(grid, flags)
