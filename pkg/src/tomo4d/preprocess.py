"""Measurement preparation: cloud altitude from shadows, drift from image
centroids, and surface albedo from cloud-free pixels."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from skimage.filters import threshold_otsu

from .forward import ImageSet, OpticsModel, render_clear_sky
from .geometry import ViewEpoch, ray_for_pixel


@dataclass(frozen=True)
class ShadowObservation:
    cloud_xy: tuple[float, float]
    shadow_xy: tuple[float, float]
    sun_zenith: float  # radians

    def __post_init__(self):
        if not 0.0 < self.sun_zenith < math.pi / 2:
            raise ValueError("sun zenith must lie strictly between 0 and pi/2 radians")


def cloud_height(obs: ShadowObservation) -> float:
    """Altitude from the horizontal cloud-to-shadow distance."""
    r = math.hypot(obs.cloud_xy[0] - obs.shadow_xy[0], obs.cloud_xy[1] - obs.shadow_xy[1])
    t = math.tan(obs.sun_zenith)
    if not math.isfinite(t) or t <= 0 or t > 1e15:
        raise ValueError("degenerate sun zenith")
    return r / t


def center_of_mass(image, threshold: float | None = None) -> tuple[float, float]:
    """Intensity-weighted (row, col) centroid of the pixels brighter than ``threshold``.

    With no threshold, Otsu's between-class variance criterion picks one.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("expected a non-empty 2D image")
    if threshold is None:
        threshold = float(threshold_otsu(image)) if np.ptp(image) > 0 else float(image.flat[0])
    sel = image > threshold
    if not sel.any():
        raise ValueError("no pixel above the threshold")
    w = np.where(sel, image, 0.0)
    rows, cols = np.indices(image.shape)
    total = w.sum()
    return float((rows * w).sum() / total), float((cols * w).sum() / total)


@dataclass(frozen=True)
class DriftEstimate:
    velocity: tuple[float, float]
    heading: float
    altitude: float
    reference_time: float
    reference_point: tuple[float, float]
    # horizontal camera shifts, one per epoch, that register every projection on reference_point
    corrections: tuple[tuple[float, float], ...]
    residual: float

    def to_dict(self) -> dict:
        return {
            "velocity": list(self.velocity), "heading": self.heading, "altitude": self.altitude,
            "reference_time": self.reference_time, "reference_point": list(self.reference_point),
            "corrections": [list(c) for c in self.corrections], "residual": self.residual,
        }


def project_to_altitude(epoch: ViewEpoch, pixel: tuple[float, float], altitude: float, camera: int = 0) -> np.ndarray:
    """Horizontal position where a pixel's ray meets the plane ``z = altitude``."""
    ray = ray_for_pixel(epoch.cameras[camera], pixel[0], pixel[1])
    if abs(ray.direction[2]) < 1e-12:
        raise ValueError("ray is parallel to the altitude plane")
    t = (altitude - ray.origin[2]) / ray.direction[2]
    if t <= 0:
        raise ValueError("altitude plane lies behind the camera")
    return (ray.origin + t * ray.direction)[:2]


def estimate_drift(centroids: Sequence[tuple[float, float]], epochs: Sequence[ViewEpoch],
                   altitude: float, camera: int = 0) -> DriftEstimate:
    """Least-squares horizontal velocity of the projected centroids."""
    if len(epochs) < 2:
        raise ValueError("drift estimation needs at least two epochs")
    if len(centroids) != len(epochs):
        raise ValueError("one centroid per epoch is required")
    pts = np.array([project_to_altitude(ep, c, altitude, camera) for ep, c in zip(epochs, centroids)])
    times = np.array([ep.time for ep in epochs], dtype=float)
    t_ref = float(times.mean())
    design = np.column_stack([np.ones_like(times), times - t_ref])
    coef, *_ = np.linalg.lstsq(design, pts, rcond=None)
    p_ref, vel = coef[0], coef[1]
    resid = pts - design @ coef
    heading = math.degrees(math.atan2(vel[0], vel[1])) % 360.0
    corrections = tuple((float(x), float(y)) for x, y in (p_ref - pts))
    return DriftEstimate(
        velocity=(float(vel[0]), float(vel[1])), heading=heading, altitude=float(altitude),
        reference_time=t_ref, reference_point=(float(p_ref[0]), float(p_ref[1])),
        corrections=corrections, residual=float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1)))),
    )


def register_epochs(epochs: Sequence[ViewEpoch], drift: DriftEstimate) -> list[ViewEpoch]:
    """Shift every camera of each epoch by that epoch's drift correction."""
    if len(epochs) != len(drift.corrections):
        raise ValueError("drift estimate was made for a different number of epochs")
    out = []
    for ep, (cx, cy) in zip(epochs, drift.corrections):
        shift = np.array([cx, cy, 0.0])
        cams = tuple(replace(c, position=c.position + shift) for c in ep.cameras)
        out.append(replace(ep, cameras=cams))
    return out


@dataclass(frozen=True)
class AlbedoResult:
    albedo: float
    objective: float
    n_pixels: int


def estimate_albedo(measured: ImageSet, epoch: ViewEpoch, optics: OpticsModel, gain: float = 1.0,
                    bracket: tuple[float, float] = (0.0, 1.0), masks: Sequence[np.ndarray] | None = None,
                    tol: float = 1e-6) -> AlbedoResult:
    """Surface albedo minimising the squared misfit of cloud-free pixels.

    ``masks`` select the clear pixels of each image; all pixels are used when omitted.
    """
    lo, hi = bracket
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError("albedo bracket must lie within [0, 1]")
    if len(measured.images) != len(epoch.cameras):
        raise ValueError("measured images do not match the epoch's cameras")
    if masks is None:
        masks = [np.ones(im.shape, dtype=bool) for im in measured.images]
    y = np.concatenate([np.asarray(im, dtype=float)[np.asarray(m, dtype=bool)]
                        for im, m in zip(measured.images, masks)])
    if y.size == 0:
        raise ValueError("no clear pixels supplied")

    def predict(a):
        imgs = render_clear_sky(optics, epoch, gain, a).images
        return np.concatenate([im[np.asarray(m, dtype=bool)] for im, m in zip(imgs, masks)])

    # the clear-sky image is affine in the albedo, so two renders define the objective
    p0 = predict(0.0)
    p1 = predict(1.0) - p0

    def objective(a):
        r = y - p0 - a * p1
        return float(r @ r)

    res = minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": tol * 0.1})
    candidates = [float(res.x), lo, hi]
    best = min(candidates, key=objective)
    grid = np.linspace(lo, hi, 101)
    g_best = float(grid[np.argmin([objective(a) for a in grid])])
    if objective(g_best) < objective(best):
        best = g_best
    return AlbedoResult(best, objective(best), int(y.size))
