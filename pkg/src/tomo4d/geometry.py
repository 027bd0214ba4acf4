"""Cameras, acquisition epochs and viewing geometry.

World frame is local East-North-Up in metres, with the ground at ``z = 0``.
Angles passed to the public constructors are in degrees unless stated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .grid import VoxelGrid

PERSPECTIVE = "perspective"
PUSHBROOM = "pushbroom"

EARTH_RADIUS = 6371.0e3

#: Along-track view angles of the AirMSPI PODEX step-and-stare sequence, degrees.
PODEX_ANGLES = (65.0, 62.0, 58.0, 54.0, 50.0, 44.0, 38.0, 30.0, 21.0, 11.0, 0.0,
                -11.0, -21.0, -30.0, -38.0, -44.0, -50.0, -54.0, -58.0, -62.0, -65.0)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length direction")
    return v / n


def heading_vector(heading_deg: float) -> np.ndarray:
    """Horizontal unit vector for a heading measured clockwise from North."""
    h = math.radians(heading_deg)
    return np.array([math.sin(h), math.cos(h), 0.0])


def sun_vector(zenith_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit vector pointing toward the sun."""
    z, a = math.radians(zenith_deg), math.radians(azimuth_deg)
    return np.array([math.sin(z) * math.sin(a), math.sin(z) * math.cos(a), math.cos(z)])


def look_at(position, target, up_hint=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Orientation rows (view, up, right) for a camera aimed at ``target``."""
    f = _unit(np.asarray(target, float) - np.asarray(position, float))
    hint = np.asarray(up_hint, dtype=float)
    if abs(np.dot(_unit(hint), f)) > 0.999:
        hint = np.array([1.0, 0.0, 0.0]) if abs(f[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    r = _unit(np.cross(f, hint))
    u = np.cross(r, f)
    return np.stack([f, u, r])


@dataclass(frozen=True, eq=False)
class Camera:
    """Central-ray camera.

    ``orientation`` rows are (view direction, up, right). A pushbroom camera
    images one line of ``cols`` pixels per ``line_period``; row ``r`` at epoch
    offset ``t`` is acquired from ``position + velocity * (t + r * line_period)``.
    """

    kind: str
    position: np.ndarray
    orientation: np.ndarray
    rows: int
    cols: int
    pitch: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    line_period: float = 0.0
    id: str = "cam"

    def __post_init__(self):
        if self.kind not in (PERSPECTIVE, PUSHBROOM):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        rot = np.asarray(self.orientation, dtype=float).reshape(3, 3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera orientation must be orthonormal")
        object.__setattr__(self, "orientation", rot)
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise ValueError("pixel counts must be >= 1")
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        if not self.pitch > 0:
            raise ValueError("pixel pitch must be positive")
        if self.kind == PUSHBROOM and not self.line_period > 0:
            raise ValueError("pushbroom camera needs a positive line period")

    @property
    def n_pixels(self) -> int:
        return self.rows * self.cols

    @property
    def view(self) -> np.ndarray:
        return self.orientation[0]

    @property
    def center_position(self) -> np.ndarray:
        """Position at which the image centre is acquired."""
        if self.kind == PUSHBROOM:
            return self.position + self.velocity * self.line_period * (self.rows - 1) / 2.0
        return self.position

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "position": self.position.tolist(),
            "orientation": self.orientation.tolist(),
            "rows": self.rows,
            "cols": self.cols,
            "pitch": self.pitch,
            "velocity": self.velocity.tolist(),
            "line_period": self.line_period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["kind"], d["position"], d["orientation"], d["rows"], d["cols"], d["pitch"],
                   d.get("velocity", [0.0, 0.0, 0.0]), d.get("line_period", 0.0), d.get("id", "cam"))


@dataclass(frozen=True, eq=False)
class ViewEpoch:
    """One acquisition time with its simultaneous cameras and the sun."""

    time: float
    cameras: tuple[Camera, ...]
    sun_direction: np.ndarray

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise ValueError("an epoch needs at least one camera")
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "sun_direction", _unit(self.sun_direction))

    @property
    def sun_zenith(self) -> float:
        return float(math.acos(np.clip(self.sun_direction[2], -1.0, 1.0)))

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "sun_direction": self.sun_direction.tolist(),
            "sun_zenith": self.sun_zenith,
            "cameras": [c.to_dict() for c in self.cameras],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewEpoch":
        return cls(d["time"], tuple(Camera.from_dict(c) for c in d["cameras"]), d["sun_direction"])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class SunPath:
    """Sun zenith/azimuth (degrees) interpolated linearly between start and end."""

    zenith_start: float = 30.0
    azimuth_start: float = 180.0
    zenith_end: float | None = None
    azimuth_end: float | None = None

    def direction(self, frac: float) -> np.ndarray:
        z1 = self.zenith_start if self.zenith_end is None else self.zenith_end
        a1 = self.azimuth_start if self.azimuth_end is None else self.azimuth_end
        z = self.zenith_start + frac * (z1 - self.zenith_start)
        a = self.azimuth_start + frac * (a1 - self.azimuth_start)
        return sun_vector(z, a)


def _pixel_directions(camera: Camera, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    f, u, r = camera.orientation
    alpha = (cols - (camera.cols - 1) / 2.0) * camera.pitch
    if camera.kind == PUSHBROOM:
        beta = np.zeros_like(alpha)
    else:
        beta = ((camera.rows - 1) / 2.0 - rows) * camera.pitch
    ca = np.cos(alpha)[:, None]
    d = ca * (np.cos(beta)[:, None] * f + np.sin(beta)[:, None] * u) + np.sin(alpha)[:, None] * r
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def ray_for_pixel(camera: Camera, row: float, col: float, t: float = 0.0) -> Ray:
    """Central ray through a (possibly fractional) pixel position.

    For pushbroom cameras ``t`` is the time offset within the epoch and
    shifts the line origin along the trajectory.
    """
    if not (-0.5 <= row <= camera.rows - 0.5 and -0.5 <= col <= camera.cols - 0.5):
        raise IndexError(f"pixel ({row}, {col}) outside a {camera.rows}x{camera.cols} image")
    d = _pixel_directions(camera, np.array([float(row)]), np.array([float(col)]))[0]
    if camera.kind == PUSHBROOM:
        origin = camera.position + camera.velocity * (t + row * camera.line_period)
    else:
        origin = camera.position.copy()
    return Ray(origin, d)


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and directions of every pixel in row-major order."""
    rr, cc = np.meshgrid(np.arange(camera.rows, dtype=float), np.arange(camera.cols, dtype=float),
                         indexing="ij")
    rows, cols = rr.ravel(), cc.ravel()
    dirs = _pixel_directions(camera, rows, cols)
    if camera.kind == PUSHBROOM:
        origins = camera.position + np.outer(rows * camera.line_period, camera.velocity)
    else:
        origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def project_point(camera: Camera, point) -> tuple[float, float]:
    """Fractional (row, col) whose central ray passes through ``point``.

    Inverse of :func:`ray_for_pixel`; the result may fall outside the image.
    """
    point = np.asarray(point, dtype=float)
    f, u, r = camera.orientation
    if camera.kind == PUSHBROOM:
        rate = float(camera.velocity @ u) * camera.line_period
        if abs(rate) < 1e-15:
            raise ValueError("pushbroom camera does not sweep across its lines")
        row = float((point - camera.position) @ u) / rate
        origin = camera.position + camera.velocity * camera.line_period * row
    else:
        origin = camera.position
    d = point - origin
    a, b, c = float(d @ f), float(d @ u), float(d @ r)
    alpha = math.atan2(c, math.hypot(a, b))
    col = alpha / camera.pitch + (camera.cols - 1) / 2.0
    if camera.kind == PERSPECTIVE:
        if a <= 0:
            raise ValueError("point is behind the camera")
        row = (camera.rows - 1) / 2.0 - math.atan2(b, a) / camera.pitch
    return row, col


def angular_extent(epochs: Sequence[ViewEpoch], target) -> float:
    """Largest angle (radians) between any two camera-to-target directions."""
    if not epochs:
        raise ValueError("need at least one epoch")
    target = np.asarray(target, dtype=float)
    dirs = []
    for ep in epochs:
        for cam in ep.cameras:
            v = target - cam.center_position
            dirs.append(v / np.linalg.norm(v))
    d = np.array(dirs)
    cosines = np.clip(d @ d.T, -1.0, 1.0)
    return float(np.arccos(cosines.min()))


def view_zenith(camera: Camera, target) -> float:
    """Signed view zenith (radians) of the line of sight, positive toward +x of the track."""
    v = camera.center_position - np.asarray(target, dtype=float)
    horiz = math.hypot(v[0], v[1])
    sign = 1.0 if (v[0] + v[1]) >= 0 else -1.0
    return sign * math.atan2(horiz, v[2])


def fit_image_size(camera: Camera, grid: VoxelGrid, margin: int = 1) -> Camera:
    """Resize a camera's pixel grid (keeping it centred) to cover the grid's bounding box."""
    lo, hi = grid.lower, grid.upper
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    f, u, r = camera.orientation
    if camera.kind == PERSPECTIVE:
        d = corners - camera.position
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        alpha = np.arcsin(np.clip(d @ r, -1, 1))
        beta = np.arctan2(d @ u, d @ f)
        half_c = int(math.ceil(np.abs(alpha).max() / camera.pitch)) + margin
        half_r = int(math.ceil(np.abs(beta).max() / camera.pitch)) + margin
        return replace(camera, rows=2 * half_r + 1, cols=2 * half_c + 1)
    # pushbroom: cross-track span from angles, along-track span from line offsets
    center = camera.center_position
    d = corners - center
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    alpha = np.arcsin(np.clip(d @ r, -1, 1))
    half_c = int(math.ceil(np.abs(alpha).max() / camera.pitch)) + margin
    normal = np.cross(f, r)
    step = camera.velocity * camera.line_period
    denom = float(normal @ step)
    offsets = ((corners - center) @ normal) / denom
    half_r = int(math.ceil(np.abs(offsets).max())) + margin
    rows = 2 * half_r + 1
    start = center - step * half_r
    return replace(camera, position=start, rows=rows, cols=2 * half_c + 1)


def orbit_position(arc: float, altitude: float, track: np.ndarray, target: np.ndarray,
                   earth_radius: float | None) -> np.ndarray:
    """Satellite position ``arc`` metres of orbit arc away from the point above ``target``."""
    if earth_radius is None or math.isinf(earth_radius):
        return target + arc * track + np.array([0.0, 0.0, altitude])
    radius = earth_radius + altitude
    phi = arc / radius
    return target + radius * math.sin(phi) * track + np.array([0.0, 0.0, radius * math.cos(phi) - earth_radius])


def make_orbit_epochs(n_sats: int, altitude: float, arc_spacing: float, speed: float,
                      interval: float, n_epochs: int, target, *, heading: float = 90.0,
                      earth_radius: float | None = EARTH_RADIUS, gsd: float = 10.0,
                      image_size: tuple[int, int] = (1, 1), grid: VoxelGrid | None = None,
                      sun: SunPath = SunPath(), t0: float = 0.0) -> list[ViewEpoch]:
    """A train of satellites, one perspective camera each, imaging every ``interval`` seconds.

    At the mid acquisition time the train is centred over ``target``. The
    pixel pitch is ``gsd / altitude``. If ``grid`` is given the image size is
    fitted to cover it, otherwise ``image_size`` is used.
    """
    if n_sats < 1 or n_epochs < 1:
        raise ValueError("need at least one satellite and one epoch")
    if not (altitude > 0 and speed >= 0 and interval >= 0 and arc_spacing >= 0):
        raise ValueError("orbit magnitudes must be positive")
    target = np.asarray(target, dtype=float)
    track = heading_vector(heading)
    t_mid = (n_epochs - 1) * interval / 2.0
    slots = (np.arange(n_sats) - (n_sats - 1) / 2.0) * arc_spacing
    pitch = gsd / altitude
    epochs = []
    for k in range(n_epochs):
        t = k * interval
        frac = t / (2 * t_mid) if t_mid > 0 else 0.0
        cams = []
        for i, s in enumerate(slots):
            pos = orbit_position(s + speed * (t - t_mid), altitude, track, target, earth_radius)
            cam = Camera(PERSPECTIVE, pos, look_at(pos, target, track), image_size[0], image_size[1],
                         pitch, speed * track, 0.0, f"sat{i}")
            if grid is not None:
                cam = fit_image_size(cam, grid)
            cams.append(cam)
        epochs.append(ViewEpoch(t0 + t, tuple(cams), sun.direction(frac)))
    return epochs


def make_pushbroom_epochs(angles: Sequence[float] = PODEX_ANGLES, altitude: float = 20.0e3,
                          interval: float = 20.0, heading: float = 154.0, target=(0.0, 0.0, 0.0), *,
                          speed: float = 200.0, gsd: float = 10.0, cols: int = 1, rows: int = 1,
                          grid: VoxelGrid | None = None, sun: SunPath = SunPath(),
                          t0: float = 0.0) -> list[ViewEpoch]:
    """One step-and-stare pushbroom epoch per along-track view angle.

    Positive angles look ahead along ``heading``. Each camera is placed so its
    boresight hits ``target`` at the given off-nadir angle.
    """
    target = np.asarray(target, dtype=float)
    track = heading_vector(heading)
    pitch = gsd / altitude
    n = len(angles)
    epochs = []
    for k, ang in enumerate(angles):
        if not -90.0 < ang < 90.0:
            raise ValueError(f"view angle {ang} outside (-90, 90)")
        center = target - altitude * math.tan(math.radians(ang)) * track + np.array([0.0, 0.0, altitude])
        velocity = speed * track
        line_period = gsd / speed
        cam = Camera(PUSHBROOM, center, look_at(center, target, track), rows, cols, pitch,
                     velocity, line_period, f"view{ang:+.0f}")
        # keep the image centre on the boresight position
        cam = replace(cam, position=center - velocity * line_period * (cam.rows - 1) / 2.0)
        if grid is not None:
            cam = fit_image_size(cam, grid)
        frac = k / (n - 1) if n > 1 else 0.0
        epochs.append(ViewEpoch(t0 + k * interval, (cam,), sun.direction(frac)))
    return epochs


def ring_views(n_views: int, extent_deg: float, distance: float, target, *, heading: float = 90.0,
               gsd: float = 10.0, grid: VoxelGrid | None = None, sun: SunPath = SunPath(),
               time: float = 0.0) -> ViewEpoch:
    """Simultaneous perspective views spread evenly over ``extent_deg`` in a vertical plane."""
    target = np.asarray(target, dtype=float)
    track = heading_vector(heading)
    zeniths = np.radians(np.linspace(-extent_deg / 2.0, extent_deg / 2.0, n_views))
    cams = []
    for i, z in enumerate(zeniths):
        pos = target + distance * (math.sin(z) * track + np.array([0.0, 0.0, math.cos(z)]))
        cam = Camera(PERSPECTIVE, pos, look_at(pos, target, track), 1, 1, gsd / distance, id=f"ring{i}")
        if grid is not None:
            cam = fit_image_size(cam, grid)
        cams.append(cam)
    return ViewEpoch(time, tuple(cams), sun.direction(0.0))


# Desk-scale versions of the three acquisition setups. The orbit train keeps
# the 114 degree mid-time spread of Setup A on a domain a few hundred metres wide.

def setup_a(grid: VoxelGrid, *, n_sats: int = 3, n_epochs: int = 7, interval: float = 10.0,
            mid_extent_deg: float = 114.0, gsd: float | None = None,
            sun: SunPath = SunPath(), t0: float = 0.0) -> list[ViewEpoch]:
    extent_xy = max(grid.upper[0] - grid.lower[0], grid.upper[1] - grid.lower[1])
    altitude = 20.0 * extent_xy
    spacing = altitude * math.tan(math.radians(mid_extent_deg / 2.0))
    # same travel-to-spacing ratio as the 7.35 km/s, 500 km train
    speed = spacing * 7350.0 / 500.0e3
    target = np.array([grid.center[0], grid.center[1], 0.0])
    return make_orbit_epochs(n_sats, altitude, spacing, speed, interval, n_epochs, target,
                             earth_radius=None, gsd=gsd or grid.dx, grid=grid, sun=sun, t0=t0)


def setup_b(grid: VoxelGrid, **kw) -> list[ViewEpoch]:
    kw.setdefault("n_sats", 2)
    return setup_a(grid, **kw)


def setup_c(grid: VoxelGrid, *, interval: float = 10.0, angles: Sequence[float] = PODEX_ANGLES,
            gsd: float | None = None, sun: SunPath = SunPath(), t0: float = 0.0) -> list[ViewEpoch]:
    extent_xy = max(grid.upper[0] - grid.lower[0], grid.upper[1] - grid.lower[1])
    altitude = 20.0 * extent_xy
    target = np.array([grid.center[0], grid.center[1], 0.0])
    return make_pushbroom_epochs(angles, altitude, interval, 90.0, target, speed=altitude / 100.0,
                                 gsd=gsd or grid.dx, grid=grid, sun=sun, t0=t0)


SETUPS = {"A": setup_a, "B": setup_b, "C": setup_c}
