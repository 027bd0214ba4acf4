"""File formats and run manifests.

Field and image files are one line of canonical JSON (sorted keys, compact
separators, newline-terminated) followed by raw little-endian float32 data.
Every write goes to a temporary file in the destination directory and is
renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .forward import ImageSet, OpticsModel
from .geometry import ViewEpoch
from .grid import FieldSequence, VoxelGrid

FIELD_MAGIC = "T4DF"
IMAGE_MAGIC = "T4DI"
VERSION = 1
DTYPE = "f32le"
SCENE_FILE = "scene.json"


class MalformedFileError(ValueError):
    """An input file does not follow its declared format."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _split(blob: bytes, path, magic: str) -> tuple[dict, bytes]:
    nl = blob.find(b"\n")
    if nl < 0:
        raise MalformedFileError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"{path}: bad header ({exc})") from exc
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise MalformedFileError(f"{path}: not a {magic} file")
    if header.get("version") != VERSION:
        raise MalformedFileError(f"{path}: unsupported version {header.get('version')!r}")
    if header.get("dtype") != DTYPE:
        raise MalformedFileError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    return header, blob[nl + 1:]


def _as_f32(values) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.ascontiguousarray(values, dtype="<f4")
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("values are not finite in float32")
    return out


def field_bytes(seq: FieldSequence) -> bytes:
    header = {
        "magic": FIELD_MAGIC, "version": VERSION, "grid": seq.grid.to_dict(),
        "times": [float(t) for t in seq.times], "dtype": DTYPE, "order": "x-fastest",
    }
    body = _as_f32(np.concatenate([s.flat() for s in seq.states])).tobytes()
    return canonical_json(header).encode("utf-8") + b"\n" + body


def write_field(path, seq: FieldSequence) -> None:
    atomic_write_bytes(path, field_bytes(seq))


def read_field(path) -> FieldSequence:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    header, body = _split(blob, path, FIELD_MAGIC)
    if header.get("order") != "x-fastest":
        raise MalformedFileError(f"{path}: unsupported order {header.get('order')!r}")
    try:
        grid = VoxelGrid.from_dict(header["grid"])
        times = [float(t) for t in header["times"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{path}: bad header ({exc})") from exc
    expected = 4 * len(times) * grid.size
    if len(body) != expected:
        raise MalformedFileError(f"{path}: body has {len(body)} bytes, expected {expected}")
    stack = np.frombuffer(body, dtype="<f4").astype(float).reshape(len(times), grid.size)
    try:
        return FieldSequence.from_stack(grid, times, stack)
    except ValueError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc


def image_bytes(image: np.ndarray, time: float, camera_id: str) -> bytes:
    image = np.asarray(image)
    header = {
        "magic": IMAGE_MAGIC, "version": VERSION, "time": float(time), "camera_id": str(camera_id),
        "rows": int(image.shape[0]), "cols": int(image.shape[1]), "dtype": DTYPE,
    }
    return canonical_json(header).encode("utf-8") + b"\n" + _as_f32(image).tobytes()


def write_image(path, image: np.ndarray, time: float, camera_id: str) -> None:
    atomic_write_bytes(path, image_bytes(image, time, camera_id))


def read_image(path) -> tuple[np.ndarray, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    header, body = _split(blob, path, IMAGE_MAGIC)
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{path}: bad header ({exc})") from exc
    if rows < 1 or cols < 1 or len(body) != 4 * rows * cols:
        raise MalformedFileError(f"{path}: body length does not match {rows}x{cols}")
    return np.frombuffer(body, dtype="<f4").astype(float).reshape(rows, cols), header


def epochs_to_json(epochs: Sequence[ViewEpoch]) -> list:
    return [ep.to_dict() for ep in epochs]


def epochs_from_json(obj) -> list[ViewEpoch]:
    if isinstance(obj, dict):
        obj = obj.get("epochs")
    if not isinstance(obj, list):
        raise MalformedFileError("epochs must be a JSON list")
    try:
        return [ViewEpoch.from_dict(e) for e in obj]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"bad epoch description ({exc})") from exc


def write_epochs(path, epochs: Sequence[ViewEpoch]) -> None:
    write_json(path, {"epochs": epochs_to_json(epochs)})


def read_epochs(path) -> list[ViewEpoch]:
    return epochs_from_json(read_json(path))


def image_name(epoch_index: int, camera_id: str) -> str:
    return f"e{epoch_index:03d}_{camera_id}.t4di"


def write_image_dir(directory, images: Sequence[ImageSet], epochs: Sequence[ViewEpoch],
                    grid: VoxelGrid, optics: OpticsModel, gain: float, extra: dict | None = None) -> list[Path]:
    """Write one file per camera image plus ``scene.json`` describing the acquisition."""
    directory = Path(directory)
    paths = []
    files = []
    for e, (imset, ep) in enumerate(zip(images, epochs)):
        names = []
        for im, cam in zip(imset.images, ep.cameras):
            name = image_name(e, cam.id)
            write_image(directory / name, im, ep.time, cam.id)
            names.append(name)
            paths.append(directory / name)
        files.append(names)
    scene = {
        "epochs": epochs_to_json(epochs), "grid": grid.to_dict(), "optics": optics.to_dict(),
        "gain": float(gain), "files": files,
    }
    if extra:
        scene.update(extra)
    write_json(directory / SCENE_FILE, scene)
    paths.append(directory / SCENE_FILE)
    return paths


def read_image_dir(directory) -> tuple[list[ImageSet], list[ViewEpoch], dict]:
    directory = Path(directory)
    scene = read_json(directory / SCENE_FILE)
    epochs = epochs_from_json(scene.get("epochs"))
    files = scene.get("files")
    if not isinstance(files, list) or len(files) != len(epochs):
        raise MalformedFileError(f"{directory}: scene file list does not match the epochs")
    sets = []
    for names, ep in zip(files, epochs):
        if len(names) != len(ep.cameras):
            raise MalformedFileError(f"{directory}: image count does not match the cameras")
        ims = []
        for name, cam in zip(names, ep.cameras):
            im, hdr = read_image(directory / name)
            if im.shape != (cam.rows, cam.cols) or hdr.get("camera_id") != cam.id:
                raise MalformedFileError(f"{directory / name}: does not match camera {cam.id}")
            ims.append(im)
        sets.append(ImageSet(ep.time, tuple(ims), tuple(c.id for c in ep.cameras)))
    return sets, epochs, scene


def write_manifest(path, command: str, argv: Sequence[str], config: dict,
                   inputs: Sequence, outputs: Sequence, metrics: dict | None = None) -> dict:
    """Record what a run consumed and produced. ``created`` is the only wall-clock field."""
    import datetime
    from . import __version__

    manifest = {
        "tool": "tomo4d", "version": __version__, "command": command, "argv": list(argv),
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in _files(inputs)},
        "outputs": {str(p): sha256_file(p) for p in _files(outputs)},
        "metrics": metrics or {},
        "threads_env": os.environ.get("T4D_THREADS", ""),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    write_json(path, manifest)
    return manifest


def _files(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.is_file() and not q.name.startswith(".")))
        elif p.exists():
            out.append(p)
    return out
