"""Semantic frame dataset format: reading, writing and depth back-projection.

Layout of a dataset directory::

    <root>/camera.txt                      fx fy cx cy width height
    <root>/frames/000000/labels.pgm        16-bit PGM, class id per pixel
    <root>/frames/000000/depth.pgm         16-bit PGM, depth in millimeters (0 = invalid)
    <root>/frames/000000/instances.pgm     optional, instance id per pixel
    <root>/frames/000000/pose.txt          tx ty tz qx qy qz qw

Cameras look along +z of their local frame with +x right and +y down.
Depth is the z-coordinate of the hit point in the camera frame.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, pose_from_values

VOID = 0
DEPTH_SCALE = 1000.0  # millimeters per meter in depth.pgm
MAX_DEPTH = 65535 / DEPTH_SCALE


class FrameFormatError(ValueError):
    """Malformed or inconsistent frame data."""


class NoDepthError(ValueError):
    """Back-projection requested at a pixel without valid depth."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise FrameFormatError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise FrameFormatError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise FrameFormatError("principal point outside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def rays(self, u, v):
        """Camera-frame directions with unit z for pixel coordinates ``u`` (column), ``v`` (row)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def scaled(self, factor):
        """Intrinsics for an image subsampled by an integer ``factor`` at pixel centers."""
        return CameraIntrinsics(self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor,
                                self.width // factor, self.height // factor)


@dataclass(frozen=True, eq=False)
class SemanticFrame:
    labels: np.ndarray
    depth: np.ndarray
    odom_pose: Pose
    camera: CameraIntrinsics
    instances: np.ndarray | None = None
    timestamp: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels)
        depth = np.asarray(self.depth, dtype=float)
        if labels.shape != self.camera.shape:
            raise FrameFormatError(f"label grid {labels.shape} does not match camera {self.camera.shape}")
        if depth.shape != labels.shape:
            raise FrameFormatError(f"depth grid {depth.shape} does not match labels {labels.shape}")
        if np.any(labels < 0):
            raise FrameFormatError("class ids must be non-negative")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise FrameFormatError("depth values must be finite and non-negative")
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "depth", depth)
        if self.instances is not None:
            inst = np.asarray(self.instances)
            if inst.shape != labels.shape:
                raise FrameFormatError(f"instance grid {inst.shape} does not match labels {labels.shape}")
            object.__setattr__(self, "instances", inst.astype(np.int64))
        for arr in (self.labels, self.depth, self.instances):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def shape(self):
        return self.labels.shape


def back_project(frame, u, v, depth=None):
    """3D point in the odometry frame seen at pixel column ``u``, row ``v``.

    ``depth`` overrides the grid value (used for the median-depth blob fallback).
    """
    if depth is None:
        depth = frame.depth[int(v), int(u)]
    if not depth > 0:
        raise NoDepthError(f"no valid depth at pixel (u={u}, v={v})")
    p_cam = depth * frame.camera.rays(u, v)
    return frame.odom_pose.apply(p_cam)


# --- PGM ---------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path):
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FrameFormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FrameFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FrameFormatError(f"{path}: malformed PGM header") from None
    pos += 1  # single whitespace byte after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    if len(data) - pos < count * np.dtype(dtype).itemsize:
        raise FrameFormatError(f"{path}: PGM payload shorter than {width}x{height}")
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return pixels.reshape(height, width).astype(np.int64)


def write_pgm(path, grid):
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("PGM grids must be 2D")
    if grid.size and (grid.min() < 0 or grid.max() > 65535):
        raise ValueError("PGM values must lie in [0, 65535]")
    h, w = grid.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    _atomic_write(path, header + grid.astype(">u2").tobytes())


def _atomic_write(path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# --- text files --------------------------------------------------------

def format_pose(pose):
    return " ".join(repr(x) for x in pose.as_tuple())


def parse_pose_line(line, source="pose"):
    parts = line.split()
    try:
        values = [float(x) for x in parts]
    except ValueError:
        raise FrameFormatError(f"{source}: malformed pose line {line!r}") from None
    if len(values) != 7:
        raise FrameFormatError(f"{source}: expected 7 values, got {len(values)}")
    try:
        return pose_from_values(values)
    except ValueError as exc:
        raise FrameFormatError(f"{source}: {exc}") from None


def read_camera(root):
    path = Path(root) / "camera.txt"
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    parts = path.read_text(encoding="ascii").split()
    if len(parts) != 6:
        raise FrameFormatError(f"{path}: expected 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(x) for x in parts[:4])
        width, height = int(parts[4]), int(parts[5])
    except ValueError:
        raise FrameFormatError(f"{path}: malformed camera line") from None
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def write_camera(root, cam):
    Path(root).mkdir(parents=True, exist_ok=True)
    line = " ".join([repr(float(cam.fx)), repr(float(cam.fy)), repr(float(cam.cx)), repr(float(cam.cy)),
                     str(cam.width), str(cam.height)])
    _atomic_write(Path(root) / "camera.txt", (line + "\n").encode("ascii"))


def frame_dir(root, index):
    return Path(root) / "frames" / f"{index:06d}"


def frame_indices(root):
    frames = Path(root) / "frames"
    if not frames.is_dir():
        return []
    return sorted(int(p.name) for p in frames.iterdir() if p.is_dir() and p.name.isdigit())


def quantize_depth(depth):
    """Depth rounded to the millimeter grid used on disk."""
    depth = np.asarray(depth, dtype=float)
    mm = np.clip(np.rint(depth * DEPTH_SCALE), 0, 65535)
    return mm / DEPTH_SCALE


def write_frame(root, index, frame):
    """Write ``frame`` under ``root``; depth is stored in millimeters, so it is rounded to 1 mm."""
    d = frame_dir(root, index)
    d.mkdir(parents=True, exist_ok=True)
    if np.any(frame.depth > MAX_DEPTH):
        raise ValueError(f"depth beyond {MAX_DEPTH} m cannot be stored")
    write_pgm(d / "labels.pgm", frame.labels)
    write_pgm(d / "depth.pgm", np.rint(frame.depth * DEPTH_SCALE).astype(np.int64))
    if frame.instances is not None:
        write_pgm(d / "instances.pgm", frame.instances)
    _atomic_write(d / "pose.txt", (format_pose(frame.odom_pose) + "\n").encode("ascii"))


def load_frame(root, index, camera=None):
    if camera is None:
        camera = read_camera(root)
    d = frame_dir(root, index)
    for name in ("labels.pgm", "depth.pgm", "pose.txt"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing file: {d / name}")
    labels = read_pgm(d / "labels.pgm")
    depth = read_pgm(d / "depth.pgm") / DEPTH_SCALE
    instances = read_pgm(d / "instances.pgm") if (d / "instances.pgm").is_file() else None
    lines = [ln for ln in (d / "pose.txt").read_text(encoding="ascii").splitlines() if ln.strip()]
    if len(lines) != 1:
        raise FrameFormatError(f"{d / 'pose.txt'}: expected exactly one pose line")
    pose = parse_pose_line(lines[0], str(d / "pose.txt"))
    return SemanticFrame(labels, depth, pose, camera, instances, timestamp=index)


def read_pose_file(path):
    """All poses of a multi-line pose file such as ``gt_poses.txt``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    return [parse_pose_line(ln, str(path))
            for ln in path.read_text(encoding="ascii").splitlines() if ln.strip()]


def write_pose_file(path, poses):
    _atomic_write(path, "".join(format_pose(p) + "\n" for p in poses).encode("ascii"))
