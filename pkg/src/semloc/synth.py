"""Synthetic town of axis-aligned boxes, a z-buffer label/depth renderer, and dataset simulation.

The town is a grid of street segments with buildings, trees, fences and signs on
the sidewalks and cars parked on the streets. Every object is one box with a
unique object id, rendered as the instance id. The ground plane is z = 0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .frames import (CameraIntrinsics, SemanticFrame, _atomic_write, quantize_depth, write_camera,
                     write_frame, write_pose_file)
from .geometry import Pose, look_rotation, so3_exp

VOID = 0
GROUND = 1
STREET = 2
BUILDING = 3
TREE = 4
CAR = 5
FENCE = 6
SIGN = 7
CLASS_NAMES = {VOID: "void", GROUND: "ground", STREET: "street", BUILDING: "building",
               TREE: "tree", CAR: "car", FENCE: "fence", SIGN: "sign"}

SAME_CLASS_GAP = 2.0
OTHER_CLASS_GAP = 0.3
PLACEMENT_TRIES = 300
STREET_HEIGHT = 0.05


class PlacementFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    extent: float = 360.0
    block: float = 45.0
    street_width: float = 8.0
    streets: int = 1000  # street segments, capped by the grid size
    buildings: int = 120
    trees: int = 160
    cars: int = 60
    fences: int = 60
    signs: int = 60
    rng_seed: int = 0

    def __post_init__(self):
        if not self.extent > 0 or not self.block > 0 or not self.street_width > 0:
            raise ValueError("extent, block and street_width must be positive")
        for name in ("streets", "buildings", "trees", "cars", "fences", "signs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True, eq=False)
class Box:
    object_id: int
    class_id: int
    lo: np.ndarray
    hi: np.ndarray


@dataclass(eq=False)
class World:
    objects: list = field(default_factory=list)
    ground_class: int = GROUND
    extent: float = 0.0

    def lo_hi(self):
        if not self.objects:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return (np.array([b.lo for b in self.objects]), np.array([b.hi for b in self.objects]))

    def count(self, class_id):
        return sum(1 for b in self.objects if b.class_id == class_id)

    def to_json(self):
        objs = [{"id": b.object_id, "class": b.class_id, "lo": b.lo.tolist(), "hi": b.hi.tolist()}
                for b in self.objects]
        return json.dumps({"extent": float(self.extent), "ground_class": self.ground_class, "objects": objs},
                          separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        objs = [Box(o["id"], o["class"], np.array(o["lo"], float), np.array(o["hi"], float))
                for o in data["objects"]]
        return cls(objs, data["ground_class"], data["extent"])


# --- world generation --------------------------------------------------

def street_segments(spec):
    """Grid street segments as ``(orientation, fixed coordinate, start, end)``, center-out order."""
    lines = np.arange(0.0, spec.extent + 1e-9, spec.block)
    segs = []
    for fixed in lines:
        for a, b in zip(lines[:-1], lines[1:]):
            segs.append(("h", fixed, a, b))
            segs.append(("v", fixed, a, b))
    c = spec.extent / 2
    segs.sort(key=lambda s: (abs(s[1] - c) + abs((s[2] + s[3]) / 2 - c), s[0], s[1], s[2]))
    return segs[:spec.streets]


def _segment_box(seg, width):
    o, fixed, a, b = seg
    hw = width / 2
    if o == "h":
        return np.array([a, fixed - hw, 0.0]), np.array([b, fixed + hw, STREET_HEIGHT])
    # vertical segments stop at the intersection squares owned by horizontal segments
    return np.array([fixed - hw, a + hw, 0.0]), np.array([fixed + hw, b - hw, STREET_HEIGHT])


def _gap(lo, hi, los, his):
    """Footprint (xy) separation between one box and many; negative when overlapping."""
    d = np.maximum(los[:, :2] - hi[:2], lo[:2] - his[:, :2])
    outside = np.maximum(d, 0.0)
    return np.where((d > 0).any(axis=1), np.linalg.norm(outside, axis=1), d.max(axis=1))


# (setback from street edge, along size, across size, height) ranges; cars use lane offsets
_LAYOUT = {
    BUILDING: ((1.5, 4.0), (8.0, 18.0), (8.0, 14.0), (6.0, 24.0)),
    TREE: ((0.5, 2.0), (2.0, 4.0), None, (4.0, 9.0)),
    FENCE: ((0.3, 1.0), (6.0, 14.0), (0.3, 0.3), (1.2, 2.0)),
    SIGN: ((0.3, 1.0), (0.5, 0.7), None, (2.5, 3.5)),
}


def _propose(rng, cls, seg, spec):
    o, fixed, a, b = seg
    side = rng.choice([-1.0, 1.0])
    hw = spec.street_width / 2
    if cls == CAR:
        along, across, height = 4.5, 1.9, 1.5
        offset = rng.uniform(1.2, hw - across / 2 - 0.2)
        center_across = fixed + side * offset
        z0 = STREET_HEIGHT
    else:
        setback, along_r, across_r, height_r = _LAYOUT[cls]
        along = rng.uniform(*along_r)
        across = along if across_r is None else rng.uniform(*across_r)
        height = rng.uniform(*height_r)
        center_across = fixed + side * (hw + rng.uniform(*setback) + across / 2)
        z0 = 0.0
    center_along = rng.uniform(a + along / 2, b - along / 2) if b - a > along else (a + b) / 2
    if o == "h":
        c = np.array([center_along, center_across])
        half = np.array([along / 2, across / 2])
    else:
        c = np.array([center_across, center_along])
        half = np.array([across / 2, along / 2])
    lo = np.array([c[0] - half[0], c[1] - half[1], z0])
    hi = np.array([c[0] + half[0], c[1] + half[1], z0 + height])
    return lo, hi


def generate_world(spec: WorldSpec) -> World:
    rng = np.random.default_rng(spec.rng_seed)
    world = World(extent=spec.extent)
    next_id = 1
    segs = street_segments(spec)
    street_lo, street_hi = [], []
    for seg in segs:
        lo, hi = _segment_box(seg, spec.street_width)
        if hi[0] - lo[0] <= 0 or hi[1] - lo[1] <= 0:
            continue
        world.objects.append(Box(next_id, STREET, lo, hi))
        street_lo.append(lo)
        street_hi.append(hi)
        next_id += 1
    street_lo = np.array(street_lo).reshape(-1, 3)
    street_hi = np.array(street_hi).reshape(-1, 3)

    placed_lo = np.zeros((0, 3))
    placed_hi = np.zeros((0, 3))
    placed_cls = np.zeros(0, dtype=np.int64)
    plan = [(BUILDING, spec.buildings), (FENCE, spec.fences), (TREE, spec.trees),
            (SIGN, spec.signs), (CAR, spec.cars)]
    for cls, count in plan:
        if count and not segs:
            raise PlacementFailure(f"no streets to place {CLASS_NAMES[cls]} objects along")
        for n in range(count):
            for _ in range(PLACEMENT_TRIES):
                seg = segs[rng.integers(len(segs))]
                lo, hi = _propose(rng, cls, seg, spec)
                if lo[0] < 0 or lo[1] < 0 or hi[0] > spec.extent or hi[1] > spec.extent:
                    continue
                if cls != CAR and len(street_lo) and (_gap(lo, hi, street_lo, street_hi) < 0.05).any():
                    continue
                if len(placed_lo):
                    gaps = _gap(lo, hi, placed_lo, placed_hi)
                    need = np.where(placed_cls == cls, SAME_CLASS_GAP, OTHER_CLASS_GAP)
                    if (gaps < need).any():
                        continue
                break
            else:
                raise PlacementFailure(
                    f"could not place {CLASS_NAMES[cls]} #{n + 1} in a {spec.extent} m world")
            world.objects.append(Box(next_id, cls, lo, hi))
            next_id += 1
            placed_lo = np.vstack([placed_lo, lo])
            placed_hi = np.vstack([placed_hi, hi])
            placed_cls = np.append(placed_cls, cls)
    return world


# --- rendering ---------------------------------------------------------

def _slab(origin, dirs, lo, hi):
    """Entry parameter of each ray into each box (inf for a miss); dirs (N,3), boxes (B,3)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs[:, None, :]
        t1 = (lo[None] - origin) * inv
        t2 = (hi[None] - origin) * inv
    parallel = dirs[:, None, :] == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside[None], -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside[None], np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin.max(axis=2)
    t_far = tmax.min(axis=2)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def render_frame(world, pose, cam, max_range=60.0, timestamp=0, chunk=4096):
    """Label, instance and depth grids seen by a camera at ``pose``.

    Each pixel takes the nearest box along its ray, else the ground plane, else
    void. Depth is the camera-frame z of the hit point; hits farther than
    ``max_range`` along the ray are void with zero depth.
    """
    h, w = cam.height, cam.width
    vv, uu = np.mgrid[0:h, 0:w]
    rays_cam = cam.rays(uu.ravel(), vv.ravel())
    R = pose.rotation
    origin = pose.trans
    dirs = rays_cam @ R.T
    norms = np.linalg.norm(rays_cam, axis=1)

    lo, hi = world.lo_hi()
    if len(lo):
        centers = (lo + hi) / 2
        radius = np.linalg.norm(hi - lo, axis=1) / 2
        rel = centers - origin
        near = np.linalg.norm(rel, axis=1) - radius <= max_range
        ahead = rel @ R[:, 2] + radius > 0
        keep = np.nonzero(near & ahead)[0]
        lo, hi = lo[keep], hi[keep]
        ids = np.array([world.objects[k].object_id for k in keep], dtype=np.int64)
        cls = np.array([world.objects[k].class_id for k in keep], dtype=np.int64)
    n = len(dirs)
    depth = np.full(n, np.inf)
    label = np.zeros(n, dtype=np.int64)
    inst = np.zeros(n, dtype=np.int64)

    if origin[2] > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
        ground = np.isfinite(tg)
        depth[ground] = tg[ground]
        label[ground] = world.ground_class

    if len(lo):
        for s in range(0, n, chunk):
            sl = slice(s, s + chunk)
            t = _slab(origin, dirs[sl], lo, hi)
            k = np.argmin(t, axis=1)
            tk = t[np.arange(len(k)), k]
            closer = tk < depth[sl]
            idx = np.nonzero(closer)[0] + s
            depth[idx] = tk[closer]
            label[idx] = cls[k[closer]]
            inst[idx] = ids[k[closer]]

    far = ~np.isfinite(depth) | (depth * norms > max_range)
    depth[far] = 0.0
    label[far] = VOID
    inst[far] = 0
    return SemanticFrame(label.reshape(h, w), depth.reshape(h, w), pose, cam,
                         inst.reshape(h, w), timestamp=timestamp)


# --- trajectories and datasets -----------------------------------------

_KIND_DEFAULTS = {
    "forward": (1.6, 0.0, 0.0),
    "rear": (1.6, 0.0, np.pi),
    "aerial": (30.0, -np.pi / 2, 0.0),
}


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "forward"
    path: tuple = ((30.0, 180.0), (330.0, 180.0))
    step: float = 5.0
    height: float | None = None
    pitch: float | None = None  # radians, positive up

    def __post_init__(self):
        if self.kind not in _KIND_DEFAULTS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if len(self.path) < 2:
            raise ValueError("path needs at least two points")


def trajectory_poses(traj: TrajectorySpec):
    """Camera poses every ``step`` meters along the path polyline."""
    height, pitch, yaw_offset = _KIND_DEFAULTS[traj.kind]
    height = traj.height if traj.height is not None else height
    pitch = traj.pitch if traj.pitch is not None else pitch
    pts = np.asarray(traj.path, dtype=float)
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    poses = []
    n = int(np.floor(cum[-1] / traj.step + 1e-9)) + 1
    for k in range(n):
        s = k * traj.step
        i = min(np.searchsorted(cum, s, side="right") - 1, len(seg_len) - 1)
        d = (pts[i + 1] - pts[i]) / seg_len[i]
        xy = pts[i] + d * (s - cum[i])
        yaw = np.arctan2(d[1], d[0]) + yaw_offset
        poses.append(Pose.from_rt(look_rotation(yaw, pitch), [xy[0], xy[1], height]))
    return poses


def noisy_odometry(gt_poses, sigma_t, sigma_r=0.0, rng_seed=0, origin=None):
    """Odometry by integrating the true increments perturbed with Gaussian noise.

    The first odometry pose equals ``origin @ gt_poses[0]``.
    """
    rng = np.random.default_rng(rng_seed)
    origin = Pose.identity() if origin is None else origin
    odom = [origin @ gt_poses[0]]
    for a, b in zip(gt_poses[:-1], gt_poses[1:]):
        rel = a.inverse() @ b
        if sigma_t > 0 or sigma_r > 0:
            dt = rng.normal(0.0, sigma_t, 3) if sigma_t > 0 else np.zeros(3)
            dr = rng.normal(0.0, sigma_r, 3) if sigma_r > 0 else np.zeros(3)
            rel = Pose.from_rt(rel.rotation @ so3_exp(dr), rel.trans + dt)
        odom.append(odom[-1] @ rel)
    return odom


def flip_labels(frame, rate, rng):
    """Replace a ``rate`` fraction of non-void labels by random other classes present in the world."""
    if rate <= 0:
        return frame
    labels = frame.labels.copy()
    mask = (labels != VOID) & (rng.random(labels.shape) < rate)
    choices = np.array(sorted(c for c in CLASS_NAMES if c != VOID))
    labels[mask] = rng.choice(choices, size=int(mask.sum()))
    return replace(frame, labels=labels)


@dataclass(frozen=True)
class SimulationResult:
    gt_poses: list
    odom_poses: list
    frames: list


def simulate_dataset(world, traj, cam, out_dir=None, odom_noise=0.0, odom_rot_noise=0.0, rng_seed=0,
                     odom_origin=None, label_flip_rate=0.0, max_range=60.0):
    """Render a trajectory and write it in the frame dataset layout.

    Frames carry noisy odometry poses while rendering uses the true poses;
    ``gt_poses.txt`` stores the true poses in the same line format as ``pose.txt``.
    Depth is rounded to millimeters, as stored on disk.
    """
    gt = trajectory_poses(traj)
    odom = noisy_odometry(gt, odom_noise, odom_rot_noise, rng_seed, odom_origin)
    flip_rng = np.random.default_rng([rng_seed, 1])
    frames = []
    for i, (g, o) in enumerate(zip(gt, odom)):
        f = render_frame(world, g, cam, max_range=max_range, timestamp=i)
        f = flip_labels(f, label_flip_rate, flip_rng)
        frames.append(replace(f, depth=quantize_depth(f.depth), odom_pose=o))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_camera(out, cam)
        for i, f in enumerate(frames):
            write_frame(out, i, f)
        write_pose_file(out / "gt_poses.txt", gt)
        _atomic_write(out / "world.json", world.to_json().encode("ascii"))
    return SimulationResult(gt, odom, frames)


def default_camera(width=160, height=120, fx=100.0):
    return CameraIntrinsics(fx, fx, (width - 1) / 2, (height - 1) / 2, width, height)


def spec_to_dict(spec):
    return asdict(spec)
