"""Connected semantic blobs from label grids."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .frames import VOID

log = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
_REFERENCE_PIXELS = 640 * 480


@dataclass(frozen=True, eq=False)
class Blob:
    class_id: int
    pixels: np.ndarray  # (N, 2) integer (u, v)
    center_px: tuple[int, int]
    center_3d: np.ndarray
    instance_id: int | None = None

    @property
    def size(self):
        return len(self.pixels)


def default_min_blob_size(width, height):
    """200 pixels at 640x480, scaled with the pixel count."""
    return max(1, int(round(200 * width * height / _REFERENCE_PIXELS)))


def default_smoothing_radius(width):
    """4 pixels at 640 columns, scaled with the image width."""
    return max(0, int(round(4 * width / 640)))


def _closing(mask, radius):
    size = 2 * radius + 1
    dilated = ndimage.maximum_filter(mask, size=size, mode="constant", cval=0)
    return ndimage.minimum_filter(dilated, size=size, mode="constant", cval=1)


def smooth_labels(labels, radius, rejected_classes=()):
    """Morphologically close each class mask with a ``(2r+1)``-square element.

    Classes are closed in ascending id order and written back, so higher ids win
    contested pixels. Out-of-image pixels are ignored by both the dilation and the
    erosion, which keeps the closing extensive at the image border.
    """
    labels = np.asarray(labels)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    out = labels.copy()
    if radius == 0:
        return out
    h, w = labels.shape
    pad = 2 * radius
    skip = set(int(c) for c in rejected_classes) | {VOID}
    for c in np.unique(labels):
        if int(c) in skip:
            continue
        rows, cols = np.nonzero(labels == c)
        r0, r1 = max(rows.min() - pad, 0), min(rows.max() + pad + 1, h)
        c0, c1 = max(cols.min() - pad, 0), min(cols.max() + pad + 1, w)
        window = (slice(r0, r1), slice(c0, c1))
        closed = _closing((labels[window] == c).astype(np.uint8), radius).astype(bool)
        out[window][closed] = c
    return out


def segment_keys(labels, instances=None):
    """Integer key per pixel that is unique per (class, instance) and ordered class-major."""
    labels = np.asarray(labels, dtype=np.int64)
    if instances is None:
        return labels, 1
    instances = np.asarray(instances, dtype=np.int64)
    base = int(instances.max()) + 1 if instances.size else 1
    return labels * base + instances, base


def smooth_segments(labels, instances, radius, rejected_classes=()):
    """``smooth_labels`` applied per (class, instance) segment; returns new (labels, instances)."""
    if instances is None:
        return smooth_labels(labels, radius, rejected_classes), None
    keys, base = segment_keys(labels, instances)
    skip = set(int(c) for c in rejected_classes) | {VOID}
    rejected_keys = [k for k in np.unique(keys) if k // base in skip]
    smoothed = smooth_labels(keys, radius, rejected_keys)
    return smoothed // base, smoothed % base


def extract_blobs(frame, min_blob_size=None, rejected_classes=()):
    """Maximal 4-connected components of equal class (and instance, when available).

    Components of void or rejected classes, or smaller than ``min_blob_size``, are
    dropped. Each blob's 3D center is the back-projection of its rounded pixel
    centroid. The depth used is the centroid pixel's own depth when that pixel
    belongs to the blob and is valid, otherwise the median of the blob's valid
    depths. Blobs without any valid depth are dropped with a warning.
    """
    if min_blob_size is None:
        min_blob_size = default_min_blob_size(frame.camera.width, frame.camera.height)
    if min_blob_size < 1:
        raise ValueError("min_blob_size must be >= 1")
    keys, base = segment_keys(frame.labels, frame.instances)
    rejected = set(int(c) for c in rejected_classes) | {VOID}

    comp = np.zeros(keys.shape, dtype=np.int64)
    comp_key = [0]
    n_total = 0
    for key in np.unique(keys):
        if int(key) // base in rejected:
            continue
        lab, n = ndimage.label(keys == key, structure=FOUR_CONNECTED)
        comp[lab > 0] = lab[lab > 0] + n_total
        comp_key.extend([int(key)] * n)
        n_total += n
    if n_total == 0:
        return []

    flat = comp.ravel()
    sizes = np.bincount(flat, minlength=n_total + 1)
    order = np.argsort(flat, kind="stable")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    width = keys.shape[1]
    depth = frame.depth

    kept, centers_px, depths = [], [], []
    for cid in range(1, n_total + 1):
        if sizes[cid] < min_blob_size:
            continue
        idx = order[starts[cid]:starts[cid + 1]]
        v, u = np.divmod(idx, width)
        cu = int(np.floor(u.mean() + 0.5))
        cv = int(np.floor(v.mean() + 0.5))
        d = depth[cv, cu] if comp[cv, cu] == cid else 0.0
        if not d > 0:
            valid = depth[v, u]
            valid = valid[valid > 0]
            if valid.size == 0:
                log.warning("dropping blob of class %d at (%d, %d): no valid depth",
                            comp_key[cid] // base, cu, cv)
                continue
            d = float(np.median(valid))
        kept.append((cid, np.column_stack([u, v])))
        centers_px.append((cu, cv))
        depths.append(d)
    if not kept:
        return []

    centers_px_arr = np.asarray(centers_px, dtype=float)
    rays = frame.camera.rays(centers_px_arr[:, 0], centers_px_arr[:, 1])
    centers_3d = frame.odom_pose.apply(rays * np.asarray(depths)[:, None])

    blobs = []
    for (cid, pixels), cpx, c3 in zip(kept, centers_px, centers_3d):
        key = comp_key[cid]
        blobs.append(Blob(
            class_id=key // base,
            pixels=pixels,
            center_px=cpx,
            center_3d=c3,
            instance_id=(key % base) if frame.instances is not None else None,
        ))
    return blobs


def frame_blobs(frame, min_blob_size=None, smoothing_radius=None, rejected_classes=()):
    """Smooth then extract blobs: the per-frame front end of graph building."""
    if smoothing_radius is None:
        smoothing_radius = default_smoothing_radius(frame.camera.width)
    if smoothing_radius > 0:
        labels, instances = smooth_segments(frame.labels, frame.instances, smoothing_radius, rejected_classes)
        frame = replace(frame, labels=labels, instances=instances)
    return extract_blobs(frame, min_blob_size, rejected_classes)
