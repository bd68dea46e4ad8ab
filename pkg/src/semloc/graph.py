"""Semantic graphs: per-frame construction, incremental merging, JSON serialization."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose

DEFAULT_MERGE_DISTANCE = 10.0
DEFAULT_EDGE_DISTANCE = 15.0
DEFAULT_QUERY_FRAMES = 5


@dataclass(frozen=True, eq=False)
class Vertex:
    id: int
    class_id: int
    position: np.ndarray
    # (pose_index, offset of the observed blob center in that pose's frame)
    observations: tuple = ()

    def __post_init__(self):
        if self.class_id == 0:
            raise ValueError("void class cannot form a vertex")
        pos = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("vertex position must be finite")
        object.__setattr__(self, "position", pos)


@dataclass
class SemanticGraph:
    vertices: dict = field(default_factory=dict)
    edges: set = field(default_factory=set)  # {(a, b)} with a < b
    frame_poses: list = field(default_factory=list)

    def __len__(self):
        return len(self.vertices)

    def copy(self):
        return SemanticGraph(dict(self.vertices), set(self.edges), list(self.frame_poses))

    def add_edge(self, a, b):
        if a == b:
            return
        self.edges.add((a, b) if a < b else (b, a))

    def next_id(self):
        return max(self.vertices) + 1 if self.vertices else 0

    def neighbors(self):
        """Adjacency as ``{id: sorted list of neighbor ids}``."""
        adj = {vid: [] for vid in self.vertices}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        for lst in adj.values():
            lst.sort()
        return adj

    def ids(self):
        return sorted(self.vertices)

    def positions(self, ids=None):
        ids = self.ids() if ids is None else ids
        if not ids:
            return np.zeros((0, 3))
        return np.array([self.vertices[i].position for i in ids])

    def classes(self, ids=None):
        ids = self.ids() if ids is None else ids
        return np.array([self.vertices[i].class_id for i in ids], dtype=np.int64)


def _pairs_within(points, threshold):
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return []
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    a, b = np.nonzero(np.triu(d <= threshold, k=1))
    return list(zip(a.tolist(), b.tolist()))


def _graph_from_blobs(blobs, edge_pairs, pose):
    g = SemanticGraph()
    if pose is not None:
        g.frame_poses.append(pose)
        inv = pose.inverse()
    for i, blob in enumerate(blobs):
        obs = ((0, inv.apply(blob.center_3d)),) if pose is not None else ()
        g.vertices[i] = Vertex(i, int(blob.class_id), blob.center_3d, obs)
    for a, b in edge_pairs:
        g.add_edge(a, b)
    return g


def build_frame_graph(blobs, edge_distance=DEFAULT_EDGE_DISTANCE, pose=None):
    """One vertex per blob, edges between blobs whose 3D centers are within ``edge_distance``.

    When the frame ``pose`` is given, each vertex stores its robot-frame offset as an
    observation of pose index 0.
    """
    if not edge_distance > 0:
        raise ValueError("edge_distance must be positive")
    pairs = _pairs_within([b.center_3d for b in blobs], edge_distance)
    return _graph_from_blobs(blobs, pairs, pose)


def build_image_space_graph(blobs, pixel_edge_distance, pose=None):
    """Like ``build_frame_graph`` but proximity is measured between pixel centroids."""
    if not pixel_edge_distance > 0:
        raise ValueError("pixel_edge_distance must be positive")
    pairs = _pairs_within([b.center_px for b in blobs], pixel_edge_distance)
    return _graph_from_blobs(blobs, pairs, pose)


def merge_frame(target, frame_graph, merge_distance=DEFAULT_MERGE_DISTANCE,
                edge_distance=DEFAULT_EDGE_DISTANCE):
    """Merge ``frame_graph`` into a copy of ``target``.

    Incoming vertices are visited in id order. One within ``merge_distance`` of a
    same-class vertex is fused into the nearest such vertex (lowest id on ties),
    which keeps its original position and gains the incoming observations.
    Otherwise the vertex is inserted and linked to every vertex within
    ``edge_distance``; ``edge_distance=None`` disables these links so that only the
    frame's own edges are carried over (image-space construction).
    """
    if not merge_distance > 0:
        raise ValueError("merge_distance must be positive")
    out = target.copy()
    pose_offset = len(out.frame_poses)
    out.frame_poses.extend(frame_graph.frame_poses)

    ids = out.ids()
    pos = out.positions(ids)
    cls = out.classes(ids)
    next_id = out.next_id()
    mapping = {}
    for vid in frame_graph.ids():
        v = frame_graph.vertices[vid]
        obs = tuple((pi + pose_offset, off) for pi, off in v.observations)
        if len(ids):
            dist = np.linalg.norm(pos - v.position, axis=1)
            same = np.nonzero((cls == v.class_id) & (dist <= merge_distance))[0]
        else:
            dist, same = None, []
        if len(same):
            # ids are ascending, so argmin picks the lowest id among equals
            best = same[np.argmin(dist[same])]
            tid = ids[best]
            old = out.vertices[tid]
            out.vertices[tid] = replace(old, observations=old.observations + obs)
            mapping[vid] = tid
            continue
        tid = next_id
        next_id += 1
        out.vertices[tid] = Vertex(tid, v.class_id, v.position, obs)
        mapping[vid] = tid
        if edge_distance is not None and len(ids):
            for j in np.nonzero(dist <= edge_distance)[0]:
                out.add_edge(ids[j], tid)
        ids.append(tid)
        pos = np.vstack([pos, v.position[None]])
        cls = np.append(cls, v.class_id)
    for a, b in frame_graph.edges:
        out.add_edge(mapping[a], mapping[b])
    return out


def merge_frames(frame_graphs, merge_distance=DEFAULT_MERGE_DISTANCE, edge_distance=DEFAULT_EDGE_DISTANCE):
    graph = SemanticGraph()
    for fg in frame_graphs:
        graph = merge_frame(graph, fg, merge_distance, edge_distance)
    return graph


class QueryGraphWindow:
    """Query graph over the most recent ``frames`` frame graphs.

    Pushing a frame beyond the window evicts the oldest frame; the graph is then
    the merge of the remaining frames, so vertices seen only in evicted frames
    disappear together with their edges.
    """

    def __init__(self, frames=DEFAULT_QUERY_FRAMES, merge_distance=DEFAULT_MERGE_DISTANCE,
                 edge_distance=DEFAULT_EDGE_DISTANCE):
        if frames < 1:
            raise ValueError("query window must hold at least one frame")
        self.merge_distance = merge_distance
        self.edge_distance = edge_distance
        self._frames = deque(maxlen=frames)
        self._graph = None

    def push(self, frame_graph):
        self._frames.append(frame_graph)
        self._graph = None

    def __len__(self):
        return len(self._frames)

    @property
    def full(self):
        return len(self._frames) == self._frames.maxlen

    @property
    def graph(self):
        if self._graph is None:
            self._graph = merge_frames(self._frames, self.merge_distance, self.edge_distance)
        return self._graph


# --- serialization -----------------------------------------------------

def graph_to_json(graph, descriptors=None):
    """Canonical JSON text: vertices by ascending id, edges sorted with the smaller id first."""
    verts = []
    for vid in graph.ids():
        v = graph.vertices[vid]
        item = {"id": int(vid), "class": int(v.class_id), "pos": [float(x) for x in v.position]}
        if descriptors is not None and vid in descriptors:
            item["walks"] = descriptors[vid].walks.tolist()
        verts.append(item)
    edges = sorted([int(a), int(b)] for a, b in graph.edges)
    return json.dumps({"vertices": verts, "edges": edges}, separators=(",", ":")) + "\n"


def graph_from_json(text):
    """Parse ``graph_to_json`` output; returns ``(graph, descriptors or None)``.

    Raises ``ValueError`` for anything that is not a well-formed graph document.
    """
    from .walks import WalkDescriptor

    data = json.loads(text)
    if not isinstance(data, dict) or set(data) != {"vertices", "edges"}:
        raise ValueError("graph JSON must have exactly 'vertices' and 'edges'")
    graph = SemanticGraph()
    descriptors = {}
    try:
        for item in data["vertices"]:
            vid = int(item["id"])
            if vid in graph.vertices:
                raise ValueError(f"duplicate vertex id {vid}")
            graph.vertices[vid] = Vertex(vid, int(item["class"]), np.array(item["pos"], dtype=float))
            if "walks" in item:
                walks = np.array(item["walks"], dtype=np.int64)
                descriptors[vid] = WalkDescriptor(int(item["class"]), walks)
        for a, b in data["edges"]:
            if a not in graph.vertices or b not in graph.vertices or a == b:
                raise ValueError(f"invalid edge [{a}, {b}]")
            graph.add_edge(int(a), int(b))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed graph JSON: {exc!r}") from None
    if descriptors and len(descriptors) != len(graph.vertices):
        raise ValueError("walks must be present on all vertices or none")
    return graph, (descriptors or None)


def transform_graph(graph, pose: Pose):
    """Copy of ``graph`` with every vertex position mapped through ``pose``."""
    out = graph.copy()
    out.frame_poses = [pose @ p for p in graph.frame_poses]
    for vid, v in graph.vertices.items():
        out.vertices[vid] = replace(v, position=pose.apply(v.position))
    return out
