"""Random-walk vertex descriptors.

Every vertex gets ``num_walks`` walks of ``walk_depth`` steps; a walk is recorded as
the class labels of the vertices it visits after leaving the seed. Each seed draws
from its own Philox stream keyed by ``(rng_seed, vertex_id)``, so descriptors do not
depend on the order in which vertices are processed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1
DEDUPE_RETRIES = 10


@dataclass(frozen=True)
class WalkParams:
    num_walks: int = 200
    walk_depth: int = 4
    forbid_backtrack: bool = True
    dedupe_walks: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_walks < 1 or self.walk_depth < 1:
            raise ValueError("num_walks and walk_depth must be >= 1")


@dataclass(frozen=True, eq=False)
class WalkDescriptor:
    seed_class: int
    walks: np.ndarray  # (num_walks, walk_depth), rows sorted lexicographically
    degenerate: bool = False

    def __post_init__(self):
        walks = np.asarray(self.walks, dtype=np.int64)
        if walks.ndim != 2 or walks.shape[0] < 1 or walks.shape[1] < 1:
            raise ValueError(f"walk matrix must be 2D and non-empty, got shape {walks.shape}")
        if np.any(walks <= 0):
            raise ValueError("walk labels must be valid (non-void) class ids")
        walks = walks[np.lexsort(walks.T[::-1])]
        walks.flags.writeable = False
        object.__setattr__(self, "walks", walks)

    @property
    def shape(self):
        return self.walks.shape

    def __eq__(self, other):
        if not isinstance(other, WalkDescriptor):
            return NotImplemented
        return self.seed_class == other.seed_class and np.array_equal(self.walks, other.walks)

    __hash__ = None


def _csr(graph):
    ids = graph.ids()
    index = {vid: i for i, vid in enumerate(ids)}
    adj = graph.neighbors()
    indptr = np.zeros(len(ids) + 1, dtype=np.int64)
    indices = []
    for i, vid in enumerate(ids):
        nbrs = adj[vid]
        indices.extend(index[n] for n in nbrs)
        indptr[i + 1] = indptr[i] + len(nbrs)
    classes = np.array([graph.vertices[v].class_id for v in ids], dtype=np.int64)
    return ids, index, indptr, np.asarray(indices, dtype=np.int64), classes


def _step_walks(indptr, indices, starts, uniforms, forbid_backtrack):
    """Advance walks from ``starts`` using one uniform per step; returns visited indices."""
    n_walks, depth = uniforms.shape
    cur = np.asarray(starts, dtype=np.int64).copy()
    if not len(indices):
        # no edges anywhere: every walk stays at its seed
        return np.repeat(cur[:, None], depth, axis=1)
    visited = np.empty((n_walks, depth), dtype=np.int64)
    prev = np.full(n_walks, -1, dtype=np.int64)
    for s in range(depth):
        deg = indptr[cur + 1] - indptr[cur]
        moving = deg > 0
        restrict = forbid_backtrack & (prev >= 0) & (deg > 1)
        choices = np.where(restrict, deg - 1, deg)
        r = np.minimum((uniforms[:, s] * choices).astype(np.int64), np.maximum(choices - 1, 0))
        base = indptr[cur]
        nxt = indices[np.where(moving, base + r, 0)]
        if forbid_backtrack:
            # the slot holding the previous vertex is swapped for the last slot
            hit = restrict & (nxt == prev)
            nxt = np.where(hit, indices[np.where(hit, base + deg - 1, 0)], nxt)
        nxt = np.where(moving, nxt, cur)
        prev = np.where(moving, cur, prev)
        cur = nxt
        visited[:, s] = cur
    return visited


def _generator(rng_seed, vertex_id):
    key = np.array([int(rng_seed) & _U64, int(vertex_id) & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _describe_index(i, vid, indptr, indices, classes, params, uniforms=None, gen=None):
    n, m = params.num_walks, params.walk_depth
    if gen is None:
        gen = _generator(params.rng_seed, vid)
    if uniforms is None:
        uniforms = gen.random((n, m))
    degenerate = indptr[i + 1] == indptr[i]
    paths = _step_walks(indptr, indices, np.full(n, i), uniforms, params.forbid_backtrack)
    if params.dedupe_walks and not degenerate:
        paths = _dedupe(paths, i, indptr, indices, classes, params, gen)
    return WalkDescriptor(int(classes[i]), classes[paths], degenerate=bool(degenerate)), paths


def _dedupe(paths, i, indptr, indices, classes, params, gen):
    n, m = params.num_walks, params.walk_depth
    seen = {}
    pool = paths
    for attempt in range(DEDUPE_RETRIES + 1):
        for p in pool:
            key = classes[p].tobytes()
            if key not in seen:
                seen[key] = p
                if len(seen) == n:
                    break
        if len(seen) == n or attempt == DEDUPE_RETRIES:
            break
        pool = _step_walks(indptr, indices, np.full(n, i), gen.random((n, m)), params.forbid_backtrack)
    unique = list(seen.values())
    # pad by cycling through the distinct walks found
    rows = [unique[k % len(unique)] for k in range(n)]
    return np.array(rows, dtype=np.int64)


def describe_vertex(graph, vertex_id, params=WalkParams(), return_paths=False):
    """Descriptor of one vertex; ``return_paths`` also returns the visited vertex ids."""
    if vertex_id not in graph.vertices:
        raise KeyError(f"vertex {vertex_id} not in graph")
    ids, index, indptr, indices, classes = _csr(graph)
    desc, paths = _describe_index(index[vertex_id], vertex_id, indptr, indices, classes, params)
    if return_paths:
        return desc, np.asarray(ids)[paths]
    return desc


def describe_graph(graph, params=WalkParams()):
    """Descriptors for all vertices, ``{vertex_id: WalkDescriptor}``."""
    if not graph.vertices:
        return {}
    ids, index, indptr, indices, classes = _csr(graph)
    n, m = params.num_walks, params.walk_depth
    if params.dedupe_walks:
        return {vid: _describe_index(i, vid, indptr, indices, classes, params)[0]
                for i, vid in enumerate(ids)}
    uniforms = np.concatenate([_generator(params.rng_seed, vid).random((n, m)) for vid in ids])
    starts = np.repeat(np.arange(len(ids)), n)
    paths = _step_walks(indptr, indices, starts, uniforms, params.forbid_backtrack)
    labels = classes[paths].reshape(len(ids), n, m)
    out = {}
    for i, vid in enumerate(ids):
        out[vid] = WalkDescriptor(int(classes[i]), labels[i], degenerate=bool(indptr[i + 1] == indptr[i]))
    return out
