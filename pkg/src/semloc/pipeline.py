"""Frame-to-pose localization pipeline assembled from the individual stages."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backend import (BackendWeights, DegenerateConfiguration, InsufficientMatches, Underdetermined,
                      build_factor_graph, consensus_residuals, initialize_state, optimize, ransac_filter)
from .blobs import default_min_blob_size, default_smoothing_radius, frame_blobs
from .config import AUTO, PipelineConfig
from .graph import QueryGraphWindow, build_frame_graph, build_image_space_graph, merge_frame, SemanticGraph
from .matching import DescriptorIndex
from .walks import WalkParams, describe_graph

log = logging.getLogger(__name__)


def walk_params(cfg: PipelineConfig):
    w = cfg.walks
    return WalkParams(w.num_walks, w.walk_depth, w.forbid_backtrack, w.dedupe_walks, w.rng_seed)


def backend_weights(cfg: PipelineConfig):
    b = cfg.backend
    return BackendWeights(b.odom_sigma_t, b.odom_sigma_r, b.vertex_sigma, b.match_sigma)


def frame_graph(frame, cfg: PipelineConfig):
    """Blobs of one frame turned into a frame graph per the configured construction type."""
    b = cfg.blobs
    min_size = (default_min_blob_size(frame.camera.width, frame.camera.height)
                if b.min_blob_size == AUTO else b.min_blob_size)
    radius = default_smoothing_radius(frame.camera.width) if b.smoothing_radius == AUTO else b.smoothing_radius
    blobs = frame_blobs(frame, min_size, radius, b.rejected_classes)
    if cfg.graph.construction == "image":
        return build_image_space_graph(blobs, cfg.graph.pixel_edge_distance, pose=frame.odom_pose)
    return build_frame_graph(blobs, cfg.graph.edge_distance, pose=frame.odom_pose)


def _merge_edge_distance(cfg):
    return None if cfg.graph.construction == "image" else cfg.graph.edge_distance


def build_database(frames, cfg: PipelineConfig = PipelineConfig()):
    """Database graph over all ``frames`` (no eviction) and its descriptors."""
    graph = SemanticGraph()
    for frame in frames:
        graph = merge_frame(graph, frame_graph(frame, cfg), cfg.graph.merge_distance, _merge_edge_distance(cfg))
    return graph, describe_graph(graph, walk_params(cfg))


def query_window(cfg: PipelineConfig, frames=None):
    return QueryGraphWindow(frames or cfg.graph.query_frames, cfg.graph.merge_distance, _merge_edge_distance(cfg))


@dataclass
class WindowResult:
    estimate: object  # LocalizationEstimate or None
    inliers: list
    vote: float  # largest inlier deviation from the consensus transform
    reason: str = ""

    @property
    def attempted(self):
        return self.estimate is not None


class Localizer:
    """Localizes query graphs against one database graph with precomputed descriptors."""

    def __init__(self, db_graph, db_descriptors, cfg: PipelineConfig = PipelineConfig()):
        self.cfg = cfg
        self.db_graph = db_graph
        self.db_positions = {vid: v.position for vid, v in db_graph.vertices.items()}
        self.index = DescriptorIndex(db_descriptors or {})
        self.params = walk_params(cfg)

    def localize(self, query_graph):
        cfg = self.cfg
        if not query_graph.vertices or not self.db_positions:
            return WindowResult(None, [], np.inf, "empty graph")
        descriptors = describe_graph(query_graph, self.params)
        matches = self.index.match(descriptors, cfg.matching.k)
        qpos = {vid: v.position for vid, v in query_graph.vertices.items()}
        try:
            inliers, consensus = ransac_filter(matches, qpos, self.db_positions, cfg.ransac.t_c,
                                               cfg.ransac.iterations, cfg.ransac.seed)
        except (InsufficientMatches, DegenerateConfiguration) as exc:
            return WindowResult(None, [], np.inf, str(exc))
        if len(inliers) < max(cfg.ransac.min_inliers, 1):
            return WindowResult(None, inliers, np.inf, f"{len(inliers)} inliers")
        res = consensus_residuals(consensus,
                                  [qpos[c.query_vertex_id] for c in inliers],
                                  [self.db_positions[c.db_vertex_id] for c in inliers])
        try:
            fg = build_factor_graph(query_graph, inliers, self.db_positions, weights=backend_weights(cfg))
            init = initialize_state(fg, inliers, query_graph, self.db_positions, consensus)
            est = optimize(fg, init, cfg.backend.max_iter, cfg.backend.tol)
        except (Underdetermined, ValueError) as exc:
            log.warning("back-end failed: %s", exc)
            return WindowResult(None, inliers, np.inf, str(exc))
        est.inlier_count = len(inliers)
        est.consensus_transform = consensus
        return WindowResult(est, inliers, float(res.max()))
