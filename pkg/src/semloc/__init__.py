"""Localization of labeled depth frames against a semantic graph of a previously mapped scene."""

from .config import PipelineConfig, load_config
from .evaluation import EvalThresholds, TrialRecord, pr_curve, run_sequence, success_rate_curve
from .frames import CameraIntrinsics, SemanticFrame, load_frame
from .geometry import Pose
from .graph import SemanticGraph, graph_from_json, graph_to_json
from .pipeline import Localizer, build_database
from .walks import WalkDescriptor, WalkParams, describe_graph, describe_vertex

__version__ = "0.1.0"
