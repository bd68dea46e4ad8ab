"""Sequence evaluation: per-window trial records, precision-recall and success-rate curves."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .pipeline import Localizer, frame_graph, query_window


@dataclass(frozen=True)
class EvalThresholds:
    t_L: float
    t_c_sweep: tuple

    def __post_init__(self):
        if not self.t_L > 0:
            raise ValueError("t_L must be positive")
        sweep = tuple(float(x) for x in self.t_c_sweep)
        if not sweep or any(b <= a for a, b in zip(sweep, sweep[1:])):
            raise ValueError("t_c_sweep must be non-empty and ascending")
        object.__setattr__(self, "t_c_sweep", sweep)

    @classmethod
    def from_config(cls, cfg: PipelineConfig):
        return cls(cfg.localization_threshold, cfg.eval.t_c_sweep)


@dataclass(frozen=True, eq=False)
class TrialRecord:
    frame_index: int
    estimate: np.ndarray  # nan when not attempted
    gt: np.ndarray
    inlier_count: int
    vote: float  # max inlier deviation from the consensus transform (inf when not attempted)
    attempted: bool

    @property
    def error(self):
        return float(np.linalg.norm(self.estimate - self.gt)) if self.attempted else np.inf

    def same_as(self, other):
        return (self.frame_index == other.frame_index and self.attempted == other.attempted
                and self.inlier_count == other.inlier_count
                and np.array_equal(self.estimate, other.estimate, equal_nan=True)
                and np.array_equal(self.gt, other.gt, equal_nan=True)
                and (self.vote == other.vote))


def localize_sequence(frames, gt_poses, localizer: Localizer, cfg: PipelineConfig = None, window=None):
    """Yield ``(TrialRecord, WindowResult)`` per full query window, localizing the window's latest frame.

    Windows that cannot be localized are recorded with ``attempted=False``.
    """
    cfg = cfg or localizer.cfg
    window = window or cfg.graph.query_frames
    qw = query_window(cfg, window)
    for k, frame in enumerate(frames):
        qw.push(frame_graph(frame, cfg))
        if not qw.full:
            continue
        result = localizer.localize(qw.graph)
        gt = np.asarray(gt_poses[k].trans, dtype=float) if gt_poses is not None else np.full(3, np.nan)
        if result.attempted:
            rec = TrialRecord(frame.timestamp, result.estimate.position.copy(), gt,
                              len(result.inliers), result.vote, True)
        else:
            rec = TrialRecord(frame.timestamp, np.full(3, np.nan), gt, len(result.inliers), np.inf, False)
        yield rec, result


def run_sequence(frames, gt_poses, localizer: Localizer, cfg: PipelineConfig = None, window=None):
    """One ``TrialRecord`` per full query window (see ``localize_sequence``)."""
    return [rec for rec, _ in localize_sequence(frames, gt_poses, localizer, cfg, window)]


def _confusion(records, t_L, t_c):
    tp = fp = fn = 0
    for r in records:
        positive = r.attempted and r.vote <= t_c
        true = r.attempted and r.error <= t_L
        if positive and true:
            tp += 1
        elif positive:
            fp += 1
        elif true or not r.attempted:
            # windows that could not be localized count as missed localizations
            fn += 1
    return tp, fp, fn


def pr_curve(records, thresholds: EvalThresholds):
    """``[(t_c, precision, recall)]``; precision is 1.0 when nothing is predicted positive."""
    if not records:
        raise ValueError("no trial records")
    out = []
    for t_c in thresholds.t_c_sweep:
        tp, fp, fn = _confusion(records, thresholds.t_L, t_c)
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out.append((t_c, precision, recall))
    return out


def pr_auc(curve):
    """Area under a PR curve, integrating precision stepwise over increasing recall from 0."""
    pts = sorted((r, p) for _, p, r in curve)
    area, prev_r = 0.0, 0.0
    for r, p in pts:
        area += (r - prev_r) * p
        prev_r = r
    return area


def best_f1(curve):
    """``(t_c, precision, recall, f1)`` of the operating point with the highest F1 (lowest t_c on ties)."""
    best = None
    for t_c, p, r in curve:
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        if best is None or f1 > best[3]:
            best = (t_c, p, r, f1)
    return best


def success_rate_curve(records, max_distance, bins):
    """Cumulative fraction of attempted records with error at most each of ``bins`` distances."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    distances = max_distance * np.arange(1, bins + 1) / bins
    errors = np.sort([r.error for r in records if r.attempted])
    if not len(errors):
        return [(float(d), 0.0) for d in distances]
    counts = np.searchsorted(errors, distances, side="right")
    return [(float(d), c / len(errors)) for d, c in zip(distances, counts)]


def accepted(records, t_c):
    """Records whose localization is voted positive at consistency threshold ``t_c``."""
    return [r for r in records if r.attempted and r.vote <= t_c]


def success_at(records, t_c, t_L):
    """Fraction of accepted localizations within ``t_L`` of the ground truth."""
    acc = accepted(records, t_c)
    return sum(r.error <= t_L for r in acc) / len(acc) if acc else 0.0


# --- CSV ---------------------------------------------------------------

TRIAL_HEADER = ["frame_index", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z", "inliers", "vote", "attempted"]


def trials_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_HEADER)
    for r in records:
        w.writerow([r.frame_index] + [repr(float(x)) for x in r.estimate] + [repr(float(x)) for x in r.gt]
                   + [r.inlier_count, repr(float(r.vote)), int(r.attempted)])
    return buf.getvalue()


def trials_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != TRIAL_HEADER:
        raise ValueError("trials CSV must start with the header " + ",".join(TRIAL_HEADER))
    records = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(TRIAL_HEADER):
            raise ValueError(f"line {n}: expected {len(TRIAL_HEADER)} fields")
        try:
            attempted = int(row[9])
            if attempted not in (0, 1):
                raise ValueError
            records.append(TrialRecord(int(row[0]), np.array([float(x) for x in row[1:4]]),
                                       np.array([float(x) for x in row[4:7]]), int(row[7]),
                                       float(row[8]), bool(attempted)))
        except ValueError:
            raise ValueError(f"line {n}: malformed trial row") from None
        if records[-1].attempted and not np.all(np.isfinite(records[-1].estimate)):
            raise ValueError(f"line {n}: attempted trial without a finite estimate")
    return records


def pr_to_csv(curve):
    lines = ["t_c,precision,recall"] + [f"{t!r},{p!r},{r!r}" for t, p, r in curve]
    return "\n".join(lines) + "\n"


def success_to_csv(curve):
    lines = ["distance,fraction"] + [f"{d!r},{f!r}" for d, f in curve]
    return "\n".join(lines) + "\n"
