"""Localization back-end: consensus filtering of matches and MAP pose estimation.

The state holds the query robot poses and the query vertex positions; database
vertex positions are constants. Three residual families enter the objective
``E = sum(e^T Omega e)``:

* matching: query vertex position minus its matched database position,
* robot-to-vertex: vertex position expressed in a robot frame minus the observed offset,
* odometry: relative pose between consecutive robot poses minus the odometry increment.

Poses are perturbed as ``t <- t + dt`` and ``R <- R Exp(dphi)``; each pose contributes
six tangent coordinates ordered ``(dt, dphi)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, skew, so3_exp, so3_log, so3_right_jacobian_inv

MATCHING = "matching"
ROBOT_TO_VERTEX = "robot_to_vertex"
ODOMETRY = "odometry"


class DegenerateConfiguration(ValueError):
    pass


class InsufficientMatches(ValueError):
    pass


class Underdetermined(RuntimeError):
    pass


# --- rigid alignment and consensus -------------------------------------

def _kabsch(A, B):
    """Batched least-squares rotation/translation with ``B ~ R A + t``; A, B are (..., N, 3)."""
    ca = A.mean(axis=-2, keepdims=True)
    cb = B.mean(axis=-2, keepdims=True)
    H = np.swapaxes(A - ca, -1, -2) @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, -1, -2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = V @ D @ np.swapaxes(U, -1, -2)
    t = cb[..., 0, :] - (R @ ca[..., 0, :, None])[..., 0]
    return R, t


def _spread(points):
    """Second singular value of the centered point set: ~0 when points are collinear."""
    c = points - points.mean(axis=-2, keepdims=True)
    return np.linalg.svd(c, compute_uv=False)[..., 1]


def estimate_rigid_transform(query_points, db_points):
    """Rigid transform ``T`` minimizing ``sum |T q - d|^2`` (no scale)."""
    A = np.asarray(query_points, dtype=float).reshape(-1, 3)
    B = np.asarray(db_points, dtype=float).reshape(-1, 3)
    if A.shape != B.shape:
        raise ValueError("point sets must have equal size")
    if len(A) < 3:
        raise DegenerateConfiguration(f"need at least 3 point pairs, got {len(A)}")
    scale = max(np.abs(A - A.mean(axis=0)).max(), 1e-12)
    if _spread(A) <= 1e-9 * scale:
        raise DegenerateConfiguration("query points are collinear")
    R, t = _kabsch(A, B)
    return Pose.from_rt(R, t)


def consensus_residuals(pose, query_points, db_points):
    q = np.asarray(query_points, dtype=float).reshape(-1, 3)
    d = np.asarray(db_points, dtype=float).reshape(-1, 3)
    return np.linalg.norm(pose.apply(q) - d, axis=1)


def _best_per_query(qidx, res, n_query, t_c):
    """Index of the lowest-residual inlier candidate per query vertex (-1 when none)."""
    best = np.full(n_query, -1)
    best_res = np.full(n_query, np.inf)
    for c in np.argsort(res, kind="stable"):
        if res[c] > t_c:
            break
        if best[qidx[c]] < 0:
            best[qidx[c]] = c
            best_res[qidx[c]] = res[c]
    return best, best_res


def ransac_filter(matches, query_positions, db_positions, t_c, iterations=500, rng_seed=0):
    """Consensus filtering of candidate matches.

    Minimal sets are three candidates from three distinct query vertices. A
    hypothesis scores one inlier per query vertex that has any candidate within
    ``t_c`` of its transformed position; ties go to the lower summed residual.
    The winner is refit on its inliers until the inlier set stops growing.

    Returns ``(inliers, consensus)`` where ``inliers`` holds at most one
    ``MatchCandidate`` per query vertex, all within ``t_c`` under ``consensus``.
    """
    if not t_c > 0:
        raise ValueError("t_c must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cands = list(matches.pairs()) if hasattr(matches, "pairs") else list(matches)
    qids = sorted({c.query_vertex_id for c in cands})
    if len(qids) < 3:
        raise InsufficientMatches(f"{len(qids)} matched query vertices, need 3")
    qindex = {q: i for i, q in enumerate(qids)}
    cands.sort(key=lambda c: (qindex[c.query_vertex_id], c.db_vertex_id))
    qidx = np.array([qindex[c.query_vertex_id] for c in cands])
    Q = np.array([query_positions[c.query_vertex_id] for c in cands], dtype=float)
    D = np.array([db_positions[c.db_vertex_id] for c in cands], dtype=float)
    starts = np.searchsorted(qidx, np.arange(len(qids)))
    counts = np.bincount(qidx, minlength=len(qids))

    rng = np.random.default_rng(rng_seed)
    picks = np.argsort(rng.random((iterations, len(qids))), axis=1)[:, :3]
    offs = (rng.random((iterations, 3)) * counts[picks]).astype(np.int64)
    sample = starts[picks] + np.minimum(offs, counts[picks] - 1)

    A, B = Q[sample], D[sample]
    scale = np.maximum(np.abs(A - A.mean(axis=1, keepdims=True)).max(axis=(1, 2)), 1e-12)
    valid = _spread(A) > 1e-6 * scale
    R, t = _kabsch(A, B)
    res = np.linalg.norm(np.einsum("kij,cj->kci", R, Q) + t[:, None, :] - D[None], axis=2)
    inl = res <= t_c
    # one vote per query vertex: max over its candidates
    hit = np.maximum.reduceat(inl, starts, axis=1)
    n_inl = np.where(valid, hit.sum(axis=1), -1)
    best_res = np.minimum.reduceat(np.where(inl, res, np.inf), starts, axis=1)
    total = np.where(np.isfinite(best_res), best_res, 0.0).sum(axis=1)
    k = int(np.lexsort((total, -n_inl))[0])
    if n_inl[k] < 0:
        raise DegenerateConfiguration("all minimal samples were degenerate")
    pose = Pose.from_rt(R[k], t[k])

    best, _ = _best_per_query(qidx, consensus_residuals(pose, Q, D), len(qids), t_c)
    for _ in range(20):
        sel = best[best >= 0]
        if len(sel) < 3:
            break
        try:
            refit = estimate_rigid_transform(Q[sel], D[sel])
        except DegenerateConfiguration:
            break
        new_best, _ = _best_per_query(qidx, consensus_residuals(refit, Q, D), len(qids), t_c)
        n_old, n_new = int((best >= 0).sum()), int((new_best >= 0).sum())
        if n_new < n_old:
            break
        changed = not np.array_equal(new_best, best)
        pose, best = refit, new_best
        if not changed:
            break
    inliers = [cands[c] for c in best if c >= 0]
    return inliers, pose


# --- factor graph ------------------------------------------------------

@dataclass(frozen=True)
class BackendWeights:
    odom_sigma_t: float = 0.1
    odom_sigma_r: float = 0.01
    vertex_sigma: float = 1.0
    match_sigma: float = 2.0


@dataclass(frozen=True, eq=False)
class Constraint:
    kind: str
    poses: tuple  # pose indices
    vertex: int | None
    measurement: object  # db position | robot-frame offset | relative Pose
    information: np.ndarray

    @property
    def residual_dim(self):
        return 6 if self.kind == ODOMETRY else 3


@dataclass
class FactorGraph:
    num_poses: int
    vertex_ids: list
    constraints: list = field(default_factory=list)

    def counts(self):
        out = {MATCHING: 0, ROBOT_TO_VERTEX: 0, ODOMETRY: 0}
        for c in self.constraints:
            out[c.kind] += 1
        return out

    def validate(self):
        used_poses, used_vertices = set(), set()
        for c in self.constraints:
            used_poses.update(c.poses)
            if c.vertex is not None:
                used_vertices.add(c.vertex)
            if not np.allclose(c.information, c.information.T):
                raise ValueError("information matrix must be symmetric")
            if np.linalg.eigvalsh(c.information).min() <= 0:
                raise ValueError("information matrix must be positive definite")
        if not set(self.vertex_ids) <= used_vertices:
            raise ValueError("every vertex unknown needs at least one constraint")
        if self.num_poses and set(range(self.num_poses)) - used_poses:
            raise ValueError("every pose unknown needs at least one constraint")
        if used_vertices - set(self.vertex_ids) or any(p >= self.num_poses for p in used_poses):
            raise ValueError("constraint references an unknown that is not in the graph")


@dataclass
class State:
    rotations: np.ndarray  # (F, 3, 3)
    translations: np.ndarray  # (F, 3)
    points: np.ndarray  # (V, 3), ordered like FactorGraph.vertex_ids

    def copy(self):
        return State(self.rotations.copy(), self.translations.copy(), self.points.copy())

    def pose(self, i):
        return Pose.from_rt(self.rotations[i], self.translations[i])

    @classmethod
    def from_poses(cls, poses, points):
        R = np.array([p.rotation for p in poses]).reshape(-1, 3, 3)
        t = np.array([p.trans for p in poses]).reshape(-1, 3)
        return cls(R, t, np.array(points, dtype=float).reshape(-1, 3))


def build_factor_graph(query_graph, inliers, db_positions, odometry=None, weights=BackendWeights()):
    """Constraints for the poses of ``query_graph.frame_poses`` and its observed vertices.

    ``inliers`` are ``MatchCandidate`` objects (or ``(query_id, db_id)`` pairs);
    ``db_positions`` maps database vertex id to position.
    """
    pairs = [(c.query_vertex_id, c.db_vertex_id) if hasattr(c, "query_vertex_id") else tuple(c)
             for c in inliers]
    if not pairs:
        raise InsufficientMatches("no inlier matches: the problem has no global anchor")
    odometry = list(query_graph.frame_poses if odometry is None else odometry)
    info_t = np.eye(3) / weights.vertex_sigma**2
    info_m = np.eye(3) / weights.match_sigma**2
    info_o = np.diag([1 / weights.odom_sigma_t**2] * 3 + [1 / weights.odom_sigma_r**2] * 3)

    constraints = []
    for i in range(len(odometry) - 1):
        rel = odometry[i].inverse() @ odometry[i + 1]
        constraints.append(Constraint(ODOMETRY, (i, i + 1), None, rel, info_o))
    vertex_ids = []
    matched = {q for q, _ in pairs}
    for vid in query_graph.ids():
        v = query_graph.vertices[vid]
        if not v.observations and vid not in matched:
            continue
        vertex_ids.append(vid)
        for pi, offset in v.observations:
            if pi >= len(odometry):
                raise ValueError(f"vertex {vid} observed from unknown pose {pi}")
            constraints.append(Constraint(ROBOT_TO_VERTEX, (pi,), vid, np.array(offset, dtype=float), info_t))
    for q, d in pairs:
        if q not in query_graph.vertices:
            raise KeyError(f"inlier references unknown query vertex {q}")
        constraints.append(Constraint(MATCHING, (), q, np.array(db_positions[d], dtype=float), info_m))
    fg = FactorGraph(len(odometry), vertex_ids, constraints)
    fg.validate()
    return fg


def residual_and_jacobians(c, state, vindex):
    """Residual of ``c`` and its Jacobian blocks ``{('pose', i) | ('point', j): block}``."""
    if c.kind == MATCHING:
        j = vindex[c.vertex]
        return state.points[j] - c.measurement, {("point", j): np.eye(3)}
    if c.kind == ROBOT_TO_VERTEX:
        (i,) = c.poses
        j = vindex[c.vertex]
        R, t = state.rotations[i], state.translations[i]
        local = R.T @ (state.points[j] - t)
        Jpose = np.hstack([-R.T, skew(local)])
        return local - c.measurement, {("pose", i): Jpose, ("point", j): R.T}
    if c.kind == ODOMETRY:
        i, k = c.poses
        Ri, ti = state.rotations[i], state.translations[i]
        Rk, tk = state.rotations[k], state.translations[k]
        Z = c.measurement
        local = Ri.T @ (tk - ti)
        e_t = local - Z.trans
        e_r = so3_log(Z.rotation.T @ Ri.T @ Rk)
        Jr_inv = so3_right_jacobian_inv(e_r)
        Ji = np.zeros((6, 6))
        Ji[:3, :3] = -Ri.T
        Ji[:3, 3:] = skew(local)
        Ji[3:, 3:] = -Jr_inv @ Rk.T @ Ri
        Jk = np.zeros((6, 6))
        Jk[:3, :3] = Ri.T
        Jk[3:, 3:] = Jr_inv
        return np.concatenate([e_t, e_r]), {("pose", i): Ji, ("pose", k): Jk}
    raise ValueError(f"unknown constraint kind {c.kind!r}")


def objective(fg, state):
    vindex = {v: j for j, v in enumerate(fg.vertex_ids)}
    total = 0.0
    for c in fg.constraints:
        e, _ = residual_and_jacobians(c, state, vindex)
        total += float(e @ c.information @ e)
    return total


def retract(state, delta, num_poses):
    out = state.copy()
    for i in range(num_poses):
        d = delta[6 * i:6 * i + 6]
        out.translations[i] = state.translations[i] + d[:3]
        out.rotations[i] = state.rotations[i] @ so3_exp(d[3:])
    out.points = state.points + delta[6 * num_poses:].reshape(-1, 3)
    return out


def _normal_equations(fg, state):
    vindex = {v: j for j, v in enumerate(fg.vertex_ids)}
    n_pose = fg.num_poses
    dim = 6 * n_pose + 3 * len(fg.vertex_ids)
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    E = 0.0
    for c in fg.constraints:
        e, blocks = residual_and_jacobians(c, state, vindex)
        Oe = c.information @ e
        E += float(e @ Oe)
        spans = []
        for (kind, idx), J in blocks.items():
            start = 6 * idx if kind == "pose" else 6 * n_pose + 3 * idx
            spans.append((slice(start, start + J.shape[1]), J))
        for sa, Ja in spans:
            g[sa] += Ja.T @ Oe
            JtO = Ja.T @ c.information
            for sb, Jb in spans:
                H[sa, sb] += JtO @ Jb
    return H, g, E


@dataclass
class LocalizationEstimate:
    poses: list
    points: dict
    final_objective: float
    iterations: int
    converged: bool
    inlier_count: int = 0
    consensus_transform: Pose | None = None

    @property
    def position(self):
        """Position of the latest pose."""
        return self.poses[-1].trans


def _solve(H, g):
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        try:
            L = np.linalg.cholesky(H + 1e-9 * np.eye(len(H)))
        except np.linalg.LinAlgError:
            raise Underdetermined("normal equations are singular") from None
    y = np.linalg.solve(L, -g)
    delta = np.linalg.solve(L.T, y)
    if not np.all(np.isfinite(delta)):
        raise Underdetermined("normal equations are singular")
    return delta


def optimize(fg, init, max_iter=20, tol=1e-10, max_halvings=10):
    """Gauss-Newton with step halving; the objective never increases between iterations."""
    state = init.copy()
    H, g, E = _normal_equations(fg, state)
    iterations = 0
    converged = E <= 1e-24
    while not converged and iterations < max_iter:
        delta = _solve(H, g)
        accepted = None
        step = 1.0
        for _ in range(max_halvings + 1):
            cand = retract(state, step * delta, fg.num_poses)
            E_new = objective(fg, cand)
            if E_new <= E:
                accepted = cand
                break
            step *= 0.5
        iterations += 1
        if accepted is None:
            converged = True
            break
        rel = (E - E_new) / max(E, 1e-300)
        state = accepted
        H, g, E = _normal_equations(fg, state)
        converged = rel < tol or E <= 1e-24 or np.linalg.norm(step * delta) < 1e-12
    poses = [state.pose(i) for i in range(fg.num_poses)]
    points = {v: state.points[j].copy() for j, v in enumerate(fg.vertex_ids)}
    return LocalizationEstimate(poses, points, E, iterations, bool(converged))


def initialize_state(fg, inliers, query_graph, db_positions, consensus, odometry=None):
    """Initial state for ``optimize``.

    The latest pose sits at the mean of the matched database positions with the
    consensus rotation applied to its odometry orientation; earlier poses follow
    through the odometry increments. Vertex positions are mapped by the consensus
    transform.
    """
    pairs = [(c.query_vertex_id, c.db_vertex_id) if hasattr(c, "query_vertex_id") else tuple(c)
             for c in inliers]
    if not pairs:
        raise InsufficientMatches("initialization needs at least one inlier")
    odometry = list(query_graph.frame_poses if odometry is None else odometry)
    mean = np.mean([db_positions[d] for _, d in pairs], axis=0)
    latest = Pose.from_rt(consensus.rotation @ odometry[-1].rotation, mean)
    to_latest = odometry[-1].inverse()
    poses = [latest @ (to_latest @ p) for p in odometry]
    points = consensus.apply(query_graph.positions(fg.vertex_ids)) if fg.vertex_ids else np.zeros((0, 3))
    return State.from_poses(poses, points)


# --- export ------------------------------------------------------------

ESTIMATE_HEADER = ["frame_index", "tx", "ty", "tz", "qx", "qy", "qz", "qw",
                   "objective", "iters", "inliers", "converged"]


def estimates_to_csv(rows):
    """``rows`` are ``(frame_index, LocalizationEstimate)`` pairs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ESTIMATE_HEADER)
    for frame_index, est in rows:
        tx, ty, tz, qx, qy, qz, qw = est.poses[-1].as_tuple()
        w.writerow([frame_index] + [repr(x) for x in (tx, ty, tz, qx, qy, qz, qw)]
                   + [repr(float(est.final_objective)), est.iterations, est.inlier_count, int(est.converged)])
    return buf.getvalue()
