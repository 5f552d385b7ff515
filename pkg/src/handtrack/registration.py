"""Four-term registration of the skinned model to a preprocessed depth frame.

Per solver iteration the model is deformed, rendered for visibility, and
matched to the frame four ways: visible vertices to nearest cloud points
(model-to-data, gated by normal angle and distance), observed depth edges to
model silhouette vertices via distance transforms (data-to-model, ray
residuals), assigned fingertip detections to labeled finger parts (salient),
and intersecting triangle pairs to the cone penetration field (collision).
Correspondences are rebuilt every iteration and held fixed within the damped
Gauss-Newton step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .collision import (
    build_bvh,
    collision_field_values,
    collision_residuals,
    collision_row_layout,
    find_collisions,
)
from .config import SolverConfig
from .frontend import ObservedFrame, depth_edges, edge_distance_transform
from .kinematics import (
    KinematicModel,
    PoseDerivatives,
    chain_transforms,
    clamp_to_limits,
)
from .residuals import ResidualBlock, empty_block
from .skinning import (
    Camera,
    DeformedMesh,
    SkinnedMesh,
    backproject,
    check_mesh_matches_model,
    compute_vertex_normals,
    lbs_per_bone,
    project_points,
    render_depth,
    visible_vertices,
)


@dataclass
class DetectionRecord:
    """A salient-point (fingertip) detection in one frame."""

    frame_index: int
    region: np.ndarray              # (R, 2) int pixels (u, v)
    centroid_3d: np.ndarray         # (3,) mm
    confidence: float
    points_3d: np.ndarray | None = None  # lifted region pixels, filled per frame

    def __post_init__(self):
        self.region = np.asarray(self.region, dtype=np.int64).reshape(-1, 2)
        self.centroid_3d = np.asarray(self.centroid_3d, dtype=float)
        if len(self.region) == 0:
            raise ValueError("detection region must be nonempty")
        if self.confidence <= 0:
            raise ValueError("detection confidence must be positive")


def attach_detection_points(det: DetectionRecord, observed: ObservedFrame) -> None:
    """Lift the detection's region pixels through the frame depth."""
    u, v = det.region[:, 0], det.region[:, 1]
    H, W = observed.depth.shape
    ok = (u >= 0) & (u < W) & (v >= 0) & (v < H)
    z = np.zeros(len(u))
    z[ok] = observed.depth[v[ok], u[ok]]
    ok &= z > 0
    det.points_3d = backproject(observed.camera, u[ok].astype(float),
                                v[ok].astype(float), z[ok]).reshape(-1, 3)


@dataclass
class CorrespondenceSet:
    """A batch of same-kind correspondences for one energy term."""

    term: str                       # "m2d" | "d2m" | "salient"
    kind: str                       # "point" | "ray"
    vertex_ids: np.ndarray
    targets: np.ndarray = None      # (K, 3) target points (point kind)
    normals: np.ndarray = None      # (K, 3) model normals at creation
    ray_d: np.ndarray = None        # (K, 3) unit ray directions (ray kind)
    ray_m: np.ndarray = None        # (K, 3) ray moments
    sq_dist: np.ndarray = None      # (K,) squared distance at creation
    flagged: bool = False           # d2m: model produced no edges

    def __post_init__(self):
        self.vertex_ids = np.asarray(self.vertex_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.vertex_ids)


def empty_set(term: str, kind: str = "point", flagged: bool = False) -> CorrespondenceSet:
    z = np.zeros((0, 3))
    return CorrespondenceSet(term, kind, np.zeros(0, dtype=np.int64), z, z, z, z,
                             np.zeros(0), flagged)


# ---------------------------------------------------------------------------
# correspondence search

def match_model_to_data(deformed: DeformedMesh, observed: ObservedFrame,
                        config: SolverConfig) -> CorrespondenceSet:
    """Nearest cloud point per visible vertex, gated by distance and normals."""
    if deformed.visibility is None:
        raise ValueError("deformed mesh needs a visibility mask")
    tree, cloud_ids = observed.cloud_tree()
    vids = np.nonzero(deformed.visibility & deformed.normals_valid)[0]
    if tree is None or len(vids) == 0:
        return empty_set("m2d")
    d, idx = tree.query(deformed.vertices[vids],
                        distance_upper_bound=config.m2d_gate_mm)
    hit = np.isfinite(d)
    vids, idx, d = vids[hit], idx[hit], d[hit]
    cloud_idx = cloud_ids[idx]
    cos_gate = np.cos(np.deg2rad(config.max_normal_angle_deg))
    vn = deformed.vertex_normals[vids]
    cn = observed.normals[cloud_idx]
    # cloud normals face the camera; visible vertex normals do too
    keep = np.einsum("ij,ij->i", vn, cn) >= cos_gate
    vids, cloud_idx, d = vids[keep], cloud_idx[keep], d[keep]
    return CorrespondenceSet(
        "m2d", "point", vids,
        targets=observed.cloud[cloud_idx],
        normals=deformed.vertex_normals[vids],
        sq_dist=d * d,
    )


def match_data_to_model(deformed: DeformedMesh, observed: ObservedFrame,
                        camera: Camera, config: SolverConfig,
                        model_render: tuple | None = None,
                        edge_threshold_mm: float = 25.0) -> CorrespondenceSet:
    """Observed depth-edge pixels matched to model silhouette vertices.

    Each observed edge pixel takes the nearest model edge pixel (via the
    model-side distance transform), lifts its own 3x3-averaged depth to a
    projection ray, and pulls the vertex under that model pixel. Pairs more
    than the gate apart in 3D are discarded. If the model renders no edges
    the result is empty and flagged.
    """
    if len(observed.edge_pixels) == 0:
        return empty_set("d2m", "ray")
    if model_render is None:
        model_render = render_depth(deformed.vertices, deformed.triangles, camera)
    depth_m, tid_m = model_render
    model_edges, _ = depth_edges(depth_m, edge_threshold_mm)
    if len(model_edges) == 0:
        return empty_set("d2m", "ray", flagged=True)
    H, W = depth_m.shape
    _, nearest_model = edge_distance_transform(model_edges, H, W)

    ou, ov = observed.edge_pixels[:, 0], observed.edge_pixels[:, 1]
    midx = nearest_model[ov, ou]
    mu, mv = model_edges[midx, 0], model_edges[midx, 1]
    tri = tid_m[mv, mu]
    ok = tri >= 0
    if not ok.any():
        return empty_set("d2m", "ray", flagged=True)
    ou, ov, mu, mv, tri = ou[ok], ov[ok], mu[ok], mv[ok], tri[ok]
    obs_depth = observed.edge_depth[ok]

    # model edge pixel -> nearest vertex of the triangle rendered there
    surf = backproject(camera, mu.astype(float), mv.astype(float),
                       depth_m[mv, mu]).reshape(-1, 3)
    tri_verts = deformed.triangles[tri]                     # (K, 3)
    cand = deformed.vertices[tri_verts]                     # (K, 3, 3)
    which = np.argmin(np.linalg.norm(cand - surf[:, None, :], axis=2), axis=1)
    vids = tri_verts[np.arange(len(tri)), which]

    X = backproject(camera, ou.astype(float), ov.astype(float), obs_depth)
    X = X.reshape(-1, 3)
    sep = np.linalg.norm(X - deformed.vertices[vids], axis=1)
    keep = sep <= config.d2m_gate_mm
    vids, X, sep = vids[keep], X[keep], sep[keep]
    if len(vids) == 0:
        return empty_set("d2m", "ray")
    d = X / np.linalg.norm(X, axis=1, keepdims=True)
    m = np.cross(X, d)  # rays pass through the camera center at the origin
    return CorrespondenceSet("d2m", "ray", vids, ray_d=d, ray_m=m,
                             sq_dist=sep * sep)


# ---------------------------------------------------------------------------
# residual assembly

def point_residuals(corrs: CorrespondenceSet, vertices: np.ndarray,
                    metric: str, jacobians=None, num_dof: int = 0) -> ResidualBlock:
    """Point-target rows: v - X (3 rows) or n . (v - X) (1 row, frozen n)."""
    if len(corrs) == 0:
        return empty_block(corrs.term, num_dof)
    v = vertices[corrs.vertex_ids]
    diff = v - corrs.targets
    if jacobians is not None:
        Jv = jacobians(corrs.vertex_ids)
        num_dof = Jv.shape[2]
    else:
        Jv = np.zeros((len(corrs), 3, max(num_dof, 1)))
        num_dof = Jv.shape[2]
    if metric == "p2p":
        return ResidualBlock(corrs.term, diff.ravel(), Jv.reshape(-1, num_dof))
    n = corrs.normals
    r = np.einsum("ij,ij->i", n, diff)
    J = np.einsum("ij,ijd->id", n, Jv)
    return ResidualBlock(corrs.term, r, J)


def ray_residuals(corrs: CorrespondenceSet, vertices: np.ndarray,
                  jacobians=None, num_dof: int = 0) -> ResidualBlock:
    """Pluecker rows v x d - m (3 rows per correspondence)."""
    if len(corrs) == 0:
        return empty_block(corrs.term, num_dof)
    v = vertices[corrs.vertex_ids]
    r = np.cross(v, corrs.ray_d) - corrs.ray_m
    if jacobians is not None:
        Jv = jacobians(corrs.vertex_ids)
        num_dof = Jv.shape[2]
    else:
        Jv = np.zeros((len(corrs), 3, max(num_dof, 1)))
        num_dof = Jv.shape[2]
    # d(v x d)/dv = -[d]x
    K = len(corrs)
    S = np.zeros((K, 3, 3))
    d = corrs.ray_d
    S[:, 0, 1], S[:, 0, 2] = d[:, 2], -d[:, 1]
    S[:, 1, 0], S[:, 1, 2] = -d[:, 2], d[:, 0]
    S[:, 2, 0], S[:, 2, 1] = d[:, 1], -d[:, 0]
    J = np.einsum("kij,kjd->kid", S, Jv).reshape(-1, num_dof)
    return ResidualBlock(corrs.term, r.ravel(), J)


def residual_m2d(corrs, vertices, metric="p2plane", jacobians=None, num_dof=0):
    return point_residuals(corrs, vertices, metric, jacobians, num_dof)


def residual_d2m(corrs, vertices, jacobians=None, num_dof=0):
    return ray_residuals(corrs, vertices, jacobians, num_dof)


# ---------------------------------------------------------------------------
# salient-point assignment (integer program over a small bipartite graph)

@dataclass
class AssignmentSolution:
    e: np.ndarray          # (S, T) bool, detection s matched to finger t
    alpha: np.ndarray      # (S,) bool, detection declared false positive
    beta: np.ndarray       # (T,) bool, finger left undetected
    objective: float

    def pairs(self) -> list[tuple[int, int]]:
        s, t = np.nonzero(self.e)
        return list(zip(s.tolist(), t.tolist()))


def solve_assignment(w_st: np.ndarray, w_s: np.ndarray,
                     lam: float) -> AssignmentSolution:
    """Exact minimizer of the detection-finger assignment program.

    Cost: sum(e_st w_st) + lam * sum(alpha_s w_s) + lam * sum(beta_t), with
    each row of [e | alpha] and column of [e ; beta] summing to 1. Solved by
    dynamic programming over finger subsets (S, T <= 16). Ties break toward
    the lexicographically smallest sorted (s, t) pair list, which prefers
    matching over dropping and smaller finger indices first.
    """
    w_st = np.asarray(w_st, dtype=float)
    w_s = np.asarray(w_s, dtype=float)
    S, T = w_st.shape if w_st.ndim == 2 else (0, 0)
    if w_st.ndim != 2:
        raise ValueError("w_st must be S x T")
    if S > 16 or T > 16:
        raise ValueError("assignment solver limited to S, T <= 16")
    if S == 0:
        return AssignmentSolution(np.zeros((0, T), dtype=bool),
                                  np.zeros(0, dtype=bool),
                                  np.ones(T, dtype=bool), lam * T)

    n_masks = 1 << T
    masks = np.arange(n_masks)
    popcount = np.zeros(n_masks, dtype=np.int64)
    for t in range(T):
        popcount += (masks >> t) & 1
    free_of = [np.nonzero(((masks >> t) & 1) == 0)[0] for t in range(T)]

    dp = np.empty((S + 1, n_masks))
    dp[S] = lam * (T - popcount)
    for s in range(S - 1, -1, -1):
        best = lam * w_s[s] + dp[s + 1]
        for t in range(T):
            f = free_of[t]
            cand = w_st[s, t] + dp[s + 1][f | (1 << t)]
            best[f] = np.minimum(best[f], cand)
        dp[s] = best

    e = np.zeros((S, T), dtype=bool)
    alpha = np.zeros(S, dtype=bool)
    mask = 0
    for s in range(S):
        total = dp[s][mask]
        chosen = -1
        for t in range(T):
            if mask & (1 << t):
                continue
            if w_st[s, t] + dp[s + 1][mask | (1 << t)] == total:
                chosen = t
                break
        if chosen < 0:
            alpha[s] = True
        else:
            e[s, chosen] = True
            mask |= 1 << chosen
    beta = ~e.any(axis=0)
    return AssignmentSolution(e, alpha, beta, float(dp[0][0]))


def build_assignment_weights(detections: list, deformed: DeformedMesh,
                             mesh: SkinnedMesh, config: SolverConfig
                             ) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Distance weights between detections and visible finger centroids.

    w_st is the 3D centroid distance in units of `assignment_scale_mm`;
    fingers with no visible labeled vertex get +inf (unassignable). w_s is 1
    or confidence / threshold depending on the configured mode.
    """
    fingers = mesh.finger_label_set()
    S, T = len(detections), len(fingers)
    w_st = np.full((S, T), np.inf)
    centroids = {}
    for c, t in enumerate(fingers):
        ids = mesh.finger_vertex_ids(t)
        vis = ids[deformed.visibility[ids]]
        if len(vis):
            centroids[c] = deformed.vertices[vis].mean(axis=0)
    for s, det in enumerate(detections):
        for c in centroids:
            w_st[s, c] = np.linalg.norm(det.centroid_3d - centroids[c]) \
                / config.assignment_scale_mm
    if config.ws_mode == "constant":
        w_s = np.ones(S)
    else:
        w_s = np.array([d.confidence / config.confidence_threshold
                        for d in detections])
    return w_st, w_s, fingers


def _projected_overlap(vertex_px: np.ndarray, region: np.ndarray) -> float:
    """Intersection over the smaller pixel footprint, in [0, 1]."""
    a = set(map(tuple, vertex_px.tolist()))
    b = set(map(tuple, region.tolist()))
    if not a or not b:
        return 0.0
    return len(a & b) / min(len(a), len(b))


def residual_salient(solution: AssignmentSolution, detections: list,
                     fingers: list[int], deformed: DeformedMesh,
                     mesh: SkinnedMesh, camera: Camera, config: SolverConfig,
                     jacobians=None, num_dof: int = 0
                     ) -> tuple[ResidualBlock, CorrespondenceSet]:
    """Rows pulling assigned finger parts toward their detections.

    Skips pairs already closer than the skip gate; with enough projected
    overlap each visible finger vertex matches its nearest detection point,
    otherwise all pull toward the detection centroid.
    """
    vids_all, targets_all = [], []
    for s, t_col in sorted(zip(*np.nonzero(solution.e))):
        det = detections[s]
        label = fingers[t_col]
        ids = mesh.finger_vertex_ids(label)
        vis = ids[deformed.visibility[ids]]
        if len(vis) == 0:
            continue
        centroid = deformed.vertices[vis].mean(axis=0)
        dist = np.linalg.norm(det.centroid_3d - centroid)
        if dist < config.salient_skip_mm:
            continue
        uv, z = project_points(camera, deformed.vertices[vis])
        px = np.rint(uv[z > 0]).astype(np.int64)
        overlap = _projected_overlap(px, det.region)
        pts = det.points_3d
        if overlap >= config.overlap_threshold and pts is not None and len(pts):
            diff = deformed.vertices[vis][:, None, :] - pts[None, :, :]
            nn = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
            targets = pts[nn]
        else:
            targets = np.repeat(det.centroid_3d[None, :], len(vis), axis=0)
        vids_all.append(vis)
        targets_all.append(targets)
    if not vids_all:
        corrs = empty_set("salient")
        return empty_block("salient", num_dof), corrs
    vids = np.concatenate(vids_all)
    targets = np.concatenate(targets_all)
    sq = np.sum((deformed.vertices[vids] - targets) ** 2, axis=1)
    corrs = CorrespondenceSet("salient", "point", vids, targets=targets,
                              normals=deformed.vertex_normals[vids], sq_dist=sq)
    return point_residuals(corrs, deformed.vertices, config.metric,
                           jacobians, num_dof), corrs


# ---------------------------------------------------------------------------
# solver

def gauss_newton_step(blocks: list[ResidualBlock], gamma_c: float,
                      damping: float, max_retries: int = 5
                      ) -> tuple[np.ndarray, float, bool]:
    """One damped step: solve (J^T W J + damping I) dtheta = -J^T W r.

    W is gamma_c on collision rows and the row weight elsewhere. On a
    singular or non-finite solve the damping is multiplied by 10, up to
    `max_retries` times; after that a zero step with ok=False is returned.
    """
    keep = [b for b in blocks if len(b)]
    if not keep:
        raise ValueError("gauss_newton_step needs at least one nonempty block")
    num_dof = keep[0].J.shape[1]
    r = np.concatenate([b.r for b in keep])
    J = np.concatenate([b.J for b in keep], axis=0)
    w = np.concatenate([b.row_weight * (gamma_c if b.term == "collision" else 1.0)
                        for b in keep])
    Jw = J * w[:, None]
    H = J.T @ Jw
    g = Jw.T @ r
    lam = damping
    for _ in range(max_retries + 1):
        try:
            delta = np.linalg.solve(H + lam * np.eye(num_dof), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        if np.all(np.isfinite(delta)):
            return delta, lam, True
        lam *= 10.0
    return np.zeros(num_dof), lam, False


class VertexJacobians:
    """Pose Jacobians of blended mesh vertices for one solver iteration."""

    def __init__(self, model: KinematicModel, mesh: SkinnedMesh,
                 theta: np.ndarray, transforms: np.ndarray,
                 per_bone: np.ndarray):
        self.ders = PoseDerivatives(model, theta, transforms)
        self.mesh = mesh
        self.per_bone = per_bone
        self.bone_ids = np.array(mesh.bone_ids)

    def __call__(self, vertex_ids: np.ndarray) -> np.ndarray:
        W = self.mesh.weights[vertex_ids]
        pts = self.per_bone[:, vertex_ids].transpose(1, 0, 2)
        return self.ders.blended_rows(self.bone_ids, W, pts)


@dataclass
class FrozenObjective:
    """Residual recomputation at a trial pose with all targets held fixed."""

    model: KinematicModel
    mesh: SkinnedMesh
    config: SolverConfig
    m2d: CorrespondenceSet
    d2m: CorrespondenceSet
    salient: CorrespondenceSet
    collision_layout: tuple

    def vertices_at(self, theta: np.ndarray) -> np.ndarray:
        transforms = chain_transforms(self.model, theta)
        per_bone = lbs_per_bone(self.mesh, transforms)
        return np.einsum("nb,bnj->nj", self.mesh.weights, per_bone)

    def term_energies(self, theta: np.ndarray) -> dict:
        v = self.vertices_at(theta)
        out = {}
        out["m2d"] = point_residuals(self.m2d, v, self.config.metric).energy
        out["d2m"] = ray_residuals(self.d2m, v).energy
        out["salient"] = point_residuals(self.salient, v, self.config.metric).energy
        vals = collision_field_values(self.collision_layout, v,
                                      self.config.cone_sigma,
                                      self.config.collision_energy_exponent)
        out["collision"] = float(np.sum(vals ** 2))
        return out

    def total(self, theta: np.ndarray) -> float:
        e = self.term_energies(theta)
        return (e["m2d"] + e["d2m"] + e["salient"]
                + self.config.gamma_c * e["collision"])


@dataclass
class IterationDiag:
    energies: dict
    total: float
    counts: dict
    damping: float
    accepted: bool
    d2m_flagged: bool


@dataclass
class FrameResult:
    theta: np.ndarray
    tracking_lost: bool
    iterations: list
    final_energies: dict
    final_counts: dict
    final_collision_pairs: int


def _check_gates(m2d, d2m, config):
    assert np.all(m2d.sq_dist <= config.m2d_gate_mm ** 2 + 1e-9)
    assert np.all(d2m.sq_dist <= config.d2m_gate_mm ** 2 + 1e-9)


def build_iteration(theta, observed, model, mesh, detections, config):
    """Deform, render, and match all four terms at the current pose.

    Returns (blocks, frozen objective, counts, deformed, d2m flag).
    """
    transforms = chain_transforms(model, theta)
    per_bone = lbs_per_bone(mesh, transforms)
    verts = np.einsum("nb,bnj->nj", mesh.weights, per_bone)
    normals, nvalid = compute_vertex_normals(verts, mesh.triangles)
    camera = observed.camera
    render = render_depth(verts, mesh.triangles, camera)
    vis = visible_vertices(
        DeformedMesh(verts, normals, nvalid, mesh.triangles), camera,
        render[0], config.visibility_eps_mm)
    deformed = DeformedMesh(verts, normals, nvalid, mesh.triangles, vis)
    jac = VertexJacobians(model, mesh, theta, transforms, per_bone)
    D = model.num_dof

    blocks = []
    m2d = empty_set("m2d")
    if config.use_m2d:
        m2d = match_model_to_data(deformed, observed, config)
        blocks.append(point_residuals(m2d, verts, config.metric, jac, D))
    d2m = empty_set("d2m", "ray")
    if config.use_d2m:
        d2m = match_data_to_model(deformed, observed, camera, config, render)
        blocks.append(ray_residuals(d2m, verts, jac, D))
    salient = empty_set("salient")
    if config.use_salient and detections:
        usable = [d for d in detections
                  if d.confidence >= config.confidence_threshold]
        if usable:
            w_st, w_s, fingers = build_assignment_weights(
                usable, deformed, mesh, config)
            solution = solve_assignment(w_st, w_s, config.lambda_assign)
            block, salient = residual_salient(
                solution, usable, fingers, deformed, mesh, camera, config,
                jac, D)
            blocks.append(block)
    collisions = []
    if config.use_collision and len(mesh.triangles):
        bvh = build_bvh(verts, mesh.triangles)
        collisions = find_collisions(bvh, verts, mesh.triangles,
                                     config.skip_adjacent)
        blocks.append(collision_residuals(
            collisions, verts, mesh.triangles, normals, config.cone_sigma,
            config.metric, config.collision_energy_exponent, jac, D))

    frozen = FrozenObjective(model, mesh, config, m2d, d2m, salient,
                             collision_row_layout(collisions, mesh.triangles))
    counts = {
        "m2d": len(m2d),
        "d2m": len(d2m),
        "salient": len(salient),
        "collision_pairs": len(collisions),
    }
    return blocks, frozen, counts, deformed, d2m.flagged, (m2d, d2m)


def optimize_frame(theta_init: np.ndarray, observed: ObservedFrame,
                   model: KinematicModel, mesh: SkinnedMesh,
                   detections: list | None, config: SolverConfig,
                   iterations: int | None = None,
                   check_gates: bool = False) -> FrameResult:
    """Minimize the four-term objective for one frame.

    Loops deform -> visibility -> correspondences -> damped Gauss-Newton
    step -> joint-limit projection for the configured iteration count. If no
    term produces a single row the frame is declared lost and the initial
    pose is returned unchanged.
    """
    check_mesh_matches_model(mesh, model)
    iters = config.iterations if iterations is None else iterations
    theta = clamp_to_limits(np.asarray(theta_init, dtype=float), model)
    damping = config.damping_init
    diags = []
    for _ in range(iters):
        blocks, frozen, counts, _, d2m_flag, gate_sets = build_iteration(
            theta, observed, model, mesh, detections, config)
        if check_gates:
            _check_gates(*gate_sets, config)
        rows = sum(len(b) for b in blocks)
        if rows == 0:
            return FrameResult(np.asarray(theta_init, dtype=float), True, diags,
                               frozen.term_energies(theta), counts, 0)
        e0 = frozen.total(theta)
        accepted = False
        lam = damping
        for _ in range(config.max_step_retries + 1):
            delta, lam, ok = gauss_newton_step(blocks, config.gamma_c, lam, 0)
            if ok:
                cand = clamp_to_limits(theta + delta, model)
                if frozen.total(cand) <= e0 + 1e-12:
                    theta = cand
                    accepted = True
                    break
            lam *= 10.0
        damping = max(lam / 10.0, 1e-9) if accepted else lam
        diags.append(IterationDiag(frozen.term_energies(theta),
                                   frozen.total(theta), counts, lam, accepted,
                                   d2m_flag))

    blocks, frozen, counts, _, _, _ = build_iteration(
        theta, observed, model, mesh, detections, config)
    return FrameResult(theta, False, diags, frozen.term_energies(theta),
                       counts, counts["collision_pairs"])
