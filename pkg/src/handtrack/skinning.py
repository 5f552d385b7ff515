"""Skinned triangle mesh: LBS deformation, normals, projection, depth rendering.

Vertices deform as a weight-blended sum of per-bone rigid motions relative to
the rigging pose. Rendering is a plain z-buffer rasterizer with
perspective-correct depth; background pixels hold the sentinel 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .kinematics import KinematicModel


@dataclass
class Camera:
    """Pinhole intrinsics; u = fx*x/z + cx, v = fy*y/z + cy, units mm / px."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale_mm: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class SkinnedMesh:
    """Rest-pose triangle mesh with per-vertex skinning weights.

    weights[:, c] is the influence of bone bone_ids[c]; rows are nonnegative
    and sum to 1. finger_labels marks salient-part vertices (-1 elsewhere).
    """

    vertices_rest: np.ndarray          # (N, 3) mm
    triangles: np.ndarray              # (M, 3) int
    weights: np.ndarray                # (N, B)
    bone_ids: list[int]
    finger_labels: np.ndarray | None = None  # (N,) int, -1 = unlabeled

    def __post_init__(self):
        self.vertices_rest = np.asarray(self.vertices_rest, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        n = len(self.vertices_rest)
        if self.weights.shape != (n, len(self.bone_ids)):
            raise ValueError("weight matrix shape does not match vertices x bones")
        if np.any(self.weights < -1e-12):
            raise ValueError("skinning weights must be nonnegative")
        sums = self.weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("per-vertex skinning weights must sum to 1")
        if self.triangles.size and (self.triangles.min() < 0 or
                                    self.triangles.max() >= n):
            raise ValueError("triangle indices out of range")
        if self.finger_labels is not None:
            self.finger_labels = np.asarray(self.finger_labels, dtype=np.int64)
        if not _edge_manifold(self.triangles):
            warnings.warn("mesh is not edge-manifold", stacklevel=2)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices_rest)

    def finger_vertex_ids(self, label: int) -> np.ndarray:
        if self.finger_labels is None:
            return np.empty(0, dtype=np.int64)
        return np.nonzero(self.finger_labels == label)[0]

    def finger_label_set(self) -> list[int]:
        if self.finger_labels is None:
            return []
        return sorted(int(x) for x in np.unique(self.finger_labels) if x >= 0)


def _edge_manifold(triangles: np.ndarray) -> bool:
    if triangles.size == 0:
        return True
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                            triangles[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts <= 2))


@dataclass
class DeformedMesh:
    vertices: np.ndarray               # (N, 3) mm
    vertex_normals: np.ndarray         # (N, 3) unit
    normals_valid: np.ndarray          # (N,) bool
    triangles: np.ndarray              # (M, 3) int, shared with the rest mesh
    visibility: np.ndarray | None = None  # (N,) bool, for a given camera


def skinning_matrices(transforms_now: np.ndarray,
                      transforms_rig: np.ndarray | None = None) -> np.ndarray:
    """Per-bone motion relative to the rigging pose: T_now @ inv(T_rig)."""
    A = np.asarray(transforms_now, dtype=float)
    if transforms_rig is not None:
        A = A @ np.linalg.inv(transforms_rig)
    return A


def lbs_per_bone(mesh: SkinnedMesh, matrices: np.ndarray) -> np.ndarray:
    """Each vertex as carried rigidly by each bone: (B, N, 3)."""
    if matrices.shape[0] != len(mesh.bone_ids):
        raise ValueError("bone transform count does not match mesh weights")
    v0 = mesh.vertices_rest
    return np.einsum("bij,nj->bni", matrices[:, :3, :3], v0) + matrices[:, None, :3, 3]


def lbs_deform(mesh: SkinnedMesh, transforms_now: np.ndarray,
               transforms_rig: np.ndarray | None = None) -> np.ndarray:
    """Linear blend skinning: weighted sum of per-bone rigid motions, (N, 3)."""
    A = skinning_matrices(transforms_now, transforms_rig)
    per_bone = lbs_per_bone(mesh, A)
    return np.einsum("nb,bnj->nj", mesh.weights, per_bone)


def compute_vertex_normals(vertices: np.ndarray,
                           triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted vertex normals; returns (normals, valid) with invalid rows zero."""
    n = len(vertices)
    acc = np.zeros((n, 3))
    if triangles.size:
        a = vertices[triangles[:, 0]]
        fn = np.cross(vertices[triangles[:, 1]] - a, vertices[triangles[:, 2]] - a)
        for c in range(3):
            np.add.at(acc, triangles[:, c], fn)
    norms = np.linalg.norm(acc, axis=1)
    valid = norms > 1e-12
    out = np.zeros((n, 3))
    out[valid] = acc[valid] / norms[valid, None]
    # cancelled stars: fall back to any nonzero incident face normal
    if triangles.size and not valid.all():
        a = vertices[triangles[:, 0]]
        fn = np.cross(vertices[triangles[:, 1]] - a, vertices[triangles[:, 2]] - a)
        fnorm = np.linalg.norm(fn, axis=1)
        for vid in np.nonzero(~valid)[0]:
            rows = np.nonzero(np.any(triangles == vid, axis=1))[0]
            for r in rows:
                if fnorm[r] > 1e-12:
                    out[vid] = fn[r] / fnorm[r]
                    valid[vid] = True
                    break
    return out, valid


def deform(mesh: SkinnedMesh, transforms_now: np.ndarray,
           transforms_rig: np.ndarray | None = None) -> DeformedMesh:
    verts = lbs_deform(mesh, transforms_now, transforms_rig)
    normals, valid = compute_vertex_normals(verts, mesh.triangles)
    return DeformedMesh(verts, normals, valid, mesh.triangles)


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project (N, 3) points; returns (uv (N, 2), z (N,)). Caller masks z <= 0."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * p[:, 0] / z + camera.cx
        v = camera.fy * p[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1), z


def project(camera: Camera, point: np.ndarray) -> tuple[float, float, float]:
    """Single-point projection; raises on z <= 0 (behind camera)."""
    point = np.asarray(point, dtype=float)
    if point[2] <= 0:
        raise ValueError("point is behind the camera")
    uv, z = project_points(camera, point)
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def backproject(camera: Camera, u, v, z) -> np.ndarray:
    """Inverse of project for pixel coordinates and depth (mm)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    x = (u - camera.cx) * z / camera.fx
    y = (v - camera.cy) * z / camera.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def render_depth(vertices: np.ndarray, triangles: np.ndarray,
                 camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer rasterization; returns (depth mm, triangle id) maps.

    Depth is perspective-correct (inverse-depth interpolation); pixels are
    sampled at integer (u, v). Background depth is 0, background id is -1.
    Triangles with any vertex at z <= 0 are skipped (no near-plane clipping).
    """
    H, W = camera.height, camera.width
    depth = np.zeros((H, W))
    tri_id = np.full((H, W), -1, dtype=np.int32)
    if len(vertices) == 0 or len(triangles) == 0:
        return depth, tri_id

    uv, z = project_points(camera, vertices)
    u, v = uv[:, 0], uv[:, 1]
    ok = np.all(z[triangles] > 0.0, axis=1)
    inv_z = np.where(z > 0, 1.0 / np.where(z > 0, z, 1.0), 0.0)

    for t in np.nonzero(ok)[0]:
        i0, i1, i2 = triangles[t]
        u0, u1, u2 = u[i0], u[i1], u[i2]
        v0, v1, v2 = v[i0], v[i1], v[i2]
        det = (v1 - v2) * (u0 - u2) + (u2 - u1) * (v0 - v2)
        if abs(det) < 1e-12:
            continue
        lo_u = max(int(np.ceil(min(u0, u1, u2))), 0)
        hi_u = min(int(np.floor(max(u0, u1, u2))), W - 1)
        lo_v = max(int(np.ceil(min(v0, v1, v2))), 0)
        hi_v = min(int(np.floor(max(v0, v1, v2))), H - 1)
        if lo_u > hi_u or lo_v > hi_v:
            continue
        gu = np.arange(lo_u, hi_u + 1)[None, :]
        gv = np.arange(lo_v, hi_v + 1)[:, None]
        l0 = ((v1 - v2) * (gu - u2) + (u2 - u1) * (gv - v2)) / det
        l1 = ((v2 - v0) * (gu - u2) + (u0 - u2) * (gv - v2)) / det
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        zi = l0 * inv_z[i0] + l1 * inv_z[i1] + l2 * inv_z[i2]
        with np.errstate(divide="ignore"):
            zpix = np.where(zi > 0, 1.0 / np.where(zi > 0, zi, 1.0), np.inf)
        win_d = depth[lo_v:hi_v + 1, lo_u:hi_u + 1]
        win_t = tri_id[lo_v:hi_v + 1, lo_u:hi_u + 1]
        upd = inside & ((win_d == 0.0) | (zpix < win_d))
        win_d[upd] = zpix[upd]
        win_t[upd] = t
    return depth, tri_id


def visible_vertices(deformed: DeformedMesh, camera: Camera,
                     depth_render: np.ndarray, eps_mm: float = 5.0) -> np.ndarray:
    """Vertex visible iff it projects in-image and lies within eps of the z-buffer.

    A background pixel (0) holds no surface, so nothing occludes a vertex
    rounding onto it; such vertices count as visible. This keeps silhouette
    vertices of an unoccluded patch visible despite pixel rounding.
    """
    uv, z = project_points(camera, deformed.vertices)
    px = np.rint(uv).astype(np.int64)
    H, W = depth_render.shape
    vis = (z > 0) & (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
    idx = np.nonzero(vis)[0]
    d = depth_render[px[idx, 1], px[idx, 0]]
    vis[idx] = (d == 0.0) | (z[idx] <= d + eps_mm)
    return vis


# ---------------------------------------------------------------------------
# mesh file io
#
# Line-oriented text:
#   bones 0,1,2            column order for weight rows
#   v x y z                vertices in index order (mm)
#   t i j k                triangle vertex indices
#   w vid id:w [id:w ...]  skinning weights, bone ids from the bones line
#   finger vid label       optional salient-part labels

def save_mesh(path, mesh: SkinnedMesh) -> None:
    with open(path, "w") as fh:
        fh.write("# skinned mesh, mm\n")
        fh.write("bones " + ",".join(str(b) for b in mesh.bone_ids) + "\n")
        for p in mesh.vertices_rest:
            fh.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for tri in mesh.triangles:
            fh.write(f"t {tri[0]} {tri[1]} {tri[2]}\n")
        for vid, row in enumerate(mesh.weights):
            nz = np.nonzero(row)[0]
            pairs = " ".join(f"{mesh.bone_ids[c]}:{float(row[c])!r}" for c in nz)
            fh.write(f"w {vid} {pairs}\n")
        if mesh.finger_labels is not None:
            for vid in np.nonzero(mesh.finger_labels >= 0)[0]:
                fh.write(f"finger {vid} {mesh.finger_labels[vid]}\n")


def load_mesh(path) -> SkinnedMesh:
    verts, tris, wrows, labels = [], [], [], []
    bone_ids: list[int] | None = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "bones":
                bone_ids = [int(x) for x in parts[1].split(",")]
            elif parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "t":
                tris.append([int(x) for x in parts[1:4]])
            elif parts[0] == "w":
                vid = int(parts[1])
                pairs = []
                for tok in parts[2:]:
                    b, w = tok.split(":")
                    pairs.append((int(b), float(w)))
                wrows.append((vid, pairs))
            elif parts[0] == "finger":
                labels.append((int(parts[1]), int(parts[2])))
            else:
                raise ValueError(f"unknown mesh row {parts[0]!r}")
    if bone_ids is None:
        raise ValueError("mesh file has no bones line")
    n = len(verts)
    col = {b: c for c, b in enumerate(bone_ids)}
    W = np.zeros((n, len(bone_ids)))
    for vid, pairs in wrows:
        for b, w in pairs:
            if b not in col:
                raise ValueError(f"weight row references unknown bone {b}")
            W[vid, col[b]] = w
    finger = None
    if labels:
        finger = np.full(n, -1, dtype=np.int64)
        for vid, lab in labels:
            finger[vid] = lab
    return SkinnedMesh(np.array(verts), np.array(tris, dtype=np.int64), W,
                       bone_ids, finger)


def check_mesh_matches_model(mesh: SkinnedMesh, model: KinematicModel) -> None:
    if list(mesh.bone_ids) != list(model.bone_ids):
        raise ValueError(
            f"mesh bone order {mesh.bone_ids} does not match model {model.bone_ids}")
