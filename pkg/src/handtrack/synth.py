"""Synthetic articulated test geometry and ground-truthed depth sequences.

Builds procedural capsule-finger hand models (skeleton + skinned mesh),
drives them along scripted trajectories, renders depth frames with exact
masks, and simulates fingertip detections. A single seed controls all
randomness so sequences are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import Joint, KinematicModel, Twist, chain_transforms
from .skinning import Camera, SkinnedMesh, deform, project_points, render_depth

UP = np.array([0.0, -1.0, 0.0])  # finger direction (up in image coordinates)


# ---------------------------------------------------------------------------
# mesh primitives

def _orthonormal_frame(axis):
    a = axis / np.linalg.norm(axis)
    h = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(a, h)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return a, e1, e2


def capsule(p0, p1, radius, n_theta=12, n_cap=4, ring_spacing=4.0):
    """Closed capsule mesh from cap center p0 to cap center p1."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    a, e1, e2 = _orthonormal_frame(p1 - p0)
    length = float(np.linalg.norm(p1 - p0))
    theta = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    circle = np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2)

    rings = []
    # bottom hemisphere, near-pole ring to equator (poles are apex vertices)
    for k in range(n_cap - 1, 0, -1):
        phi = 0.5 * np.pi * k / n_cap
        rings.append(p0 + radius * (np.cos(phi) * circle - np.sin(phi) * a))
    n_side = max(int(round(length / ring_spacing)), 1)
    for i in range(n_side + 1):
        rings.append(p0 + (length * i / n_side) * a + radius * circle)
    # top hemisphere, equator to pole
    for k in range(1, n_cap):
        phi = 0.5 * np.pi * k / n_cap
        rings.append(p1 + radius * (np.cos(phi) * circle + np.sin(phi) * a))

    verts = [p0 - radius * a] + [q for ring in rings for q in ring] + [p1 + radius * a]
    verts = np.array(verts)
    bottom, top = 0, len(verts) - 1

    tris = []
    first = 1
    ring0 = list(range(first, first + n_theta))
    for j in range(n_theta):
        tris.append([bottom, ring0[(j + 1) % n_theta], ring0[j]])
    for r in range(len(rings) - 1):
        lo = first + r * n_theta
        hi = lo + n_theta
        for j in range(n_theta):
            j2 = (j + 1) % n_theta
            tris.append([lo + j, lo + j2, hi + j])
            tris.append([lo + j2, hi + j2, hi + j])
    last = first + (len(rings) - 1) * n_theta
    for j in range(n_theta):
        tris.append([top, last + j, last + (j + 1) % n_theta])
    return verts, np.array(tris, dtype=np.int64)


def icosphere(radius=1.0, center=(0.0, 0.0, 0.0), subdivisions=2):
    """Subdivided icosahedron; vertices lie exactly on the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts[0])
    tris = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        cache = {}
        verts = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_tris = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts)
        tris = np.array(new_tris, dtype=np.int64)
    return verts * radius + np.asarray(center, dtype=float), tris


def plane_grid(nx=10, ny=10, spacing=10.0, z=500.0, center=(0.0, 0.0)):
    """Open front-parallel grid plane at constant depth, two triangles per cell."""
    xs = (np.arange(nx) - (nx - 1) / 2) * spacing + center[0]
    ys = (np.arange(ny) - (ny - 1) / 2) * spacing + center[1]
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(nx * ny, float(z))], axis=1)
    tris = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            tris.append([a, a + 1, a + nx])
            tris.append([a + 1, a + nx + 1, a + nx])
    return verts, np.array(tris, dtype=np.int64)


def _point_segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


# ---------------------------------------------------------------------------
# procedural hand

@dataclass
class HandGeometry:
    num_fingers: int = 2
    depth_mm: float = 500.0
    finger_spacing: float = 22.0
    finger_radius: float = 7.0
    segment_lengths: tuple = (28.0, 22.0, 18.0)
    palm_radius: float = 14.0
    palm_squash: float = 0.6
    spread_limit: float = 0.44          # ~25 deg
    flex_limits: tuple = (-0.35, 1.75)
    n_theta: int = 12
    weight_tau: float = 6.0


def build_hand(geom: HandGeometry | None = None):
    """Procedural capsule hand; returns (KinematicModel, SkinnedMesh).

    Bone layout per finger f: a zero-length spread bone (rotation about z in
    the image plane) then proximal/middle/distal flexion bones (rotation
    about x, toward the camera). The palm is rigid with the root. The distal
    third of each finger is labeled as salient part f and carries a tip site.
    """
    g = geom or HandGeometry()
    z0 = g.depth_mm
    nf = g.num_fingers
    xs = (np.arange(nf) - (nf - 1) / 2) * g.finger_spacing
    base_y = 1.0
    l1, l2, l3 = g.segment_lengths

    joints = []
    sites = {}
    finger_bones = []
    bid = 1
    dof = 6
    for f in range(nf):
        x = xs[f]
        knuckle = np.array([x, base_y, z0])
        pip = knuckle + UP * l1
        dip = knuckle + UP * (l1 + l2)
        tip_cap = knuckle + UP * (l1 + l2 + l3)
        spread, prox, mid, dist = bid, bid + 1, bid + 2, bid + 3
        joints += [
            Joint(spread, 0, Twist(np.array([0.0, 0.0, 1.0]), knuckle),
                  (-g.spread_limit, g.spread_limit), dof, f"f{f}_spread"),
            Joint(prox, spread, Twist(np.array([1.0, 0.0, 0.0]), knuckle),
                  g.flex_limits, dof + 1, f"f{f}_mcp"),
            Joint(mid, prox, Twist(np.array([1.0, 0.0, 0.0]), pip),
                  g.flex_limits, dof + 2, f"f{f}_pip"),
            Joint(dist, mid, Twist(np.array([1.0, 0.0, 0.0]), dip),
                  g.flex_limits, dof + 3, f"f{f}_dip"),
        ]
        sites[f"tip{f}"] = (dist, tip_cap + UP * g.finger_radius)
        finger_bones.append({
            "bones": (prox, mid, dist),
            "segments": [(knuckle, pip), (pip, dip), (dip, tip_cap)],
            "capsule": (knuckle, tip_cap),
            "x": x,
        })
        bid += 4
        dof += 4
    model = KinematicModel(joints, root_id=0, sites=sites)

    # palm capsule along x, squashed in z, sitting just below the knuckles
    palm_y = base_y + g.finger_radius + 2.0 + g.palm_radius
    half_w = max(xs.max() - xs.min(), 4.0) / 2 + 4.0
    pv, pt = capsule(np.array([-half_w, palm_y, z0]), np.array([half_w, palm_y, z0]),
                     g.palm_radius, n_theta=16, n_cap=4, ring_spacing=4.0)
    pv[:, 2] = z0 + (pv[:, 2] - z0) * g.palm_squash

    all_v = [pv]
    all_t = [pt]
    owner = [np.full(len(pv), -1)]  # -1 = palm, else finger index
    for f, fb in enumerate(finger_bones):
        a, b = fb["capsule"]
        fv, ft = capsule(a, b, g.finger_radius, n_theta=g.n_theta,
                         n_cap=3, ring_spacing=3.5)
        all_t.append(ft + sum(len(v) for v in all_v))
        all_v.append(fv)
        owner.append(np.full(len(fv), f))
    verts = np.concatenate(all_v)
    tris = np.concatenate(all_t)
    owner = np.concatenate(owner)

    bone_ids = model.bone_ids
    col = {b: c for c, b in enumerate(bone_ids)}
    W = np.zeros((len(verts), len(bone_ids)))
    W[owner == -1, col[0]] = 1.0
    for f, fb in enumerate(finger_bones):
        rows = np.nonzero(owner == f)[0]
        pts = verts[rows]
        # palm distance measured to its surface, offset so on-surface finger
        # verts compare on equal footing with the axis-distance finger bones
        cand = [(col[0], _point_segment_distance(
            pts, np.array([-half_w, palm_y, z0]), np.array([half_w, palm_y, z0]))
            - g.palm_radius + g.finger_radius)]
        for bone, (a, b) in zip(fb["bones"], fb["segments"]):
            cand.append((col[bone], _point_segment_distance(pts, a, b)))
        w = np.zeros((len(rows), len(cand)))
        for i, (_, d) in enumerate(cand):
            w[:, i] = np.exp(-(np.maximum(d, 0.0) / g.weight_tau) ** 2)
        w /= w.sum(axis=1, keepdims=True)
        w[w < 1e-4] = 0.0
        w /= w.sum(axis=1, keepdims=True)
        for i, (c, _) in enumerate(cand):
            W[rows, c] = w[:, i]

    labels = np.full(len(verts), -1, dtype=np.int64)
    for f, fb in enumerate(finger_bones):
        tip = fb["capsule"][1] + UP * g.finger_radius
        near_tip = (owner == f) & (np.linalg.norm(verts - tip, axis=1) < l3 * 0.9)
        labels[near_tip] = f

    mesh = SkinnedMesh(verts, tris, W, bone_ids, labels)
    return model, mesh


def default_camera(width=640, height=480):
    return Camera(fx=525.0, fy=525.0, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height)


# ---------------------------------------------------------------------------
# trajectories

def pose_rest(model):
    return np.zeros(model.num_dof)


def trajectory_wave(model, num_frames, max_step_deg=4.0, seed=0):
    """Smooth per-joint sinusoids bounded by the joint limits and step size."""
    rng = np.random.default_rng(seed)
    thetas = np.zeros((num_frames, model.num_dof))
    t = np.arange(num_frames)
    for j in model.joints:
        lo, hi = j.limits
        mid = 0.5 * (lo + hi)
        span = 0.5 * (hi - lo)
        amp = min(0.6 * span, np.deg2rad(25.0))
        # per-frame slope <= amp * omega; keep below the step budget
        omega = np.deg2rad(max_step_deg) / max(amp, 1e-9) * 0.9
        phase = rng.uniform(0, 2 * np.pi)
        thetas[:, j.dof_index] = np.clip(amp * np.sin(omega * t + phase), lo, hi)
    # gentle global drift
    thetas[:, 0] = 8.0 * np.sin(2 * np.pi * t / max(num_frames, 1))
    thetas[:, 1] = 5.0 * np.sin(2 * np.pi * t / max(2 * num_frames, 1))
    thetas[:, 5] = np.deg2rad(4.0) * np.sin(2 * np.pi * t / max(num_frames, 1))
    return thetas


def trajectory_static(model, num_frames, theta=None):
    base = pose_rest(model) if theta is None else np.asarray(theta, dtype=float)
    return np.tile(base, (num_frames, 1))


def trajectory_cross(model, num_frames, reach_deg=14.0):
    """Two-finger scissor motion: spread joints sweep toward each other."""
    thetas = np.zeros((num_frames, model.num_dof))
    t = np.linspace(0.0, 1.0, num_frames)
    sweep = np.deg2rad(reach_deg) * np.sin(np.pi * t)
    spread0 = model.joints[0].dof_index       # finger 0 spread
    spread1 = model.joints[4].dof_index       # finger 1 spread
    thetas[:, spread0] = sweep                # +x: toward finger 1
    thetas[:, spread1] = -sweep               # -x: toward finger 0
    return thetas


# ---------------------------------------------------------------------------
# sequence generation

@dataclass
class NoiseSpec:
    depth_sigma_mm: float = 1.0
    quantize_mm: float = 1.0
    detection_sigma_mm: float = 3.0
    detection_region_px: int = 5
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    confidence_range: tuple = (3.0, 6.0)


@dataclass
class SyntheticFrame:
    index: int
    depth: np.ndarray           # noisy, quantized, mm; 0 = background
    mask: np.ndarray            # exact foreground mask (pre-noise)
    truth_depth: np.ndarray     # clean render
    detections: list            # list[DetectionRecord]
    in_frustum: bool


@dataclass
class SyntheticSequence:
    model: KinematicModel
    mesh: SkinnedMesh
    camera: Camera
    truth: np.ndarray           # (F, D) ground-truth poses
    frames: list                # list[SyntheticFrame]
    seed: int


def simulate_detections(model, mesh, camera, theta, depth, rng, noise: NoiseSpec):
    """Perturbed fingertip detections with confidences, misses, false positives."""
    from .registration import DetectionRecord

    out = []
    transforms = chain_transforms(model, theta)
    tips = []
    for name in sorted(model.sites):
        bone, p = model.sites[name]
        T = transforms[model.bone_index(bone)]
        tips.append(T[:3, :3] @ p + T[:3, 3])
    for tip in tips:
        if rng.uniform() < noise.miss_rate:
            continue
        c3d = tip + rng.normal(0.0, noise.detection_sigma_mm, 3)
        rec = _detection_from_point(c3d, camera, depth, rng, noise)
        if rec is not None:
            out.append(rec)
    n_fp = rng.poisson(noise.false_positive_rate)
    for _ in range(n_fp):
        base = tips[int(rng.integers(len(tips)))]
        c3d = base + rng.uniform(-60, 60, 3)
        rec = _detection_from_point(c3d, camera, depth, rng, noise)
        if rec is not None:
            out.append(rec)
    return out


def _detection_from_point(c3d, camera, depth, rng, noise: NoiseSpec):
    from .registration import DetectionRecord

    if c3d[2] <= 0:
        return None
    uv, _ = project_points(camera, c3d)
    u0, v0 = int(round(uv[0, 0])), int(round(uv[0, 1]))
    r = noise.detection_region_px
    if not (0 <= u0 < camera.width and 0 <= v0 < camera.height):
        return None
    us, vs = np.meshgrid(np.arange(u0 - r, u0 + r + 1), np.arange(v0 - r, v0 + r + 1))
    keep = ((us - u0) ** 2 + (vs - v0) ** 2 <= r * r) \
        & (us >= 0) & (us < camera.width) & (vs >= 0) & (vs < camera.height)
    region = np.stack([us[keep], vs[keep]], axis=1)
    conf = float(rng.uniform(*noise.confidence_range))
    return DetectionRecord(frame_index=-1, region=region, centroid_3d=c3d,
                           confidence=conf)


def generate_sequence(model, mesh, camera, truth_poses, noise: NoiseSpec | None = None,
                      seed: int = 0, detections: bool = True) -> SyntheticSequence:
    noise = noise or NoiseSpec()
    rng = np.random.default_rng(seed)
    truth_poses = np.asarray(truth_poses, dtype=float)
    frames = []
    for k, theta in enumerate(truth_poses):
        transforms = chain_transforms(model, theta)
        dm = deform(mesh, transforms)
        depth, _ = render_depth(dm.vertices, mesh.triangles, camera)
        mask = depth > 0
        uv, z = project_points(camera, dm.vertices)
        in_frustum = bool(np.all((uv[:, 0] >= 0) & (uv[:, 0] <= camera.width - 1)
                                 & (uv[:, 1] >= 0) & (uv[:, 1] <= camera.height - 1)
                                 & (z > 0)))
        noisy = depth.copy()
        if noise.depth_sigma_mm > 0:
            noisy[mask] += rng.normal(0.0, noise.depth_sigma_mm, int(mask.sum()))
        if noise.quantize_mm > 0:
            noisy = np.round(noisy / noise.quantize_mm) * noise.quantize_mm
        noisy[~mask] = 0.0
        noisy = np.maximum(noisy, 0.0)
        dets = []
        if detections:
            dets = simulate_detections(model, mesh, camera, theta, noisy, rng, noise)
            for d in dets:
                d.frame_index = k
        frames.append(SyntheticFrame(k, noisy, mask, depth, dets, in_frustum))
    return SyntheticSequence(model, mesh, camera, truth_poses, frames, seed)
