"""Twist-parameterized kinematic chains for articulated tracking.

Bones form a tree under a free 6-DoF root. Each revolute joint is a unit-axis
twist anchored at a point given in the rest (world) frame; bone world
transforms follow the product-of-exponentials composition, parent to child,
so the rest pose corresponds to the all-zero pose vector.

Pose vector layout: entries 0:3 are the root translation (mm), entries 3:6 a
root rotation vector (radians), and each revolute joint owns one angle at its
``dof_index`` (>= 6).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_AXIS_TOL = 1e-9


class InvalidModelError(ValueError):
    """Joint graph is not a tree rooted at the global transform."""


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotvec_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rotation matrix from a rotation vector (axis * angle)."""
    angle = float(np.linalg.norm(r))
    if angle < 1e-12:
        k = skew(r)
        return np.eye(3) + k + 0.5 * (k @ k)
    return rotation_about_axis(np.asarray(r, dtype=float) / angle, angle)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) from a rotation matrix, angle in [0, pi]."""
    trace = float(np.trace(R))
    cos_a = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    angle = float(np.arccos(cos_a))
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        return w
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; recover axis from R + I
        M = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            axis = M[:, k] / axis[k]
            axis[k] = np.sqrt(max(M[k, k], 0.0))
        n = np.linalg.norm(axis)
        if n > 0:
            axis = axis / n
        if np.dot(axis, w) < 0:
            axis = -axis
        return axis * angle
    return w * (angle / np.sin(angle))


def so3_right_jacobian(r: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r with exp((r + J_r d)^) ~= exp(r^) exp(d^)."""
    angle = float(np.linalg.norm(r))
    k = skew(r)
    if angle < 1e-7:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - ((1.0 - np.cos(angle)) / a2) * k
        + ((angle - np.sin(angle)) / (a2 * angle)) * (k @ k)
    )


def is_rigid_transform(T: np.ndarray, tol: float = 1e-9) -> bool:
    R = T[:3, :3]
    return (
        T.shape == (4, 4)
        and np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
        and np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=tol)
    )


@dataclass(frozen=True)
class Twist:
    """Unit rotation axis plus a point on the axis (rest frame, mm)."""

    omega: np.ndarray
    q_point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        object.__setattr__(self, "q_point", np.asarray(self.q_point, dtype=float))

    @property
    def xi(self) -> np.ndarray:
        """6-vector (v, omega) with v = -omega x q."""
        return np.concatenate([-np.cross(self.omega, self.q_point), self.omega])


def twist_exp(twist: Twist, angle: float) -> np.ndarray:
    """Exponential of a revolute twist: rotation by `angle` about its axis.

    Returns a 4x4 rigid transform. For a unit axis through q the closed form
    is R = Rodrigues(omega, angle), t = (I - R) q.
    """
    norm = float(np.linalg.norm(twist.omega))
    if abs(norm - 1.0) > UNIT_AXIS_TOL:
        raise ValueError(f"twist axis must be unit length, got |omega| = {norm}")
    R = rotation_about_axis(twist.omega, angle)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = (np.eye(3) - R) @ twist.q_point
    return T


@dataclass(frozen=True)
class Joint:
    """One revolute joint; also names the bone it drives."""

    id: int
    parent_id: int
    twist: Twist
    limits: tuple[float, float]
    dof_index: int
    name: str = ""

    def __post_init__(self):
        lo, hi = self.limits
        if lo > hi:
            raise ValueError(f"joint {self.id}: limits {lo} > {hi}")


class KinematicModel:
    """Tree of revolute joints under a free 6-DoF root bone.

    Bone ids are the joint ids plus the root id; the root carries the global
    rigid transform and no twist. `num_dof` = 6 + number of revolute joints;
    joint dof indices must cover 6 .. num_dof-1 exactly.
    """

    def __init__(self, joints: list[Joint], root_id: int = 0,
                 sites: dict[str, tuple[int, np.ndarray]] | None = None):
        self.root_id = root_id
        self.joints = list(joints)
        self.sites = {k: (b, np.asarray(p, dtype=float)) for k, (b, p) in (sites or {}).items()}
        self.num_dof = 6 + len(self.joints)

        ids = [root_id] + [j.id for j in self.joints]
        if len(set(ids)) != len(ids):
            raise InvalidModelError("duplicate bone ids")
        dofs = sorted(j.dof_index for j in self.joints)
        if len(set(dofs)) != len(dofs):
            raise InvalidModelError("duplicate dof_index")
        if dofs != list(range(6, self.num_dof)):
            raise InvalidModelError("joint dof indices must cover 6..num_dof-1")

        self._joint_by_id = {j.id: j for j in self.joints}
        known = {root_id}
        # topological order; fails on cycles or unknown parents
        pending = list(self.joints)
        order: list[Joint] = []
        while pending:
            progress = False
            remaining = []
            for j in pending:
                if j.parent_id in known:
                    known.add(j.id)
                    order.append(j)
                    progress = True
                else:
                    remaining.append(j)
            if not progress:
                raise InvalidModelError("joint graph has a cycle or unknown parent")
            pending = remaining
        self._topo = order

        self.bone_ids = [root_id] + [j.id for j in order]
        self._bone_index = {b: i for i, b in enumerate(self.bone_ids)}
        # ancestor joint chain (root-to-bone order) per bone id
        self._chain: dict[int, list[Joint]] = {root_id: []}
        for j in order:
            self._chain[j.id] = self._chain[j.parent_id] + [j]

    @property
    def num_bones(self) -> int:
        return len(self.bone_ids)

    def bone_index(self, bone_id: int) -> int:
        try:
            return self._bone_index[bone_id]
        except KeyError:
            raise ValueError(f"unknown bone id {bone_id}") from None

    def joint(self, joint_id: int) -> Joint:
        return self._joint_by_id[joint_id]

    def ancestor_joints(self, bone_id: int) -> list[Joint]:
        if bone_id not in self._chain:
            raise ValueError(f"unknown bone id {bone_id}")
        return self._chain[bone_id]

    def check_pose(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.num_dof,):
            raise ValueError(f"pose length {theta.shape} != model DoF {self.num_dof}")
        return theta


def global_transform(theta: np.ndarray) -> np.ndarray:
    """Root transform from pose entries 0:3 (translation) and 3:6 (rotvec)."""
    T = np.eye(4)
    T[:3, :3] = rotvec_to_matrix(theta[3:6])
    T[:3, 3] = theta[0:3]
    return T


def chain_transforms(model: KinematicModel, theta: np.ndarray) -> np.ndarray:
    """World transform per bone, ordered as model.bone_ids; (B, 4, 4)."""
    theta = model.check_pose(theta)
    out = np.empty((model.num_bones, 4, 4))
    out[0] = global_transform(theta)
    for j in model._topo:
        pi = model.bone_index(j.parent_id)
        out[model.bone_index(j.id)] = out[pi] @ twist_exp(j.twist, theta[j.dof_index])
    return out


def clamp_to_limits(theta: np.ndarray, model: KinematicModel) -> np.ndarray:
    """Project revolute entries into their limits; root 6 DoF untouched."""
    theta = model.check_pose(theta).copy()
    for j in model.joints:
        theta[j.dof_index] = min(max(theta[j.dof_index], j.limits[0]), j.limits[1])
    return theta


class PoseDerivatives:
    """Per-pose cache of the quantities shared by all point Jacobians.

    Holds the current bone transforms, the world-frame joint axes/anchors,
    and the root rotation-vector chart Jacobian, so Jacobians of many points
    can be assembled without re-deriving per-joint data.
    """

    def __init__(self, model: KinematicModel, theta: np.ndarray,
                 transforms: np.ndarray | None = None):
        self.model = model
        self.theta = model.check_pose(theta)
        self.transforms = chain_transforms(model, theta) if transforms is None else transforms
        self.R = self.transforms[0, :3, :3]
        self.t = self.transforms[0, :3, 3]
        # d(R(r) u)/dr = -R [u]x Jr(r): chart derivative of the rotation vector
        self.Jr = so3_right_jacobian(self.theta[3:6])
        self.axis_world = {}
        self.anchor_world = {}
        for j in model.joints:
            P = self.transforms[model.bone_index(j.parent_id)]
            self.axis_world[j.id] = P[:3, :3] @ j.twist.omega
            self.anchor_world[j.id] = P[:3, :3] @ j.twist.q_point + P[:3, 3]

    def point_rows(self, bone_id: int, point: np.ndarray) -> np.ndarray:
        """Jacobian (3, D) of a world point rigidly attached to `bone_id`."""
        p = np.asarray(point, dtype=float)
        D = self.model.num_dof
        J = np.zeros((3, D))
        J[:, 0:3] = np.eye(3)
        u = self.R.T @ (p - self.t)
        J[:, 3:6] = -self.R @ skew(u) @ self.Jr
        for j in self.model.ancestor_joints(bone_id):
            J[:, j.dof_index] = np.cross(self.axis_world[j.id], p - self.anchor_world[j.id])
        return J

    def blended_rows(self, bone_ids: np.ndarray, weights: np.ndarray,
                     per_bone_points: np.ndarray) -> np.ndarray:
        """Jacobians (K, 3, D) of points blended over bones (LBS chain rule).

        bone_ids: (C,) bone ids with nonzero influence anywhere.
        weights: (K, C) per-point weight of each listed bone.
        per_bone_points: (K, C, 3) the point as carried by each bone alone.
        """
        K = weights.shape[0]
        D = self.model.num_dof
        J = np.zeros((K, 3, D))
        J[:, :, 0:3] = np.eye(3)
        v = np.einsum("kc,kcj->kj", weights, per_bone_points)
        u = (v - self.t) @ self.R  # row-wise R^T (v - t)
        S = np.zeros((K, 3, 3))
        S[:, 0, 1], S[:, 0, 2] = -u[:, 2], u[:, 1]
        S[:, 1, 0], S[:, 1, 2] = u[:, 2], -u[:, 0]
        S[:, 2, 0], S[:, 2, 1] = -u[:, 1], u[:, 0]
        J[:, :, 3:6] = np.einsum("ab,kbc,cd->kad", -self.R, S, self.Jr)
        for c, bid in enumerate(bone_ids):
            w = weights[:, c]
            rows = np.nonzero(w)[0]
            if rows.size == 0:
                continue
            for j in self.model.ancestor_joints(int(bid)):
                arm = per_bone_points[rows, c, :] - self.anchor_world[j.id]
                J[rows, :, j.dof_index] += w[rows, None] * np.cross(self.axis_world[j.id], arm)
        return J


def point_jacobian(model: KinematicModel, theta: np.ndarray, bone_id: int,
                   point: np.ndarray) -> np.ndarray:
    """Derivative (3 x DoF) of a bone-attached world point w.r.t. the pose.

    `point` is given in world coordinates at the current pose. Columns for
    non-ancestor joints are zero; translation columns are the identity; the
    root rotation columns are exact in the rotation-vector chart.
    """
    return PoseDerivatives(model, theta).point_rows(bone_id, point)


# ---------------------------------------------------------------------------
# skeleton file io
#
# Line-oriented text; one entity per line, key=value fields:
#   root id=0 name=palm
#   joint id=1 parent=0 name=mcp axis=0,0,1 point=-9,2,500 limits=-0.4,0.4 dof=6
#   site name=tip0 bone=3 point=-9,-83,500
# Comments start with '#'. Axes are normalized on load; zero axes rejected.

def _parse_fields(line: str) -> dict[str, str]:
    fields = {}
    for token in line.split()[1:]:
        if "=" not in token:
            raise ValueError(f"malformed field {token!r} in line {line!r}")
        k, v = token.split("=", 1)
        fields[k] = v
    return fields


def _vec(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")], dtype=float)


def load_skeleton(path) -> KinematicModel:
    joints: list[Joint] = []
    sites: dict[str, tuple[int, np.ndarray]] = {}
    root_id = None
    seen_dof = set()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kind = line.split()[0]
            f = _parse_fields(line)
            if kind == "root":
                if root_id is not None:
                    raise InvalidModelError("multiple root lines")
                root_id = int(f["id"])
            elif kind == "joint":
                axis = _vec(f["axis"])
                n = np.linalg.norm(axis)
                if n < 1e-12:
                    raise ValueError(f"joint {f['id']}: zero axis")
                lo, hi = _vec(f["limits"])
                dof = int(f["dof"])
                if dof in seen_dof:
                    raise InvalidModelError(f"duplicate dof_index {dof}")
                seen_dof.add(dof)
                joints.append(Joint(
                    id=int(f["id"]),
                    parent_id=int(f["parent"]),
                    twist=Twist(axis / n, _vec(f["point"])),
                    limits=(float(lo), float(hi)),
                    dof_index=dof,
                    name=f.get("name", ""),
                ))
            elif kind == "site":
                sites[f["name"]] = (int(f["bone"]), _vec(f["point"]))
            else:
                raise ValueError(f"unknown skeleton entity {kind!r}")
    if root_id is None:
        raise InvalidModelError("skeleton file has no root line")
    return KinematicModel(joints, root_id=root_id, sites=sites)


def save_skeleton(path, model: KinematicModel) -> None:
    def fmt(v):
        return ",".join(repr(float(x)) for x in v)

    with open(path, "w") as fh:
        fh.write("# articulated skeleton: mm / radians, rest frame\n")
        fh.write(f"root id={model.root_id}\n")
        for j in model.joints:
            fh.write(
                f"joint id={j.id} parent={j.parent_id} name={j.name or 'j%d' % j.id} "
                f"axis={fmt(j.twist.omega)} point={fmt(j.twist.q_point)} "
                f"limits={repr(float(j.limits[0]))},{repr(float(j.limits[1]))} "
                f"dof={j.dof_index}\n"
            )
        for name, (bone, p) in model.sites.items():
            fh.write(f"site name={name} bone={bone} point={fmt(p)}\n")


def marker_positions(model: KinematicModel, theta: np.ndarray,
                     markers: list[tuple[int, np.ndarray]],
                     transforms: np.ndarray | None = None) -> np.ndarray:
    """World positions of (bone_id, rest_point) markers under a pose."""
    T = chain_transforms(model, theta) if transforms is None else transforms
    out = np.empty((len(markers), 3))
    for i, (bone, p) in enumerate(markers):
        M = T[model.bone_index(bone)]
        out[i] = M[:3, :3] @ np.asarray(p, dtype=float) + M[:3, 3]
    return out
