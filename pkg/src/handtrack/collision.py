"""Self-collision detection and the cone penetration penalty field.

Intersecting triangle pairs are found with an AABB tree plus an exact
separating-axis triangle-triangle test. Penetration strength comes from a
n inverted cone field anchored at the receiver triangle's circumcircle: a
dimensionless radial ratio (phi), a depth profile (upsilon), and their
squared product (psi). Forces push intruding vertices along their inverse
normals with strength psi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .residuals import ResidualBlock, empty_block

DEGENERATE_AREA = 1e-12  # mm^2; smaller triangles are ignored


# ---------------------------------------------------------------------------
# cone field

def upsilon(x, sigma: float = 0.5):
    """Depth profile of the penetration cone; piecewise, nonincreasing.

    Linear -x+1-sigma below -sigma, a quadratic blend inside [-sigma, sigma],
    zero above +sigma.
    """
    x = np.asarray(x, dtype=float)
    s = sigma
    mid = -((1.0 - 2.0 * s) / (4.0 * s * s)) * x * x - x / (2.0 * s) + 0.25 * (3.0 - 2.0 * s)
    out = np.where(x <= -s, -x + 1.0 - s, np.where(x >= s, 0.0, mid))
    return out if out.ndim else float(out)


def upsilon_prime(x, sigma: float = 0.5):
    """Derivative of upsilon (right-continuous at the knots)."""
    x = np.asarray(x, dtype=float)
    s = sigma
    mid = -((1.0 - 2.0 * s) / (2.0 * s * s)) * x - 1.0 / (2.0 * s)
    out = np.where(x <= -s, -1.0, np.where(x >= s, 0.0, mid))
    return out if out.ndim else float(out)


def phi(points, origin, normal, radius, sigma: float = 0.5):
    """Radial distance from the cone axis over the local cone radius.

    Values >= 1 (or a nonpositive denominator) mean outside the field.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float)) - origin
    d = p @ normal
    radial = p - d[:, None] * normal
    rho = np.linalg.norm(radial, axis=1)
    den = -(radius / sigma) * d + radius
    out = np.where(den > 0.0, rho / np.where(den > 0.0, den, 1.0), np.inf)
    return out if np.asarray(points).ndim > 1 else float(out[0])


def psi(points, origin, normal, radius, sigma: float = 0.5):
    """Penetration strength |(1 - phi) * upsilon(n . (v - o))|^2, zero outside."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    f = np.atleast_1d(phi(p, origin, normal, radius, sigma))
    d = (p - origin) @ normal
    act = f < 1.0
    fs = np.where(act, f, 0.0)
    val = np.where(act, ((1.0 - fs) * upsilon(d, sigma)) ** 2, 0.0)
    return val if np.asarray(points).ndim > 1 else float(val[0])


def psi_with_gradient(points, origin, normal, radius, sigma: float = 0.5,
                      exponent: int = 2):
    """Field value and its gradient w.r.t. the intruding vertex position.

    exponent 2 is the squared field psi; exponent 1 is its square root
    (1 - phi) * upsilon. The receiver frame (o, n, r) is held fixed.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float)) - origin
    d = p @ normal
    radial = p - d[:, None] * normal
    rho = np.linalg.norm(radial, axis=1)
    den = -(radius / sigma) * d + radius
    inside = den > 0.0
    f = np.where(inside, rho / np.where(inside, den, 1.0), np.inf)
    act = f < 1.0
    fs = np.where(act, f, 0.0)

    u = upsilon(d, sigma)
    du = upsilon_prime(d, sigma)
    base = np.where(act, (1.0 - fs) * u, 0.0)

    # grad phi = radial_dir / den + rho (r/sigma) n / den^2
    safe_rho = np.where(rho > 1e-12, rho, 1.0)
    radial_dir = np.where((rho > 1e-12)[:, None], radial / safe_rho[:, None], 0.0)
    safe_den = np.where(inside, den, 1.0)
    grad_f = radial_dir / safe_den[:, None] \
        + (rho * (radius / sigma) / safe_den ** 2)[:, None] * normal
    # grad base = -grad_f * u + (1 - f) * du * n
    grad_f = np.where(act[:, None], grad_f, 0.0)
    grad_base = np.where(act[:, None],
                         -grad_f * u[:, None] + ((1.0 - fs) * du)[:, None] * normal,
                         0.0)
    if exponent == 1:
        return base, grad_base
    return base ** 2, 2.0 * base[:, None] * grad_base


# ---------------------------------------------------------------------------
# triangle frames

@dataclass(frozen=True)
class TriangleFrame:
    origin: np.ndarray   # circumcenter, mm
    normal: np.ndarray   # unit
    radius: float        # circumradius, mm


def triangle_frames(vertices: np.ndarray, triangles: np.ndarray) -> tuple:
    """Circumcenter, unit normal, circumradius for each triangle (vectorized)."""
    a = vertices[triangles[:, 0]]
    u = vertices[triangles[:, 1]] - a
    v = vertices[triangles[:, 2]] - a
    uu = np.einsum("ij,ij->i", u, u)
    vv = np.einsum("ij,ij->i", v, v)
    uv = np.einsum("ij,ij->i", u, v)
    det = uu * vv - uv * uv
    det = np.where(np.abs(det) > 1e-20, det, 1.0)
    s = 0.5 * (uu * vv - vv * uv) / det
    t = 0.5 * (vv * uu - uu * uv) / det
    o = a + s[:, None] * u + t[:, None] * v
    n = np.cross(u, v)
    norm = np.linalg.norm(n, axis=1)
    n = n / np.where(norm > 0, norm, 1.0)[:, None]
    r = np.linalg.norm(o - a, axis=1)
    return o, n, r


# ---------------------------------------------------------------------------
# bounding volume hierarchy

class Bvh:
    """Binary AABB tree over triangles; leaves hold at most `leaf_size` ids."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray, leaf_size: int = 4):
        if len(triangles) < 1:
            raise ValueError("BVH needs at least one triangle")
        self.leaf_size = leaf_size
        tri_pts = vertices[triangles]          # (M, 3, 3)
        self.tri_lo = tri_pts.min(axis=1)
        self.tri_hi = tri_pts.max(axis=1)
        centroids = tri_pts.mean(axis=1)

        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.empty(len(triangles), dtype=np.int64)
        stack = [(np.arange(len(triangles)), 0, None)]
        cursor = 0
        # iterative top-down build, median split on the longest centroid axis
        while stack:
            ids, node, parent_slot = stack.pop()
            idx = len(lo)
            if parent_slot is not None:
                which, pnode = parent_slot
                (left if which == 0 else right)[pnode] = idx
            lo.append(self.tri_lo[ids].min(axis=0))
            hi.append(self.tri_hi[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            if len(ids) <= leaf_size:
                start.append(cursor)
                count.append(len(ids))
                order[cursor:cursor + len(ids)] = np.sort(ids)
                cursor += len(ids)
                continue
            start.append(-1)
            count.append(0)
            c = centroids[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            perm = np.argsort(c[:, axis], kind="stable")
            half = len(ids) // 2
            stack.append((ids[perm[half:]], 0, (1, idx)))
            stack.append((ids[perm[:half]], 0, (0, idx)))
        self.node_lo = np.array(lo)
        self.node_hi = np.array(hi)
        self.node_left = np.array(left)
        self.node_right = np.array(right)
        self.node_start = np.array(start)
        self.node_count = np.array(count)
        self.order = order

    @property
    def num_nodes(self) -> int:
        return len(self.node_lo)

    def is_leaf(self, node: int) -> bool:
        return self.node_left[node] < 0

    def leaf_triangles(self, node: int) -> np.ndarray:
        s = self.node_start[node]
        return self.order[s:s + self.node_count[node]]

    def query_box(self, lo, hi) -> np.ndarray:
        """Sorted ids of triangles whose AABB overlaps [lo, hi]."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        out = []
        stack = [0]
        while stack:
            n = stack.pop()
            if np.any(self.node_lo[n] > hi) or np.any(self.node_hi[n] < lo):
                continue
            if self.is_leaf(n):
                tris = self.leaf_triangles(n)
                ok = np.all(self.tri_lo[tris] <= hi, axis=1) \
                    & np.all(self.tri_hi[tris] >= lo, axis=1)
                out.extend(tris[ok])
            else:
                stack.append(self.node_left[n])
                stack.append(self.node_right[n])
        return np.array(sorted(out), dtype=np.int64)

    def _leaf_table(self) -> np.ndarray:
        """Leaf triangle ids padded to leaf_size with -1; cached."""
        if not hasattr(self, "_leaf_pad"):
            pad = np.full((self.num_nodes, self.leaf_size), -1, dtype=np.int64)
            for n in np.nonzero(self.node_left < 0)[0]:
                t = self.leaf_triangles(n)
                pad[n, :len(t)] = t
            self._leaf_pad = pad
        return self._leaf_pad

    def candidate_pairs(self) -> np.ndarray:
        """Unordered triangle pairs (i < j) whose AABBs overlap, sorted."""
        pad = self._leaf_table()
        pairs = []
        A = np.array([0])
        B = np.array([0])
        while len(A):
            leaf_a = self.node_left[A] < 0
            leaf_b = self.node_left[B] < 0
            same = A == B
            overlap = same | ~(
                np.any(self.node_lo[A] > self.node_hi[B], axis=1)
                | np.any(self.node_hi[A] < self.node_lo[B], axis=1))
            A, B = A[overlap], B[overlap]
            leaf_a, leaf_b, same = leaf_a[overlap], leaf_b[overlap], same[overlap]

            cross = leaf_a & leaf_b & ~same
            if cross.any():
                ta = pad[A[cross]]                        # (n, L)
                tb = pad[B[cross]]
                ga = np.repeat(ta[:, :, None], self.leaf_size, axis=2)
                gb = np.repeat(tb[:, None, :], self.leaf_size, axis=1)
                ok = (ga >= 0) & (gb >= 0)
                pairs.append(np.stack([ga[ok], gb[ok]], axis=1))
            self_leaf = leaf_a & same
            if self_leaf.any():
                ta = pad[A[self_leaf]]
                ia, ib = np.triu_indices(self.leaf_size, k=1)
                ga, gb = ta[:, ia], ta[:, ib]
                ok = (ga >= 0) & (gb >= 0)
                pairs.append(np.stack([ga[ok], gb[ok]], axis=1))

            # expansion: self internal nodes split into (l,l), (r,r), (l,r);
            # mixed pairs split their larger (or only internal) side
            nxt_a, nxt_b = [], []
            si = same & ~leaf_a
            if si.any():
                l, r = self.node_left[A[si]], self.node_right[A[si]]
                nxt_a += [l, r, l]
                nxt_b += [l, r, r]
            diff = ~same & ~(leaf_a & leaf_b)
            if diff.any():
                Ad, Bd = A[diff], B[diff]
                la, lb = leaf_a[diff], leaf_b[diff]
                size_a = (self.node_hi[Ad] - self.node_lo[Ad]).max(axis=1)
                size_b = (self.node_hi[Bd] - self.node_lo[Bd]).max(axis=1)
                split_a = lb | (~la & (size_a >= size_b))
                Aa, Ba = Ad[split_a], Bd[split_a]
                nxt_a += [self.node_left[Aa], self.node_right[Aa]]
                nxt_b += [Ba, Ba]
                Ab, Bb = Ad[~split_a], Bd[~split_a]
                nxt_a += [Ab, Ab]
                nxt_b += [self.node_left[Bb], self.node_right[Bb]]
            A = np.concatenate(nxt_a) if nxt_a else np.empty(0, dtype=np.int64)
            B = np.concatenate(nxt_b) if nxt_b else np.empty(0, dtype=np.int64)
        if not pairs:
            return np.empty((0, 2), dtype=np.int64)
        P = np.concatenate(pairs)
        P = np.sort(P, axis=1)
        P = np.unique(P, axis=0)
        keep = np.all(self.tri_lo[P[:, 0]] <= self.tri_hi[P[:, 1]], axis=1) \
            & np.all(self.tri_hi[P[:, 0]] >= self.tri_lo[P[:, 1]], axis=1)
        return P[keep]


def build_bvh(vertices: np.ndarray, triangles: np.ndarray, leaf_size: int = 4) -> Bvh:
    return Bvh(vertices, triangles, leaf_size)


# ---------------------------------------------------------------------------
# exact triangle-triangle intersection (separating axis test)

def tri_tri_intersect(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Exact closed-set intersection test for (K, 3, 3) triangle batches.

    Separating-axis test over the two face normals, the nine edge-edge cross
    products, and the six in-plane edge normals (n x e); the last group is
    what decides coplanar pairs. A pair intersects iff no axis strictly
    separates the projections. Degenerate axes never separate, so skinny
    triangles are handled conservatively.
    """
    ea = np.stack([pa[:, 1] - pa[:, 0], pa[:, 2] - pa[:, 1], pa[:, 0] - pa[:, 2]], axis=1)
    eb = np.stack([pb[:, 1] - pb[:, 0], pb[:, 2] - pb[:, 1], pb[:, 0] - pb[:, 2]], axis=1)
    na = np.cross(ea[:, 0], ea[:, 1])
    nb = np.cross(eb[:, 0], eb[:, 1])
    axes = [na[:, None, :],
            nb[:, None, :],
            np.cross(ea[:, :, None, :], eb[:, None, :, :]).reshape(len(pa), 9, 3),
            np.cross(na[:, None, :], ea),
            np.cross(nb[:, None, :], eb)]
    axes = np.concatenate(axes, axis=1)        # (K, 17, 3)
    proj_a = np.einsum("kaj,kvj->kav", axes, pa)
    proj_b = np.einsum("kaj,kvj->kav", axes, pb)
    sep = (proj_a.max(axis=2) < proj_b.min(axis=2)) \
        | (proj_b.max(axis=2) < proj_a.min(axis=2))
    return ~np.any(sep, axis=1)


@dataclass(frozen=True)
class TrianglePairCollision:
    """An intersecting non-degenerate triangle pair with both receiver frames."""

    f_s: int
    f_t: int
    frame_s: TriangleFrame
    frame_t: TriangleFrame


def find_collisions(bvh: Bvh, vertices: np.ndarray, triangles: np.ndarray,
                    skip_adjacent: bool = True) -> list[TrianglePairCollision]:
    """All intersecting triangle pairs, optionally skipping vertex-sharing ones."""
    pairs = bvh.candidate_pairs()
    if len(pairs) == 0:
        return []
    if skip_adjacent:
        ta = triangles[pairs[:, 0]]
        tb = triangles[pairs[:, 1]]
        shared = np.zeros(len(pairs), dtype=bool)
        for i in range(3):
            for j in range(3):
                shared |= ta[:, i] == tb[:, j]
        pairs = pairs[~shared]
    if len(pairs) == 0:
        return []

    pa = vertices[triangles[pairs[:, 0]]]
    pb = vertices[triangles[pairs[:, 1]]]
    area_a = 0.5 * np.linalg.norm(np.cross(pa[:, 1] - pa[:, 0], pa[:, 2] - pa[:, 0]), axis=1)
    area_b = 0.5 * np.linalg.norm(np.cross(pb[:, 1] - pb[:, 0], pb[:, 2] - pb[:, 0]), axis=1)
    ok = (area_a >= DEGENERATE_AREA) & (area_b >= DEGENERATE_AREA)
    pairs, pa, pb = pairs[ok], pa[ok], pb[ok]
    if len(pairs) == 0:
        return []

    hit = tri_tri_intersect(pa, pb)
    pairs = pairs[hit]
    if len(pairs) == 0:
        return []

    ids = np.unique(pairs)
    o, n, r = triangle_frames(vertices, triangles[ids])
    frame = {int(t): TriangleFrame(o[i], n[i], float(r[i])) for i, t in enumerate(ids)}
    out = []
    for s, t in pairs:
        out.append(TrianglePairCollision(int(s), int(t), frame[int(s)], frame[int(t)]))
    return out


# ---------------------------------------------------------------------------
# residuals

def collision_row_layout(collisions, triangles: np.ndarray):
    """Flattened (vertex, receiver frame) rows, ordered by (f_s, f_t, vertex).

    Both orderings of each pair contribute: vertices of f_s against the
    frame of f_t and vice versa.
    """
    vids, origins, normals, radii = [], [], [], []
    for c in collisions:
        for v in triangles[c.f_s]:
            vids.append(v)
            origins.append(c.frame_t.origin)
            normals.append(c.frame_t.normal)
            radii.append(c.frame_t.radius)
        for v in triangles[c.f_t]:
            vids.append(v)
            origins.append(c.frame_s.origin)
            normals.append(c.frame_s.normal)
            radii.append(c.frame_s.radius)
    if not vids:
        return (np.empty(0, dtype=np.int64), np.empty((0, 3)),
                np.empty((0, 3)), np.empty(0))
    return (np.array(vids), np.array(origins), np.array(normals), np.array(radii))


def collision_field_values(layout, vertices: np.ndarray, sigma: float,
                           exponent: int = 2) -> np.ndarray:
    """Field strength per layout row at the given vertex positions."""
    vids, origins, normals, radii = layout
    if len(vids) == 0:
        return np.zeros(0)
    p = vertices[vids] - origins
    d = np.einsum("ij,ij->i", p, normals)
    radial = p - d[:, None] * normals
    rho = np.linalg.norm(radial, axis=1)
    den = -(radii / sigma) * d + radii
    inside = den > 0.0
    f = np.where(inside, rho / np.where(inside, den, 1.0), np.inf)
    act = f < 1.0
    fs = np.where(act, f, 0.0)
    base = np.where(act, (1.0 - fs) * upsilon(d, sigma), 0.0)
    return base ** 2 if exponent == 2 else base


def collision_field_with_gradients(layout, vertices: np.ndarray, sigma: float,
                                   exponent: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Field strength and its gradient w.r.t. each row's intruding vertex.

    Vectorized over layout rows with per-row receiver frames; the frames are
    constants here, so the gradients match finite differences of
    collision_field_values in the vertex positions.
    """
    vids, origins, normals, radii = layout
    if len(vids) == 0:
        return np.zeros(0), np.zeros((0, 3))
    p = vertices[vids] - origins
    d = np.einsum("ij,ij->i", p, normals)
    radial = p - d[:, None] * normals
    rho = np.linalg.norm(radial, axis=1)
    den = -(radii / sigma) * d + radii
    inside = den > 0.0
    f = np.where(inside, rho / np.where(inside, den, 1.0), np.inf)
    act = f < 1.0
    fs = np.where(act, f, 0.0)
    u = upsilon(d, sigma)
    du = upsilon_prime(d, sigma)
    base = np.where(act, (1.0 - fs) * u, 0.0)
    safe_rho = np.where(rho > 1e-12, rho, 1.0)
    radial_dir = np.where((rho > 1e-12)[:, None], radial / safe_rho[:, None], 0.0)
    safe_den = np.where(inside, den, 1.0)
    grad_f = radial_dir / safe_den[:, None] \
        + ((rho * (radii / sigma)) / safe_den ** 2)[:, None] * normals
    grad_f = np.where(act[:, None], grad_f, 0.0)
    grad_base = np.where(act[:, None],
                         -grad_f * u[:, None] + ((1.0 - fs) * du)[:, None] * normals,
                         0.0)
    if exponent == 2:
        return base ** 2, 2.0 * base[:, None] * grad_base
    return base, grad_base


def collision_residuals(collisions, vertices: np.ndarray, triangles: np.ndarray,
                        vertex_normals: np.ndarray, sigma: float = 0.5,
                        metric: str = "p2plane", exponent: int = 2,
                        vertex_jacobians=None, num_dof: int = 0) -> ResidualBlock:
    """Residual block for the collision term.

    Per layout row the scalar strength is the cone field at the intruding
    vertex; the residual is -strength (point-to-plane) or the 3-vector
    -strength * vertex_normal (point-to-point). `vertex_jacobians` maps
    vertex ids to (K, 3, D) pose derivatives; without it the block carries
    residual values only (J all zero), which is enough for energy checks.
    """
    layout = collision_row_layout(collisions, triangles)
    vids = layout[0]
    if len(vids) == 0:
        return empty_block("collision", num_dof)
    vals, grads = collision_field_with_gradients(layout, vertices, sigma, exponent)

    keep = vals > 0.0
    vids, vals, grads = vids[keep], vals[keep], grads[keep]
    if len(vids) == 0:
        return empty_block("collision", num_dof)

    if vertex_jacobians is not None:
        Jv = vertex_jacobians(vids)             # (K, 3, D)
        num_dof = Jv.shape[2]
    else:
        Jv = np.zeros((len(vids), 3, max(num_dof, 1)))
        num_dof = Jv.shape[2]

    if metric == "p2plane":
        r = -vals
        J = -np.einsum("kj,kjd->kd", grads, Jv)
        return ResidualBlock("collision", r, J)
    # p2p: residual = -val * n_v with the vertex normal held fixed
    nv = vertex_normals[vids]
    r = (-vals[:, None] * nv).ravel()
    J = (-nv[:, :, None] * np.einsum("kj,kjd->kd", grads, Jv)[:, None, :]).reshape(-1, num_dof)
    return ResidualBlock("collision", r, J)


def collision_energy(collisions, vertices: np.ndarray, triangles: np.ndarray,
                     sigma: float = 0.5, exponent: int = 2) -> float:
    """Sum of squared field strengths over all layout rows (both orderings)."""
    layout = collision_row_layout(collisions, triangles)
    vals = collision_field_values(layout, vertices, sigma, exponent)
    return float(np.sum(vals ** 2))
