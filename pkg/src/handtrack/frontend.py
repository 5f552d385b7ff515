"""Depth frame preprocessing: masking, smoothing, cloud, normals, edges.

Turns a raw masked depth map into everything the registration terms consume:
an organized point cloud with camera-facing normals, depth-discontinuity
edge pixels with locally averaged depth, and the exact Euclidean distance
transform of the edge set. All steps are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .config import PreprocessConfig
from .skinning import Camera, backproject


@dataclass
class RawFrame:
    depth: np.ndarray       # (H, W) mm, 0 = invalid
    mask: np.ndarray        # (H, W) bool foreground
    frame_index: int = 0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.depth.shape != self.mask.shape:
            raise ValueError("depth and mask dimensions differ")
        if np.any(self.depth < 0):
            raise ValueError("depth must be nonnegative")


@dataclass
class ObservedFrame:
    """Preprocessed frame; `cloud[i]` backprojects pixel `cloud_pixels[i]`."""

    camera: Camera
    frame_index: int
    depth: np.ndarray              # smoothed masked depth, 0 = invalid
    cloud: np.ndarray              # (P, 3) mm
    cloud_pixels: np.ndarray       # (P, 2) int (u, v)
    normals: np.ndarray            # (P, 3) unit, toward camera
    normals_valid: np.ndarray      # (P,) bool
    edge_pixels: np.ndarray        # (E, 2) int (u, v)
    edge_depth: np.ndarray         # (E,) mm, 3x3-averaged
    edge_distance: np.ndarray      # (H, W) px, exact EDT of the edge set
    edge_nearest: np.ndarray       # (H, W) int index into edge_pixels, -1 if none
    _tree: object = field(default=None, repr=False, compare=False)

    def cloud_tree(self) -> cKDTree:
        """KD-tree over cloud points with valid normals (lazily built)."""
        if self._tree is None:
            pts = self.cloud[self.normals_valid]
            self._tree = (cKDTree(pts) if len(pts) else None,
                          np.nonzero(self.normals_valid)[0])
        return self._tree


def threshold_mask(raw: RawFrame, near_mm: float, far_mm: float) -> RawFrame:
    """Zero out pixels outside [near, far] or outside the mask."""
    if near_mm >= far_mm:
        raise ValueError("near threshold must be below far threshold")
    keep = raw.mask & (raw.depth >= near_mm) & (raw.depth <= far_mm)
    depth = np.where(keep, raw.depth, 0.0)
    return RawFrame(depth, keep, raw.frame_index)


def bilateral_smooth(depth: np.ndarray, spatial_sigma_px: float = 3.0,
                     range_sigma_mm: float = 20.0) -> np.ndarray:
    """Edge-preserving smoothing; invalid (0) pixels neither give nor take."""
    valid = depth > 0
    if not valid.any():
        return depth.copy()
    radius = max(int(np.ceil(2.0 * spatial_sigma_px)), 1)
    vs, us = np.nonzero(valid)
    v0, v1 = vs.min(), vs.max() + 1
    u0, u1 = us.min(), us.max() + 1
    v0, u0 = max(v0 - radius, 0), max(u0 - radius, 0)
    v1 = min(v1 + radius, depth.shape[0])
    u1 = min(u1 + radius, depth.shape[1])

    d = depth[v0:v1, u0:u1]
    m = valid[v0:v1, u0:u1]
    num = np.zeros_like(d)
    den = np.zeros_like(d)
    inv2ss = 1.0 / (2.0 * spatial_sigma_px ** 2)
    inv2rs = 1.0 / (2.0 * range_sigma_mm ** 2)
    H, W = d.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            sw = np.exp(-(dy * dy + dx * dx) * inv2ss)
            ys = slice(max(dy, 0), H + min(dy, 0))
            yd = slice(max(-dy, 0), H + min(-dy, 0))
            xs = slice(max(dx, 0), W + min(dx, 0))
            xd = slice(max(-dx, 0), W + min(-dx, 0))
            nb = d[ys, xs]
            ok = m[ys, xs]
            w = sw * np.exp(-(nb - d[yd, xd]) ** 2 * inv2rs) * ok
            num[yd, xd] += w * nb
            den[yd, xd] += w
    out = depth.copy()
    patch = np.where(m & (den > 0), num / np.where(den > 0, den, 1.0), 0.0)
    out[v0:v1, u0:u1] = patch
    out[~valid] = 0.0
    return out


def backproject_cloud(depth: np.ndarray, mask: np.ndarray,
                      camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """3D points for valid masked pixels; returns (cloud (P,3), pixels (P,2) as (u,v))."""
    vs, us = np.nonzero(mask & (depth > 0))
    z = depth[vs, us]
    cloud = backproject(camera, us.astype(float), vs.astype(float), z)
    return cloud.reshape(-1, 3), np.stack([us, vs], axis=1)


def estimate_cloud_normals(points_grid: np.ndarray, valid: np.ndarray,
                           window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Plane-fit normals over a k x k window of an organized cloud.

    Returns per-pixel unit normals oriented toward the camera at the origin
    (n . p < 0) and a validity mask; pixels with fewer than 3 valid window
    neighbors are invalid.
    """
    H, W = valid.shape
    pts = np.where(valid[..., None], points_grid, 0.0)
    # center coordinates to keep the windowed second moments well conditioned
    count_total = valid.sum()
    center = pts.reshape(-1, 3).sum(axis=0) / max(count_total, 1)
    pts = np.where(valid[..., None], points_grid - center, 0.0)

    area = float(window * window)

    def wsum(channel):
        return ndimage.uniform_filter(channel, size=window, mode="constant") * area

    cnt = wsum(valid.astype(float))
    s = np.stack([wsum(pts[..., i]) for i in range(3)], axis=-1)
    prods = {}
    for i in range(3):
        for j in range(i, 3):
            prods[(i, j)] = wsum(pts[..., i] * pts[..., j])

    ok = valid & (np.rint(cnt) >= 3)
    n_ok = int(ok.sum())
    normals = np.zeros((H, W, 3))
    if n_ok:
        c = cnt[ok]
        mean = s[ok] / c[:, None]
        cov = np.empty((n_ok, 3, 3))
        for i in range(3):
            for j in range(i, 3):
                cij = prods[(i, j)][ok] / c - mean[:, i] * mean[:, j]
                cov[:, i, j] = cij
                cov[:, j, i] = cij
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, :, 0]  # smallest-eigenvalue direction
        p = points_grid[ok]
        flip = np.einsum("ij,ij->i", n, p) > 0
        n[flip] = -n[flip]
        normals[ok] = n
    return normals, ok


def depth_edges(depth: np.ndarray, grad_threshold_mm: float = 25.0
                ) -> tuple[np.ndarray, np.ndarray]:
    """Near-side depth-discontinuity pixels with 3x3-averaged depth.

    A valid pixel is an edge candidate when its largest positive depth jump
    to a 4-neighbor (invalid neighbors count as infinitely far) exceeds the
    threshold; chains are thinned by suppressing candidates whose jump
    points at a stronger candidate. Returns ((E, 2) (u, v) pixels, (E,) mm).
    """
    valid = depth > 0
    H, W = depth.shape
    jump = np.full((H, W), -np.inf)
    direction = np.zeros((H, W, 2), dtype=np.int64)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        # in-image invalid neighbors count as far background; neighbors
        # beyond the image border are unknown, not background
        nb_depth = np.full((H, W), -np.inf)
        ys = slice(max(dy, 0), H + min(dy, 0))
        yd = slice(max(-dy, 0), H + min(-dy, 0))
        xs = slice(max(dx, 0), W + min(dx, 0))
        xd = slice(max(-dx, 0), W + min(-dx, 0))
        nb_depth[yd, xd] = np.where(valid[ys, xs], depth[ys, xs], np.inf)
        j = nb_depth - depth
        better = valid & (j > jump)
        jump[better] = j[better]
        direction[better] = (dy, dx)

    cand = valid & (jump > grad_threshold_mm)
    # non-maximum thinning along the jump direction
    keep = cand.copy()
    cvs, cus = np.nonzero(cand)
    for v, u in zip(cvs, cus):
        dy, dx = direction[v, u]
        nv, nu = v + dy, u + dx
        if 0 <= nv < H and 0 <= nu < W and cand[nv, nu] and jump[nv, nu] >= jump[v, u]:
            keep[v, u] = False

    evs, eus = np.nonzero(keep)
    avg = np.zeros(len(evs))
    for i, (v, u) in enumerate(zip(evs, eus)):
        win = depth[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2]
        wok = win > 0
        avg[i] = win[wok].mean()
    return np.stack([eus, evs], axis=1), avg


def edge_distance_transform(edge_pixels: np.ndarray, height: int, width: int
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Exact Euclidean distance and nearest-edge index for every pixel."""
    nearest = np.full((height, width), -1, dtype=np.int64)
    if len(edge_pixels) == 0:
        return np.full((height, width), np.inf), nearest
    grid = np.ones((height, width), dtype=bool)
    index_img = np.full((height, width), -1, dtype=np.int64)
    for i, (u, v) in enumerate(edge_pixels):
        grid[v, u] = False
        index_img[v, u] = i
    dist, (iv, iu) = ndimage.distance_transform_edt(grid, return_indices=True)
    nearest = index_img[iv, iu]
    return dist, nearest


def preprocess(raw: RawFrame, camera: Camera,
               cfg: PreprocessConfig | None = None) -> ObservedFrame:
    """Full frame pipeline: threshold, smooth, cloud, normals, edges, EDT."""
    cfg = cfg or PreprocessConfig()
    frame = threshold_mask(raw, cfg.near_mm, cfg.far_mm)
    smoothed = bilateral_smooth(frame.depth, cfg.bilateral_spatial_sigma_px,
                                cfg.bilateral_range_sigma_mm)
    cloud, pixels = backproject_cloud(smoothed, frame.mask, camera)
    H, W = smoothed.shape
    grid = backproject(camera,
                       np.arange(W)[None, :].repeat(H, axis=0).astype(float),
                       np.arange(H)[:, None].repeat(W, axis=1).astype(float),
                       smoothed)
    normals_grid, ok_grid = estimate_cloud_normals(grid, smoothed > 0,
                                                   cfg.normal_window_px)
    normals = normals_grid[pixels[:, 1], pixels[:, 0]]
    normals_valid = ok_grid[pixels[:, 1], pixels[:, 0]]
    edges, edge_depth = depth_edges(smoothed, cfg.edge_threshold_mm)
    dist, nearest = edge_distance_transform(edges, H, W)
    return ObservedFrame(
        camera=camera,
        frame_index=raw.frame_index,
        depth=smoothed,
        cloud=cloud,
        cloud_pixels=pixels,
        normals=normals,
        normals_valid=normals_valid,
        edge_pixels=edges,
        edge_depth=edge_depth,
        edge_distance=dist,
        edge_nearest=nearest,
    )
