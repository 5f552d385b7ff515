import numpy as np
import pytest

from handtrack.kinematics import chain_transforms, rotation_about_axis
from handtrack.skinning import (
    Camera,
    SkinnedMesh,
    backproject,
    compute_vertex_normals,
    deform,
    lbs_deform,
    lbs_per_bone,
    load_mesh,
    project,
    project_points,
    render_depth,
    save_mesh,
    visible_vertices,
)
from handtrack.synth import HandGeometry, build_hand, default_camera, icosphere, plane_grid


def tiny_mesh(num_bones=2):
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    tris = np.array([[0, 1, 2]])
    W = np.zeros((3, num_bones))
    W[:, 0] = 1.0
    return SkinnedMesh(verts, tris, W, list(range(num_bones)))


def translation(t):
    T = np.eye(4)
    T[:3, 3] = t
    return T


class TestLBS:
    def test_rigging_pose_identity(self):
        model, mesh = build_hand(HandGeometry(num_fingers=2))
        T = chain_transforms(model, np.zeros(model.num_dof))
        out = lbs_deform(mesh, T, T)
        assert np.allclose(out, mesh.vertices_rest, atol=1e-9)

    def test_single_bone_translation(self):
        mesh = tiny_mesh(1)
        out = lbs_deform(mesh, translation([3.0, -2.0, 5.0])[None])
        assert np.allclose(out, mesh.vertices_rest + [3.0, -2.0, 5.0])

    def test_convex_blend(self):
        mesh = tiny_mesh(2)
        mesh.weights[:] = 0.5
        T = np.stack([np.eye(4), translation([10.0, 0.0, 0.0])])
        out = lbs_deform(mesh, T)
        assert np.allclose(out, mesh.vertices_rest + [5.0, 0.0, 0.0])

    def test_blend_linearity(self):
        # blending per-bone deformed positions reproduces the deformation
        model, mesh = build_hand()
        rng = np.random.default_rng(2)
        theta = np.zeros(model.num_dof)
        theta[6:] = rng.uniform(-0.3, 0.3, model.num_dof - 6)
        T = chain_transforms(model, theta)
        per_bone = lbs_per_bone(mesh, T)
        manual = np.zeros_like(mesh.vertices_rest)
        for c in range(len(mesh.bone_ids)):
            manual += mesh.weights[:, c:c + 1] * per_bone[c]
        assert np.allclose(lbs_deform(mesh, T), manual, atol=1e-12)

    def test_rigid_equivariance(self):
        model, mesh = build_hand()
        rng = np.random.default_rng(5)
        theta = np.zeros(model.num_dof)
        theta[6:] = rng.uniform(-0.4, 0.4, model.num_dof - 6)
        T = chain_transforms(model, theta)
        G = np.eye(4)
        G[:3, :3] = rotation_about_axis(np.array([0.0, 1.0, 0.0]), 0.7)
        G[:3, 3] = [40.0, -25.0, 60.0]
        a = lbs_deform(mesh, np.einsum("ij,bjk->bik", G, T))
        b = (G[:3, :3] @ lbs_deform(mesh, T).T).T + G[:3, 3]
        assert np.abs(a - b).max() < 1e-9

    def test_dimension_mismatch_rejected(self):
        mesh = tiny_mesh(2)
        with pytest.raises(ValueError):
            lbs_deform(mesh, np.eye(4)[None])

    def test_weight_validation(self):
        verts = np.zeros((1, 3))
        tris = np.empty((0, 3), dtype=np.int64)
        with pytest.raises(ValueError):
            SkinnedMesh(verts, tris, np.array([[0.5]]), [0])  # does not sum to 1
        with pytest.raises(ValueError):
            SkinnedMesh(verts, tris, np.array([[-0.5, 1.5]]), [0, 1])

    def test_non_manifold_warns(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1.0]])
        tris = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])  # edge 0-1 used 3x
        W = np.ones((5, 1))
        with pytest.warns(UserWarning):
            SkinnedMesh(verts, tris, W, [0])


class TestNormals:
    def test_flat_grid(self):
        verts, tris = plane_grid(8, 8, 10.0, z=500.0)
        normals, valid = compute_vertex_normals(verts, tris)
        assert valid.all()
        assert np.allclose(np.abs(normals[:, 2]), 1.0, atol=1e-12)
        assert np.allclose(normals[:, :2], 0.0, atol=1e-12)

    def test_icosphere_radial(self):
        center = np.array([0.0, 0.0, 500.0])
        verts, tris = icosphere(30.0, center, subdivisions=2)
        normals, valid = compute_vertex_normals(verts, tris)
        assert valid.all()
        radial = verts - center
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", normals, radial)
        assert np.all(np.abs(cos) >= np.cos(np.deg2rad(2.0)))

    def test_winding_flip(self):
        verts, tris = plane_grid(4, 4, 10.0, z=500.0)
        n1, _ = compute_vertex_normals(verts, tris)
        n2, _ = compute_vertex_normals(verts, tris[:, ::-1])
        assert np.allclose(n1, -n2)

    def test_degenerate_flagged(self):
        verts = np.zeros((3, 3))  # all coincident: zero-area triangle
        tris = np.array([[0, 1, 2]])
        normals, valid = compute_vertex_normals(verts, tris)
        assert not valid.any()
        assert np.allclose(normals, 0.0)


class TestProjection:
    def setup_method(self):
        self.cam = default_camera()

    def test_optical_axis(self):
        u, v, z = project(self.cam, np.array([0.0, 0.0, 500.0]))
        assert (u, v, z) == (320.0, 240.0, 500.0)

    def test_inverse_pair(self):
        rng = np.random.default_rng(0)
        p = rng.uniform([-100, -100, 300], [100, 100, 800], (50, 3))
        uv, z = project_points(self.cam, p)
        back = backproject(self.cam, uv[:, 0], uv[:, 1], z)
        assert np.abs(back - p).max() < 1e-6

    def test_fx_scaling(self):
        p = np.array([37.0, -12.0, 450.0])
        u1, _, _ = project(self.cam, p)
        cam2 = Camera(self.cam.fx * 2, self.cam.fy, self.cam.cx, self.cam.cy,
                      self.cam.width, self.cam.height)
        u2, _, _ = project(cam2, p)
        assert np.isclose(u2 - self.cam.cx, 2 * (u1 - self.cam.cx))

    def test_behind_camera_rejected(self):
        with pytest.raises(ValueError):
            project(self.cam, np.array([0.0, 0.0, -5.0]))


class TestRenderDepth:
    def setup_method(self):
        self.cam = default_camera(160, 120)
        self.cam = Camera(150.0, 150.0, 80.0, 60.0, 160, 120)

    def test_empty_mesh(self):
        depth, tid = render_depth(np.zeros((0, 3)), np.empty((0, 3), dtype=int), self.cam)
        assert np.all(depth == 0.0) and np.all(tid == -1)

    def test_front_parallel_triangle(self):
        verts = np.array([[-50.0, -50.0, 500.0], [50.0, -50.0, 500.0], [0.0, 60.0, 500.0]])
        depth, tid = render_depth(verts, np.array([[0, 1, 2]]), self.cam)
        covered = tid == 0
        assert covered.sum() > 50
        assert np.allclose(depth[covered], 500.0)
        assert np.all(depth[~covered] == 0.0)

    def test_nearer_triangle_wins(self):
        verts = np.array([
            [-50.0, -50.0, 500.0], [50.0, -50.0, 500.0], [0.0, 60.0, 500.0],
            [-50.0, -50.0, 400.0], [50.0, -50.0, 400.0], [0.0, 60.0, 400.0],
        ])
        tris = np.array([[0, 1, 2], [3, 4, 5]])
        depth, tid = render_depth(verts, tris, self.cam)
        both = tid >= 0
        # wherever either triangle covers, the nearer one's depth must win
        d_only_back, _ = render_depth(verts[:3], tris[:1], self.cam)
        overlap = both & (d_only_back > 0)
        assert overlap.any()
        assert np.allclose(depth[overlap], 400.0)
        assert np.all(tid[overlap] == 1)

    def test_perspective_correct_slanted(self):
        # slanted triangle: depth at a pixel matches the analytic plane depth
        verts = np.array([[-80.0, 0.0, 400.0], [80.0, 0.0, 600.0], [0.0, 80.0, 500.0]])
        depth, tid = render_depth(verts, np.array([[0, 1, 2]]), self.cam)
        vs, us = np.nonzero(tid == 0)
        rays = backproject(self.cam, us.astype(float), vs.astype(float), np.ones(len(us)))
        # plane through the three vertices: n . p = c
        n = np.cross(verts[1] - verts[0], verts[2] - verts[0])
        c = n @ verts[0]
        t = c / (rays @ n)
        assert np.abs(t - depth[vs, us]).max() < 1e-6


def ray_triangle_hit(origin, direction, tri):
    # Moller-Trumbore; returns t or None
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    p = np.cross(direction, e2)
    det = e1 @ p
    if abs(det) < 1e-12:
        return None
    inv = 1.0 / det
    tv = origin - tri[0]
    u = (tv @ p) * inv
    if u < 0.0 or u > 1.0:
        return None
    q = np.cross(tv, e1)
    v = (direction @ q) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    return (e2 @ q) * inv


class TestVisibility:
    def setup_method(self):
        self.cam = Camera(200.0, 200.0, 80.0, 60.0, 160, 120)

    def two_plane_scene(self):
        # 200 vertices total: front 28 mm half-size patch at z=400 occludes
        # the center of a back grid at z=500; margins keep rounding safe
        fv, ft = plane_grid(10, 10, 56.0 / 9, z=400.0)
        bv, bt = plane_grid(10, 10, 11.0, z=500.0)
        verts = np.concatenate([bv, fv])
        tris = np.concatenate([bt, ft + len(bv)])
        return verts, tris

    def test_unoccluded_patch_fully_visible(self):
        verts, tris = plane_grid(10, 10, 11.0, z=500.0)
        from handtrack.skinning import DeformedMesh
        normals, valid = compute_vertex_normals(verts, tris)
        dm = DeformedMesh(verts, normals, valid, tris)
        depth, _ = render_depth(verts, tris, self.cam)
        vis = visible_vertices(dm, self.cam, depth, eps_mm=5.0)
        assert vis.all()

    def test_occluded_vertex_invisible(self):
        verts, tris = self.two_plane_scene()
        from handtrack.skinning import DeformedMesh
        normals, valid = compute_vertex_normals(verts, tris)
        dm = DeformedMesh(verts, normals, valid, tris)
        depth, _ = render_depth(verts, tris, self.cam)
        vis = visible_vertices(dm, self.cam, depth, eps_mm=5.0)
        # the back-grid vertex nearest the optical axis is behind the patch
        center = np.argmin(np.linalg.norm(verts[:100, :2] - [5.5, 5.5], axis=1))
        assert not vis[center]

    def test_matches_ray_cast_oracle(self):
        verts, tris = self.two_plane_scene()
        from handtrack.skinning import DeformedMesh
        normals, valid = compute_vertex_normals(verts, tris)
        dm = DeformedMesh(verts, normals, valid, tris)
        depth, _ = render_depth(verts, tris, self.cam)
        eps = 5.0
        vis = visible_vertices(dm, self.cam, depth, eps_mm=eps)

        uv, z = project_points(self.cam, verts)
        for i, p in enumerate(verts):
            in_img = (0 <= round(uv[i, 0]) < self.cam.width
                      and 0 <= round(uv[i, 1]) < self.cam.height)
            blocked = False
            if in_img:
                for tri in tris:
                    if i in tri:
                        continue
                    t = ray_triangle_hit(np.zeros(3), p, verts[tri])
                    if t is not None and 0.0 < t < 1.0 - eps / p[2]:
                        blocked = True
                        break
            assert vis[i] == (in_img and not blocked), f"vertex {i}"

    def test_visible_depth_consistency(self):
        # for visible vertices the z-buffer agrees with the vertex depth
        model, mesh = build_hand()
        cam = default_camera()
        T = chain_transforms(model, np.zeros(model.num_dof))
        dm = deform(mesh, T)
        depth, _ = render_depth(dm.vertices, mesh.triangles, cam)
        vis = visible_vertices(dm, cam, depth, eps_mm=5.0)
        assert vis.sum() > 100
        uv, z = project_points(cam, dm.vertices)
        px = np.rint(uv[vis]).astype(int)
        d = depth[px[:, 1], px[:, 0]]
        covered = d > 0  # silhouette vertices may round onto background
        assert covered.mean() > 0.7
        # within the eps band above the z-buffer, minus grazing-angle slack
        diff = z[vis][covered] - d[covered]
        assert diff.max() <= 5.0 + 1e-9
        assert diff.min() > -3.0


class TestMeshIO:
    def test_roundtrip(self, tmp_path):
        model, mesh = build_hand()
        path = tmp_path / "mesh.txt"
        save_mesh(path, mesh)
        loaded = load_mesh(path)
        assert np.allclose(loaded.vertices_rest, mesh.vertices_rest)
        assert np.array_equal(loaded.triangles, mesh.triangles)
        assert np.allclose(loaded.weights, mesh.weights)
        assert loaded.bone_ids == mesh.bone_ids
        assert np.array_equal(loaded.finger_labels, mesh.finger_labels)

    def test_unknown_bone_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("bones 0\nv 0 0 0\nw 0 7:1.0\n")
        with pytest.raises(ValueError):
            load_mesh(path)
