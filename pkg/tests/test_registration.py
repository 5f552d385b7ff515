import numpy as np
import pytest

from conftest import observed_from_pose, render_raw_frame
from handtrack.config import SolverConfig
from handtrack.frontend import preprocess, RawFrame
from handtrack.kinematics import chain_transforms, clamp_to_limits
from handtrack.registration import (
    CorrespondenceSet,
    DetectionRecord,
    FrozenObjective,
    IterationDiag,
    VertexJacobians,
    attach_detection_points,
    build_iteration,
    gauss_newton_step,
    match_data_to_model,
    match_model_to_data,
    optimize_frame,
    point_residuals,
    ray_residuals,
    residual_d2m,
    residual_m2d,
)
from handtrack.residuals import ResidualBlock
from handtrack.skinning import deform, lbs_per_bone, project_points, render_depth, visible_vertices
from handtrack.collision import collision_field_with_gradients, collision_row_layout


def deformed_with_visibility(model, mesh, theta, camera, eps=5.0):
    dm = deform(mesh, chain_transforms(model, theta))
    depth, _ = render_depth(dm.vertices, mesh.triangles, camera)
    dm.visibility = visible_vertices(dm, camera, depth, eps)
    return dm


class TestMatchModelToData:
    def test_self_match(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        theta = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, theta, test_camera)
        dm = deformed_with_visibility(model, mesh, theta, test_camera)
        corrs = match_model_to_data(dm, obs, SolverConfig())
        assert len(corrs) > 100
        # strictly front-facing vertices (on the sampled surface) match submm
        uv, z = project_points(test_camera, dm.vertices[corrs.vertex_ids])
        px = np.rint(uv).astype(int)
        d = obs.depth[px[:, 1], px[:, 0]]
        strict = (d > 0) & (np.abs(d - z) < 1.0)
        assert strict.sum() > 50
        assert np.sqrt(corrs.sq_dist[strict].max()) < 1.0

    def test_gates_respected(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        theta = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, theta, test_camera, noise_sigma=1.0)
        dm = deformed_with_visibility(model, mesh, theta, test_camera)
        cfg = SolverConfig()
        corrs = match_model_to_data(dm, obs, cfg)
        assert np.all(corrs.sq_dist <= cfg.m2d_gate_mm ** 2 + 1e-9)
        cos_gate = np.cos(np.deg2rad(cfg.max_normal_angle_deg))
        # recheck the angle gate post-hoc from the stored snapshot
        tree, cloud_ids = obs.cloud_tree()
        d, idx = tree.query(dm.vertices[corrs.vertex_ids])
        dots = np.einsum("ij,ij->i", corrs.normals, obs.normals[cloud_ids[idx]])
        assert np.all(dots >= cos_gate - 1e-9)

    def test_far_vertex_has_no_correspondence(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        obs = observed_from_pose(model, mesh, np.zeros(model.num_dof), test_camera)
        far = np.zeros(model.num_dof)
        far[2] = 60.0  # push the whole model 60 mm deeper than the data
        dm = deformed_with_visibility(model, mesh, far, test_camera)
        corrs = match_model_to_data(dm, obs, SolverConfig())
        assert len(corrs) == 0

    def test_empty_cloud(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        raw = RawFrame(np.zeros((240, 320)), np.zeros((240, 320), dtype=bool))
        obs = preprocess(raw, test_camera)
        dm = deformed_with_visibility(model, mesh, np.zeros(model.num_dof), test_camera)
        assert len(match_model_to_data(dm, obs, SolverConfig())) == 0


class TestPointResiduals:
    def corrs(self, target, normal):
        return CorrespondenceSet(
            "m2d", "point", np.array([0]), targets=np.array([target]),
            normals=np.array([normal]), sq_dist=np.zeros(1))

    def test_zero_residual(self):
        v = np.array([[1.0, 2.0, 3.0]])
        c = self.corrs([1.0, 2.0, 3.0], [0.0, 0.0, 1.0])
        assert point_residuals(c, v, "p2p", num_dof=4).energy == 0.0
        assert point_residuals(c, v, "p2plane", num_dof=4).energy == 0.0

    def test_normal_offset(self):
        v = np.array([[0.0, 0.0, 2.0]])
        c = self.corrs([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        assert point_residuals(c, v, "p2plane", num_dof=4).r[0] == pytest.approx(2.0)
        assert np.linalg.norm(point_residuals(c, v, "p2p", num_dof=4).r) == pytest.approx(2.0)

    def test_tangential_slide(self):
        v = np.array([[3.0, 0.0, 0.0]])
        c = self.corrs([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        assert point_residuals(c, v, "p2plane", num_dof=4).r[0] == pytest.approx(0.0)
        assert np.linalg.norm(point_residuals(c, v, "p2p", num_dof=4).r) == pytest.approx(3.0)


class TestMatchDataToModel:
    def test_self_match_rays(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        theta = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, theta, test_camera)
        dm = deformed_with_visibility(model, mesh, theta, test_camera)
        corrs = match_data_to_model(dm, obs, test_camera, SolverConfig())
        assert len(corrs) > 30
        assert not corrs.flagged
        # residual magnitude is the point-ray distance; on a self-match it is
        # bounded by the local vertex spacing and mostly sub-mm
        dist = np.linalg.norm(
            np.cross(dm.vertices[corrs.vertex_ids], corrs.ray_d) - corrs.ray_m,
            axis=1)
        assert np.median(dist) < 1.2
        assert np.percentile(dist, 90) < 3.0

    def test_moment_is_x_cross_d(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        theta = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, theta, test_camera)
        dm = deformed_with_visibility(model, mesh, theta, test_camera)
        corrs = match_data_to_model(dm, obs, test_camera, SolverConfig())
        # rays pass through the camera center: moments vanish and a point on
        # the ray gives v x d - m = 0
        assert np.abs(corrs.ray_m).max() < 1e-9
        X = corrs.ray_d * 321.7  # arbitrary point along each ray
        assert np.abs(np.cross(X, corrs.ray_d) - corrs.ray_m).max() < 1e-9

    def test_gate_discards_far_edges(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        theta = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, theta, test_camera)
        far = np.zeros(model.num_dof)
        far[2] = 40.0  # model 40 mm behind the observed surface
        dm = deformed_with_visibility(model, mesh, far, test_camera)
        cfg = SolverConfig()
        corrs = match_data_to_model(dm, obs, test_camera, cfg)
        assert np.all(corrs.sq_dist <= cfg.d2m_gate_mm ** 2 + 1e-9)

    def test_model_out_of_frame_flagged(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        theta = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, theta, test_camera)
        gone = np.zeros(model.num_dof)
        gone[0] = 5000.0
        dm = deformed_with_visibility(model, mesh, gone, test_camera)
        corrs = match_data_to_model(dm, obs, test_camera, SolverConfig())
        assert len(corrs) == 0
        assert corrs.flagged


class TestRayResiduals:
    def test_point_on_line_zero(self):
        c = CorrespondenceSet("d2m", "ray", np.array([0]),
                              ray_d=np.array([[0.0, 0.0, 1.0]]),
                              ray_m=np.zeros((1, 3)), sq_dist=np.zeros(1))
        v = np.array([[0.0, 0.0, 7.5]])
        assert ray_residuals(c, v, num_dof=3).energy == 0.0

    def test_unit_offset(self):
        c = CorrespondenceSet("d2m", "ray", np.array([0]),
                              ray_d=np.array([[0.0, 0.0, 1.0]]),
                              ray_m=np.zeros((1, 3)), sq_dist=np.zeros(1))
        v = np.array([[1.0, 0.0, 0.0]])
        block = ray_residuals(c, v, num_dof=3)
        assert np.allclose(block.r, [0.0, -1.0, 0.0])
        assert np.linalg.norm(block.r) == pytest.approx(1.0)

    def test_norm_is_point_line_distance(self):
        # oracle: geometric distance from point to the line through p0 with
        # direction d equals ||v x d - m|| for unit d, m = p0 x d
        rng = np.random.default_rng(9)
        for _ in range(50):
            p0 = rng.uniform(-50, 50, 3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            m = np.cross(p0, d)
            v = rng.uniform(-50, 50, 3)
            want = np.linalg.norm(np.cross(v - p0, d))
            c = CorrespondenceSet("d2m", "ray", np.array([0]),
                                  ray_d=d[None], ray_m=m[None],
                                  sq_dist=np.zeros(1))
            got = np.linalg.norm(ray_residuals(c, v[None], num_dof=3).r)
            assert got == pytest.approx(want, rel=1e-9)


def fake_detection(center_3d, camera, radius_px=4, confidence=4.5):
    uv, _ = project_points(camera, np.asarray(center_3d))
    u0, v0 = int(round(uv[0, 0])), int(round(uv[0, 1]))
    us, vs = np.meshgrid(np.arange(u0 - radius_px, u0 + radius_px + 1),
                         np.arange(v0 - radius_px, v0 + radius_px + 1))
    keep = (us - u0) ** 2 + (vs - v0) ** 2 <= radius_px ** 2
    return DetectionRecord(0, np.stack([us[keep], vs[keep]], axis=1),
                           np.asarray(center_3d, dtype=float), confidence)


class TestJacobiansMatchFiniteDifferences:
    def test_all_terms(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        rng = np.random.default_rng(4)
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera)
        theta = truth.copy()
        theta[0:3] = [2.0, -1.5, 3.0]
        theta[3:6] = [0.02, -0.03, 0.01]
        theta[6:] = rng.uniform(-0.08, 0.12, model.num_dof - 6)
        # force a collision for nonempty collision rows
        theta[6] = 0.3
        theta[10] = -0.3
        cfg = SolverConfig()
        tip = mesh.vertices_rest[mesh.finger_vertex_ids(0)].mean(axis=0)
        det = fake_detection(tip + [4.0, -30.0, 6.0], test_camera)
        attach_detection_points(det, obs)
        blocks, frozen, counts, _, _, _ = build_iteration(
            theta, obs, model, mesh, [det], cfg)
        assert counts["m2d"] > 0 and counts["d2m"] > 0
        assert counts["salient"] > 0 and counts["collision_pairs"] > 0

        h = 1e-6
        by_term = {b.term: b for b in blocks}

        def assert_fd(term, residual_fn):
            block = by_term[term]
            J_fd = np.zeros_like(block.J)
            for k in range(model.num_dof):
                tp, tm = theta.copy(), theta.copy()
                tp[k] += h
                tm[k] -= h
                J_fd[:, k] = (residual_fn(tp) - residual_fn(tm)) / (2 * h)
            scale = max(np.abs(J_fd).max(), 1.0)
            err = np.abs(block.J - J_fd).max() / scale
            assert err < 1e-4, f"{term}: rel err {err}"

        assert_fd("m2d", lambda t: point_residuals(
            frozen.m2d, frozen.vertices_at(t), cfg.metric).r)
        assert_fd("d2m", lambda t: ray_residuals(frozen.d2m, frozen.vertices_at(t)).r)
        assert_fd("salient", lambda t: point_residuals(
            frozen.salient, frozen.vertices_at(t), cfg.metric).r)

        # collision rows: compare on the full layout (block keeps only
        # active rows, whose values are the positive ones)
        layout = frozen.collision_layout
        vals0, _ = collision_field_with_gradients(
            layout, frozen.vertices_at(theta), cfg.cone_sigma)
        keep = vals0 > 0
        block = by_term["collision"]
        assert keep.sum() == len(block)
        J_fd = np.zeros((int(keep.sum()), model.num_dof))
        for k in range(model.num_dof):
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            vp, _ = collision_field_with_gradients(layout, frozen.vertices_at(tp),
                                                   cfg.cone_sigma)
            vm, _ = collision_field_with_gradients(layout, frozen.vertices_at(tm),
                                                   cfg.cone_sigma)
            J_fd[:, k] = -(vp[keep] - vm[keep]) / (2 * h)
        scale = max(np.abs(J_fd).max(), 1.0)
        assert np.abs(block.J - J_fd).max() / scale < 1e-4


class TestGaussNewtonStep:
    def test_zero_residual_zero_step(self):
        block = ResidualBlock("m2d", np.zeros(5), np.ones((5, 3)))
        delta, _, ok = gauss_newton_step([block], 10.0, 1e-3)
        assert ok and np.allclose(delta, 0.0)

    def test_linear_1dof_lands_at_target(self):
        theta0, a = 2.0, 0.5
        block = ResidualBlock("m2d", np.array([theta0 - a]), np.array([[1.0]]))
        delta, _, ok = gauss_newton_step([block], 10.0, 1e-12)
        assert ok
        assert theta0 + delta[0] == pytest.approx(a, abs=1e-9)

    def test_collision_rows_weighted(self):
        # with gamma_c = 4 a collision row counts four times a data row
        data = ResidualBlock("m2d", np.array([1.0]), np.array([[1.0]]))
        coll = ResidualBlock("collision", np.array([-1.0]), np.array([[1.0]]))
        delta, _, _ = gauss_newton_step([data, coll], 4.0, 1e-12)
        # normal equations: (1 + 4) d = -(1*1 + 4*(-1)) = 3 -> d = 0.6
        assert delta[0] == pytest.approx(0.6, abs=1e-9)

    def test_monte_carlo_descent(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera, noise_sigma=0.5)
        cfg = SolverConfig(use_salient=False)
        rng = np.random.default_rng(77)
        wins = trials = 0
        for _ in range(100):
            theta = truth.copy()
            theta[6:] = rng.uniform(-np.deg2rad(5), np.deg2rad(5), model.num_dof - 6)
            theta = clamp_to_limits(theta, model)
            blocks, frozen, counts, _, _, _ = build_iteration(
                theta, obs, model, mesh, None, cfg)
            if sum(len(b) for b in blocks) == 0:
                continue
            trials += 1
            e0 = frozen.total(theta)
            delta, _, ok = gauss_newton_step(blocks, cfg.gamma_c, 1e-3)
            if ok and frozen.total(clamp_to_limits(theta + delta, model)) <= e0:
                wins += 1
        assert trials >= 95
        assert wins / trials >= 0.95


class TestOptimizeFrame:
    def test_fixed_point_at_truth(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera)
        cfg = SolverConfig(iterations=5, use_salient=False)
        res = optimize_frame(truth, obs, model, mesh, None, cfg)
        assert not res.tracking_lost
        assert np.abs(res.theta[6:] - truth[6:]).max() < np.deg2rad(0.5)

    def test_single_joint_recovery(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera)
        start = truth.copy()
        start[7] = np.deg2rad(10.0)  # finger 0 knuckle flexion off by 10 deg
        cfg = SolverConfig(iterations=10, use_salient=False)
        res = optimize_frame(start, obs, model, mesh, None, cfg)
        assert abs(res.theta[7] - truth[7]) < np.deg2rad(1.0)

    def test_tracking_lost_on_empty_frame(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        raw = RawFrame(np.zeros((240, 320)), np.zeros((240, 320), dtype=bool))
        obs = preprocess(raw, test_camera)
        start = np.zeros(model.num_dof)
        start[0] = 4000.0  # model far outside the frustum
        cfg = SolverConfig(iterations=3, use_collision=False)
        res = optimize_frame(start, obs, model, mesh, None, cfg)
        assert res.tracking_lost
        assert np.array_equal(res.theta, start)

    def test_pose_legality(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera, noise_sigma=2.0)
        start = truth.copy()
        start[6:] = 0.2
        res = optimize_frame(start, obs, model, mesh, None,
                             SolverConfig(iterations=4))
        for j in model.joints:
            assert j.limits[0] - 1e-12 <= res.theta[j.dof_index] <= j.limits[1] + 1e-12

    def test_gate_soundness_checked_every_iteration(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera, noise_sigma=1.0)
        start = truth.copy()
        start[7] = 0.1
        optimize_frame(start, obs, model, mesh, None,
                       SolverConfig(iterations=3), check_gates=True)

    def test_deterministic(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera, noise_sigma=1.0)
        start = truth.copy()
        start[6:] = 0.05
        cfg = SolverConfig(iterations=4)
        a = optimize_frame(start, obs, model, mesh, None, cfg)
        b = optimize_frame(start, obs, model, mesh, None, cfg)
        assert np.array_equal(a.theta, b.theta)

    def test_energy_bookkeeping(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera, noise_sigma=1.0)
        start = truth.copy()
        start[6:] = 0.08
        cfg = SolverConfig(iterations=3)
        res = optimize_frame(start, obs, model, mesh, None, cfg)
        blocks, _, _, _, _, _ = build_iteration(res.theta, obs, model, mesh, None, cfg)
        independent = {b.term: b.energy for b in blocks}
        for term in ("m2d", "d2m", "salient", "collision"):
            got = res.final_energies[term]
            want = independent.get(term, 0.0)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)

    def test_energy_decreases_with_iterations(self, coarse_hand, test_camera):
        model, mesh = coarse_hand
        truth = np.zeros(model.num_dof)
        obs = observed_from_pose(model, mesh, truth, test_camera)
        start = truth.copy()
        start[7] = np.deg2rad(8.0)
        cfg = SolverConfig(iterations=6, use_salient=False)
        res = optimize_frame(start, obs, model, mesh, None, cfg)
        totals = [d.total for d in res.iterations]
        assert totals[-1] <= totals[0]
