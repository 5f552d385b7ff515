import numpy as np
import pytest

from handtrack.frontend import RawFrame, preprocess
from handtrack.kinematics import chain_transforms
from handtrack.skinning import Camera, deform, render_depth
from handtrack.synth import HandGeometry, build_hand


@pytest.fixture(scope="session")
def hand():
    return build_hand()


@pytest.fixture(scope="session")
def coarse_hand():
    return build_hand(HandGeometry(n_theta=8))


@pytest.fixture(scope="session")
def test_camera():
    return Camera(fx=262.5, fy=262.5, cx=160.0, cy=120.0, width=320, height=240)


def render_raw_frame(model, mesh, theta, camera, noise_sigma=0.0, seed=0,
                     frame_index=0, quantize=0.0):
    """Depth frame + exact mask rendered from a pose; optional noise."""
    dm = deform(mesh, chain_transforms(model, theta))
    depth, _ = render_depth(dm.vertices, mesh.triangles, camera)
    mask = depth > 0
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        depth = depth + mask * rng.normal(0.0, noise_sigma, depth.shape)
    if quantize > 0:
        depth = np.round(depth / quantize) * quantize
    depth = np.where(mask, np.maximum(depth, 0.0), 0.0)
    return RawFrame(depth, mask, frame_index)


def observed_from_pose(model, mesh, theta, camera, noise_sigma=0.0, seed=0):
    raw = render_raw_frame(model, mesh, theta, camera, noise_sigma, seed)
    return preprocess(raw, camera)
