"""Dataclass configs for preprocessing and the per-frame solver."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


@dataclass
class PreprocessConfig:
    near_mm: float = 300.0
    far_mm: float = 900.0
    bilateral_spatial_sigma_px: float = 3.0
    bilateral_range_sigma_mm: float = 20.0
    edge_threshold_mm: float = 25.0
    normal_window_px: int = 5

    def __post_init__(self):
        if self.near_mm >= self.far_mm:
            raise ValueError("near threshold must be below far threshold")


@dataclass
class SolverConfig:
    """Weights, gates, and loop controls of the registration objective."""

    gamma_c: float = 10.0                  # collision term weight
    lambda_assign: float = 1.2            # assignment outlier penalty
    ws_mode: str = "confidence"           # "constant" or "confidence"
    iterations: int = 10
    first_frame_iterations: int = 50
    metric: str = "p2plane"               # "p2p" or "p2plane"
    damping_init: float = 1e-3
    max_step_retries: int = 5

    max_normal_angle_deg: float = 45.0    # model-to-data normal gate
    m2d_gate_mm: float = 10.0             # model-to-data distance gate
    d2m_gate_mm: float = 30.0             # data-to-model distance gate
    salient_skip_mm: float = 10.0         # skip residuals when already close
    overlap_threshold: float = 0.5        # below: pull to detection centroid

    confidence_threshold: float = 3.0     # discard weaker detections
    assignment_scale_mm: float = 100.0    # mm-per-unit in assignment weights
    cone_sigma: float = 0.5               # collision field-of-view parameter
    collision_energy_exponent: int = 2    # 2 = squared field, 1 = plain field
    skip_adjacent: bool = True            # ignore vertex-sharing triangle pairs
    visibility_eps_mm: float = 5.0

    use_m2d: bool = True
    use_d2m: bool = True
    use_salient: bool = True
    use_collision: bool = True

    def __post_init__(self):
        if self.gamma_c < 0 or self.lambda_assign < 0:
            raise ValueError("weights must be nonnegative")
        if self.iterations < 1 or self.first_frame_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.metric not in ("p2p", "p2plane"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.ws_mode not in ("constant", "confidence"):
            raise ValueError(f"unknown ws_mode {self.ws_mode!r}")
        if not 0.0 < self.cone_sigma < 1.0:
            raise ValueError("cone_sigma must lie in (0, 1)")
        if self.collision_energy_exponent not in (1, 2):
            raise ValueError("collision_energy_exponent must be 1 or 2")


def config_from_dict(cls, overrides: dict | None):
    """Build a config dataclass from a plain dict, rejecting unknown keys."""
    overrides = dict(overrides or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**overrides)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
