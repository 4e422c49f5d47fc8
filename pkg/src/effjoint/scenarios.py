"""Canned scenarios matching the published simulation study."""

import numpy as np

from .kinematics import default_robot
from .particle_filter import SensorConfig
from .simulator import BentBodyConfig, ImuSensorSpec, MarkerSensorSpec, SensorSuite, posture_sweep

HEADLINE_LAMBDA = [-800.0, -800.0, 0.0, 0.0]
UNIMODAL_LAMBDA = [-800.0, -800.0, -800.0, 0.0]
HEADLINE_SIGMA = 0.01
IMU_FRAMES = ("link2", "link3")
EE_FRAME = "grasp_point"


def headline_scenario(k=0.033, hold=50, drift_rate=0.0, marker_var=1e-4, jitter=0.01):
    """Default arm, 4-posture pitch sweep, IMUs on link2/link3, EE marker."""
    model = default_robot()
    bent = BentBodyConfig(k, posture_sweep(model.n_joints, hold=hold))
    suite = SensorSuite(
        encoders=True,
        markers=(MarkerSensorSpec(EE_FRAME, np.eye(3) * marker_var),),
        imus=tuple(ImuSensorSpec(f, drift_rate, jitter) for f in IMU_FRAMES),
    )
    return model, bent, suite


def headline_filter_config(n_particles=2048, lam=None, **overrides):
    """Filter hyperparameters from the published table."""
    lam = HEADLINE_LAMBDA if lam is None else lam
    kw = dict(
        kappa_w=15.0,
        kappa_v=5.0,
        kappa_0=0.1,
        n_particles=n_particles,
        position_frames={EE_FRAME: [HEADLINE_SIGMA] * 3},
        orientation_frames={f: list(lam) for f in IMU_FRAMES},
    )
    kw.update(overrides)
    return SensorConfig(**kw)
