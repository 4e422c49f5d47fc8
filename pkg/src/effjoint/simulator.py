"""Synthetic ground truth and virtual sensors.

Effective angles come from bending the commanded posture by gravity,
theta_eff = theta_ref + k * gravity_torque(theta_ref).  Encoders report the
commanded angles, markers report noisy positions and IMUs report
orientations carrying a linear yaw drift.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .dirstats import wrap_angle
from .errors import ConfigError, ParameterError
from .kinematics import (
    RobotModel,
    forward_kinematics_many,
    gravity_torque,
    quat_canonical,
    quat_from_axis_angle,
    quat_inverse,
    quat_multiply,
    quat_rotz,
)
from .particle_filter import Observation, substream

_SIM_TAG = 2
GIMBAL_TOL = 1e-3
DEFAULT_DRIFT_RATE = 0.005


def _hidden(intervals, step):
    return any(a <= step < b for a, b in intervals)


@dataclass(frozen=True)
class BentBodyConfig:
    """Deflection gain ``k`` (rad per N m) and a list of (angles, hold) pairs."""

    k: float = 0.033
    trajectory: tuple = ()

    def __post_init__(self):
        if not self.k >= 0:
            raise ParameterError("k must be >= 0")
        if not self.trajectory:
            raise ParameterError("trajectory must not be empty")
        for _, hold in self.trajectory:
            if int(hold) < 1:
                raise ParameterError("hold counts must be >= 1")

    @property
    def n_steps(self):
        return sum(int(h) for _, h in self.trajectory)

    def references(self):
        """(T, m) commanded angles and the (T,) index of each step's hold."""
        refs, hold_id = [], []
        for i, (angles, hold) in enumerate(self.trajectory):
            refs.extend([np.asarray(angles, dtype=float)] * int(hold))
            hold_id.extend([i] * int(hold))
        return wrap_angle(np.array(refs)), np.array(hold_id)

    def tail_mask(self, tail=25):
        """True on the final ``tail`` steps of every hold."""
        mask = []
        for _, hold in self.trajectory:
            hold = int(hold)
            mask.extend([i >= hold - tail for i in range(hold)])
        return np.array(mask)


def posture_sweep(m=4, pitch_joint=1, hold=50, pitches=(0.0, math.pi / 6, math.pi / 3, math.pi / 2)):
    """Vertical -> 30 deg -> 60 deg -> horizontal on one pitch joint."""
    traj = []
    for p in pitches:
        a = np.zeros(m)
        a[pitch_joint] = p
        traj.append((a, hold))
    return tuple(traj)


@dataclass(frozen=True)
class ImuSensorSpec:
    """Orientation sensor with a yaw ramp of ``drift_rate`` rad per step.

    Jitter is a random-axis rotation with angle |N(0, jitter_sigma)|.
    ``hidden`` lists half-open [start, stop) step intervals with no data.
    """

    frame: str
    drift_rate: float = DEFAULT_DRIFT_RATE
    jitter_sigma: float = 0.01
    hidden: tuple = ()

    def available(self, step):
        return not _hidden(self.hidden, step)


@dataclass(frozen=True)
class MarkerSensorSpec:
    frame: str
    covariance: np.ndarray = field(default_factory=lambda: np.eye(3) * 1e-4)
    hidden: tuple = ()

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim == 0:
            cov = np.eye(3) * float(cov)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigError(f"marker {self.frame}: covariance must be positive definite") from None
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)

    def available(self, step):
        return not _hidden(self.hidden, step)


@dataclass(frozen=True)
class SensorSuite:
    encoders: bool = True
    markers: tuple = ()
    imus: tuple = ()

    def validate(self, model: RobotModel):
        for s in (*self.markers, *self.imus):
            if s.frame not in model.frame_names:
                raise ConfigError(f"sensor frame {s.frame!r} not in robot model")


def simulate_effective_angles(model: RobotModel, theta_ref, k):
    """Wrapped theta_ref + k * gravity_torque(theta_ref)."""
    if not k >= 0:
        raise ParameterError("k must be >= 0")
    theta_ref = np.asarray(theta_ref, dtype=float)
    if k == 0:
        return wrap_angle(theta_ref)
    return wrap_angle(theta_ref + k * gravity_torque(model, theta_ref))


def _jitter(rng, sigma):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
    return quat_from_axis_angle(axis, angle)


def generate_observation(model: RobotModel, theta_eff, theta_ref, specs: SensorSuite, step, rng):
    """Sensor readings at ``step`` for a robot whose true posture is theta_eff.

    Noise is drawn for every sensor even when it is hidden, so the random
    stream does not depend on the availability schedule.
    """
    frames = [s.frame for s in (*specs.markers, *specs.imus)]
    poses = forward_kinematics_many(model, np.asarray(theta_eff, dtype=float), frames) if frames else {}
    positions, orientations = {}, {}
    for mk in specs.markers:
        noise = mk._chol @ rng.standard_normal(3)
        positions[mk.frame] = poses[mk.frame].translation + noise if mk.available(step) else None
    for imu in specs.imus:
        jitter = _jitter(rng, imu.jitter_sigma)
        q = quat_multiply(quat_rotz(imu.drift_rate * step), quat_multiply(jitter, poses[imu.frame].rotation))
        orientations[imu.frame] = quat_canonical(q) if imu.available(step) else None
    ref = np.array(theta_ref, dtype=float) if specs.encoders else None
    return Observation(ref, positions, orientations, step)


@dataclass
class SimulationRun:
    theta_ref: np.ndarray
    theta_eff: np.ndarray
    hold_id: np.ndarray
    tail: np.ndarray
    observations: list


def simulate(model: RobotModel, bent: BentBodyConfig, specs: SensorSuite, seed=0, tail=25) -> SimulationRun:
    """Truth trajectory plus one observation per step (steps start at 1)."""
    specs.validate(model)
    refs, hold_id = bent.references()
    effs = np.array([simulate_effective_angles(model, r, bent.k) for r in refs])
    obs = [
        generate_observation(model, effs[i], refs[i], specs, i + 1, substream(seed, _SIM_TAG, i + 1))
        for i in range(len(refs))
    ]
    return SimulationRun(refs, effs, hold_id, bent.tail_mask(tail), obs)


# ---------------------------------------------------------------------------
# Direct fusion baseline
# ---------------------------------------------------------------------------


@dataclass
class DirectFusionResult:
    angles: dict  # joint name -> angle, IMU-derived joints only
    gimbal_lock: bool = False
    warnings: list = field(default_factory=list)

    def joint_vector(self, model: RobotModel, encoder):
        """Fill the joints without an IMU from the encoder readings."""
        out = np.array(encoder, dtype=float)
        for j, name in enumerate(model.joint_names):
            if name in self.angles:
                out[j] = self.angles[name]
        return out


def _yaw_cancel(q, order):
    if sorted(order) != ["x", "y", "z"] or order != order.lower():
        raise ParameterError(f"euler order must be a permutation of 'xyz', got {order!r}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        angles = Rotation.from_quat(q).as_euler(order)
    lock = abs(abs(angles[1]) - math.pi / 2) < GIMBAL_TOL or any("Gimbal lock" in str(w.message) for w in caught)
    angles[order.index("z")] = 0.0
    return quat_canonical(Rotation.from_euler(order, angles).as_quat()), lock, angles


def direct_fusion(imu_quats: dict, euler_order: str, model: RobotModel) -> DirectFusionResult:
    """Joint angles read straight off yaw-cancelled IMU orientations.

    Each orientation is split into extrinsic Euler angles in ``euler_order``,
    its z angle is set to zero and the quaternion rebuilt.  The angle of each
    IMU-carrying link's joint is the rotation, about the joint axis, from the
    previous yaw-cancelled orientation (identity for the first IMU).
    """
    items = []
    for frame, q in imu_quats.items():
        link, _ = model.frame_location(frame)
        if link == 0:
            raise ConfigError(f"IMU frame {frame!r} is attached to the base")
        items.append((link, frame, np.asarray(q, dtype=float)))
    items.sort(key=lambda t: t[0])

    result = DirectFusionResult({})
    prev = np.array([0.0, 0.0, 0.0, 1.0])
    for link, frame, q in items:
        cancelled, lock, eul = _yaw_cancel(q, euler_order)
        if lock:
            result.gimbal_lock = True
            result.warnings.append(
                f"{frame}: gimbal lock in '{euler_order}' decomposition (middle angle {eul[1]:.4f} rad)"
            )
        joint = model.joints[link - 1]
        rel = quat_multiply(quat_inverse(prev), cancelled)
        axis = np.asarray(joint.axis)
        result.angles[joint.name] = wrap_angle(2.0 * math.atan2(rel[:3] @ axis, rel[3]))
        prev = cancelled
    return result
