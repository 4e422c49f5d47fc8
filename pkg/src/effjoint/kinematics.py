"""Quaternion algebra, serial-chain forward kinematics and gravity torque.

Quaternions are numpy arrays in xyzw order (scalar last).  Every function
here broadcasts over leading axes so a whole particle ensemble can be pushed
through forward kinematics at once.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ParameterError

_UNIT_TOL = 1e-6
IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])


def _as_quat(q, check=True):
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise DomainError("quaternion must have 4 components (xyzw)")
    if check:
        n = np.linalg.norm(q, axis=-1)
        if np.any(np.abs(n - 1.0) > _UNIT_TOL):
            raise DomainError("quaternion must be unit-norm")
    return q


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """Flip sign so the scalar part is non-negative."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., 3:4] < 0.0, -q, q)


def quat_multiply(a, b):
    """Hamilton product a * b in xyzw storage."""
    a = _as_quat(a)
    b = _as_quat(b)
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + bw * ax + ay * bz - az * by,
            aw * by + bw * ay + az * bx - ax * bz,
            aw * bz + bw * az + ax * by - ay * bx,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_inverse(q):
    """Conjugate of a unit quaternion."""
    q = _as_quat(q)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.sin(half) * axis, np.cos(half)], axis=-1)


def quat_rotz(angle):
    return quat_from_axis_angle([0.0, 0.0, 1.0], angle)


def quat_to_rotmat(q):
    """Rotation matrix of a unit quaternion (component formula)."""
    q = _as_quat(q)
    x, y, z, w = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * y * y - 2 * z * z, -2 * w * z + 2 * x * y, 2 * w * y + 2 * x * z,
            2 * w * z + 2 * x * y, 1 - 2 * x * x - 2 * z * z, -2 * w * x + 2 * y * z,
            -2 * w * y + 2 * x * z, 2 * w * x + 2 * y * z, 1 - 2 * x * x - 2 * y * y,
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R):
    """Unit quaternion with w >= 0 for a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return np.stack([rotmat_to_quat(r) for r in R.reshape(-1, 3, 3)]).reshape(R.shape[:-2] + (4,))
    tr = np.trace(R)
    diag = np.diag(R)
    i = int(np.argmax(np.r_[diag, tr]))
    if i == 3:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif i == 0:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_canonical(quat_normalize(np.array(q)))


def quat_rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q`` (..., 4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_angle(q):
    """Rotation angle in [0, pi] of unit quaternions."""
    q = np.asarray(q, dtype=float)
    vn = np.linalg.norm(q[..., :3], axis=-1)
    return 2.0 * np.arctan2(vn, np.abs(q[..., 3]))


def quat_geodesic_distance(a, b):
    """Angle of the relative rotation between ``a`` and ``b`` (radians)."""
    return quat_angle(quat_multiply(quat_inverse(a), b))


def chordal_mean(quats, weights=None):
    """Principal eigenvector of sum w q q^T, canonicalized to w >= 0."""
    quats = np.asarray(quats, dtype=float).reshape(-1, 4)
    if weights is None:
        weights = np.full(len(quats), 1.0 / len(quats))
    M = (quats * np.asarray(weights)[:, None]).T @ quats
    _, vecs = np.linalg.eigh(M)
    return quat_canonical(vecs[:, -1])


# ---------------------------------------------------------------------------
# Robot model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t, rotation stored as a quaternion.

    Either field may carry leading batch axes.
    """

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def from_matrix(cls, R, t):
        return cls(rotmat_to_quat(R), np.array(t, dtype=float))

    @property
    def matrix(self):
        return quat_to_rotmat(self.rotation)

    def apply(self, x):
        return quat_rotate(self.rotation, x) + self.translation


@dataclass(frozen=True)
class Joint:
    name: str
    axis: tuple
    origin: tuple


@dataclass(frozen=True)
class Link:
    name: str
    mass: float
    com: tuple


@dataclass(frozen=True)
class Frame:
    name: str
    link: str
    offset: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class RobotModel:
    """Serial chain: joint j rotates link j about ``axis`` (in the parent
    link's frame) at ``origin`` relative to the parent joint.  Link ``base``
    is the fixed root.
    """

    joints: tuple
    links: tuple
    frames: tuple = ()
    gravity: tuple = (0.0, 0.0, -9.81)
    name: str = "robot"
    _frame_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ConfigError("model needs at least one joint", "joints")
        if len(self.links) != len(self.joints):
            raise ConfigError("one link per joint is required", "links")
        for j in self.joints:
            a = np.asarray(j.axis, dtype=float)
            if a.shape != (3,) or abs(np.linalg.norm(a) - 1.0) > 1e-9:
                raise ConfigError(f"axis of {j.name} must be a unit 3-vector", "joints")
        for lk in self.links:
            if lk.mass < 0:
                raise ConfigError(f"link {lk.name} has negative mass", "links")
        link_index = {"base": 0}
        for i, lk in enumerate(self.links, start=1):
            if lk.name in link_index:
                raise ConfigError(f"duplicate link name {lk.name}", "links")
            link_index[lk.name] = i
        index = {"base": (0, np.zeros(3))}
        for lk in self.links:
            index[lk.name] = (link_index[lk.name], np.zeros(3))
        for fr in self.frames:
            if fr.link not in link_index:
                raise ConfigError(f"frame {fr.name} references unknown link {fr.link}", "frames")
            if fr.name in index:
                raise ConfigError(f"duplicate frame name {fr.name}", "frames")
            index[fr.name] = (link_index[fr.link], np.asarray(fr.offset, dtype=float))
        object.__setattr__(self, "_frame_index", index)

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def joint_names(self):
        return [j.name for j in self.joints]

    @property
    def frame_names(self):
        return list(self._frame_index)

    def frame_location(self, frame):
        try:
            return self._frame_index[frame]
        except KeyError:
            raise KeyError(f"unknown frame {frame!r}") from None

    def reach(self):
        """Upper bound on distance from the base to any frame."""
        total = sum(np.linalg.norm(j.origin) for j in self.joints)
        extra = max((np.linalg.norm(off) for _, off in self._frame_index.values()), default=0.0)
        com = max((np.linalg.norm(lk.com) for lk in self.links), default=0.0)
        return total + max(extra, com)

    # -- serialization ----------------------------------------------------

    def to_dict(self):
        return {
            "name": self.name,
            "gravity": list(self.gravity),
            "joints": [{"name": j.name, "axis": list(j.axis), "origin": list(j.origin)} for j in self.joints],
            "links": [{"name": lk.name, "mass": lk.mass, "com": list(lk.com)} for lk in self.links],
            "frames": [{"name": f.name, "link": f.link, "offset": list(f.offset)} for f in self.frames],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            joints = tuple(
                Joint(j["name"], tuple(float(v) for v in j["axis"]), tuple(float(v) for v in j["origin"]))
                for j in d["joints"]
            )
            links = tuple(
                Link(lk["name"], float(lk["mass"]), tuple(float(v) for v in lk.get("com", (0, 0, 0))))
                for lk in d["links"]
            )
            frames = tuple(
                Frame(f["name"], f["link"], tuple(float(v) for v in f.get("offset", (0, 0, 0))))
                for f in d.get("frames", ())
            )
        except KeyError as exc:
            raise ConfigError(f"missing field {exc.args[0]!r}", "robot") from None
        gravity = tuple(float(v) for v in d.get("gravity", (0.0, 0.0, -9.81)))
        return cls(joints, links, frames, gravity, d.get("name", "robot"))

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_robot() -> RobotModel:
    """4-joint arm: yaw column then three pitch joints, upright at zero.

    Joint origins are 0.30 m (yaw to first pitch), 0.30 m and 0.15 m apart;
    ``grasp_point`` sits 0.10 m beyond the gripper joint.
    """
    z, y = (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)
    joints = (
        Joint("link1_yaw_joint", z, (0.0, 0.0, 0.0)),
        Joint("link2_pitch_joint", y, (0.0, 0.0, 0.30)),
        Joint("link3_pitch_joint", y, (0.0, 0.0, 0.30)),
        Joint("gripper_joint", y, (0.0, 0.0, 0.15)),
    )
    links = (
        Link("link1", 1.0, (0.0, 0.0, 0.15)),
        Link("link2", 0.8, (0.0, 0.0, 0.15)),
        Link("link3", 0.4, (0.0, 0.0, 0.075)),
        Link("gripper", 0.2, (0.0, 0.0, 0.05)),
    )
    frames = (Frame("grasp_point", "gripper", (0.0, 0.0, 0.10)),)
    return RobotModel(joints, links, frames, name="default_4dof")


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------


def _check_angles(model, angles):
    angles = np.asarray(angles, dtype=float)
    if angles.shape[-1] != model.n_joints:
        raise ParameterError(f"expected {model.n_joints} joint angles, got {angles.shape[-1]}")
    return angles


def link_poses(model: RobotModel, angles):
    """Poses of base and every link, as lists of (quaternion, position)."""
    angles = _check_angles(model, angles)
    batch = angles.shape[:-1]
    q = np.broadcast_to(IDENTITY, batch + (4,))
    p = np.zeros(batch + (3,))
    quats, pos = [q], [p]
    for j, joint in enumerate(model.joints):
        p = p + quat_rotate(q, joint.origin)
        q = quat_multiply(q, quat_from_axis_angle(joint.axis, angles[..., j]))
        quats.append(q)
        pos.append(p)
    return quats, pos


def forward_kinematics(model: RobotModel, angles, frame: str) -> Pose:
    """Pose of ``frame`` in the base frame; rotation has w >= 0."""
    link, offset = model.frame_location(frame)
    quats, pos = link_poses(model, angles)
    q, p = quats[link], pos[link]
    return Pose(quat_canonical(q), p + quat_rotate(q, offset))


def forward_kinematics_many(model: RobotModel, angles, frames):
    """Like :func:`forward_kinematics` for several frames, one chain pass."""
    quats, pos = link_poses(model, angles)
    out = {}
    for name in frames:
        link, offset = model.frame_location(name)
        q, p = quats[link], pos[link]
        out[name] = Pose(quat_canonical(q), p + quat_rotate(q, offset))
    return out


def potential_energy(model: RobotModel, angles):
    """Total gravitational potential energy, -sum m g.c (J)."""
    quats, pos = link_poses(model, angles)
    g = np.asarray(model.gravity)
    U = 0.0
    for i, lk in enumerate(model.links, start=1):
        c = pos[i] + quat_rotate(quats[i], lk.com)
        U = U - lk.mass * (c @ g)
    return U


def gravity_torque(model: RobotModel, angles):
    """Torque gravity exerts about each joint axis, i.e. -dU/dtheta (N m).

    Positive values rotate the joint in the direction gravity pulls it.
    """
    angles = _check_angles(model, angles)
    if angles.ndim != 1:
        return np.stack([gravity_torque(model, a) for a in angles.reshape(-1, model.n_joints)]).reshape(
            angles.shape
        )
    quats, pos = link_poses(model, angles)
    g = np.asarray(model.gravity)
    coms = [pos[i] + quat_rotate(quats[i], lk.com) for i, lk in enumerate(model.links, start=1)]
    forces = [lk.mass * g for lk in model.links]
    tau = np.zeros(model.n_joints)
    for j, joint in enumerate(model.joints):
        axis = quat_rotate(quats[j + 1], joint.axis)
        pivot = pos[j + 1]
        moment = sum(np.cross(coms[i] - pivot, forces[i]) for i in range(j, model.n_joints))
        tau[j] = axis @ moment
    return tau


def generalized_gravity(model: RobotModel, angles):
    """Gradient of the potential energy with respect to the joint angles, dU/dtheta."""
    return -gravity_torque(model, angles)


def cantilever_max_deflection(gamma, A, L, E, I):
    """Tip deflection of a cantilever under its own weight, gamma A L^4 / (8 E I)."""
    for name, v in (("gamma", gamma), ("A", A), ("L", L), ("E", E), ("I", I)):
        if not v > 0:
            raise ParameterError(f"{name} must be positive, got {v}")
    return gamma * A * L**4 / (8.0 * E * I)


def load_robot(ref) -> RobotModel:
    """Resolve a robot reference: ``None``/"default" or a JSON path."""
    if ref is None or ref == "default":
        return default_robot()
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"robot model file not found: {ref}", "robot")
    return RobotModel.from_json(path)
