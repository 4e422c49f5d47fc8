import math

import numpy as np
import pytest

from effjoint.dirstats import circular_mean, wrap_angle
from effjoint.errors import ConfigError, ParameterError
from effjoint.kinematics import (
    Frame,
    Joint,
    Link,
    RobotModel,
    default_robot,
    forward_kinematics,
    forward_kinematics_many,
    quat_geodesic_distance,
    quat_multiply,
    quat_rotz,
)
from effjoint.particle_filter import ParticleFilter, SensorConfig
from effjoint.scenarios import HEADLINE_LAMBDA, headline_filter_config, headline_scenario
from effjoint.simulator import (
    DEFAULT_DRIFT_RATE,
    BentBodyConfig,
    ImuSensorSpec,
    MarkerSensorSpec,
    SensorSuite,
    direct_fusion,
    generate_observation,
    posture_sweep,
    simulate,
    simulate_effective_angles,
)

MODEL = default_robot()


def one_link(mass):
    return RobotModel(
        (Joint("pitch", (0.0, 1.0, 0.0), (0.0, 0.0, 0.0)),),
        (Link("beam", mass, (0.0, 0.0, 0.2)),),
        (Frame("tip", "beam", (0.0, 0.0, 0.4)),),
    )


def pitch_quats(theta):
    """Noise-free IMU readings for link2/link3 at joint vector theta."""
    poses = forward_kinematics_many(MODEL, theta, ["link2", "link3"])
    return {f: p.rotation for f, p in poses.items()}


class TestEffectiveAngles:
    def test_k_zero_is_identity(self):
        ref = np.array([0.1, 0.7, -0.3, 0.2])
        np.testing.assert_array_equal(simulate_effective_angles(MODEL, ref, 0.0), ref)

    def test_horizontal_one_link_sag(self):
        m, k = 1.5, 0.033
        eff = simulate_effective_angles(one_link(m), [math.pi / 2], k)
        assert eff[0] == pytest.approx(math.pi / 2 + k * m * 9.81 * 0.2, abs=1e-12)

    def test_hanging_down_unchanged(self):
        ref = np.array([0.0, math.pi - 1e-12, 0.0, 0.0])
        np.testing.assert_allclose(wrap_angle(simulate_effective_angles(MODEL, ref, 0.033) - ref), 0.0, atol=1e-9)

    def test_bends_toward_gravity(self):
        ref = np.array([0.0, math.pi / 3, 0.0, 0.0])
        z_ref = forward_kinematics(MODEL, ref, "grasp_point").translation[2]
        z_eff = forward_kinematics(MODEL, simulate_effective_angles(MODEL, ref, 0.033), "grasp_point").translation[2]
        assert z_eff < z_ref

    def test_sag_monotone_in_mass(self):
        sags = [simulate_effective_angles(one_link(m), [1.0], 0.033)[0] - 1.0 for m in (0.1, 0.5, 1.0, 2.0, 4.0)]
        assert np.all(np.diff(sags) > 0)

    def test_lipschitz(self):
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(50):
            ref = rng.uniform(-3, 3, 4)
            d = rng.standard_normal(4)
            d /= np.linalg.norm(d)
            a = simulate_effective_angles(MODEL, ref, 0.033)
            b = simulate_effective_angles(MODEL, ref + h * d, 0.033)
            # |d(theta + k g)| <= (1 + k * |grad g|) h; the torque gradient is a few N m per rad here
            assert np.linalg.norm(wrap_angle(b - a)) < 2.0 * h
            np.testing.assert_array_equal(a, simulate_effective_angles(MODEL, ref, 0.033))

    def test_negative_k(self):
        with pytest.raises(ParameterError):
            simulate_effective_angles(MODEL, np.zeros(4), -0.1)


class TestBentBodyConfig:
    def test_references_and_tail(self):
        bent = BentBodyConfig(0.033, posture_sweep(4, hold=5))
        refs, hold = bent.references()
        assert refs.shape == (20, 4)
        np.testing.assert_array_equal(hold, np.repeat(np.arange(4), 5))
        assert refs[-1, 1] == pytest.approx(math.pi / 2)
        np.testing.assert_array_equal(bent.tail_mask(2), np.tile([False, False, False, True, True], 4))

    @pytest.mark.parametrize("kw", [dict(k=-1.0, trajectory=((np.zeros(4), 1),)), dict(trajectory=()), dict(trajectory=((np.zeros(4), 0),))])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            BentBodyConfig(**kw)


class TestObservations:
    theta = np.array([0.3, 0.5, -0.4, 0.2])
    ref = np.array([0.3, 0.45, -0.42, 0.19])

    def test_noise_free_matches_fk(self):
        specs = SensorSuite(True, (MarkerSensorSpec("grasp_point", np.eye(3) * 1e-30),), (ImuSensorSpec("link3", 0.0, 0.0),))
        obs = generate_observation(MODEL, self.theta, self.ref, specs, 7, np.random.default_rng(0))
        poses = forward_kinematics_many(MODEL, self.theta, ["grasp_point", "link3"])
        np.testing.assert_array_equal(obs.reference_angles, self.ref)
        np.testing.assert_allclose(obs.positions["grasp_point"], poses["grasp_point"].translation, atol=1e-14)
        np.testing.assert_allclose(obs.orientations["link3"], poses["link3"].rotation, atol=1e-15)
        assert obs.step == 7

    def test_drift_ramp(self):
        specs = SensorSuite(False, (), (ImuSensorSpec("link2", 0.01, 0.0),))
        obs = generate_observation(MODEL, self.theta, self.ref, specs, 100, np.random.default_rng(0))
        expected = quat_multiply(quat_rotz(1.0), forward_kinematics(MODEL, self.theta, "link2").rotation)
        assert quat_geodesic_distance(obs.orientations["link2"], expected) < 1e-7
        assert obs.reference_angles is None

    def test_jitter_size(self):
        specs = SensorSuite(False, (), (ImuSensorSpec("link2", 0.0, 0.01),))
        true = forward_kinematics(MODEL, self.theta, "link2").rotation
        angles = [
            quat_geodesic_distance(
                generate_observation(MODEL, self.theta, self.ref, specs, 1, np.random.default_rng(s)).orientations["link2"],
                true,
            )
            for s in range(2000)
        ]
        # |N(0, sigma)| has mean sigma * sqrt(2 / pi)
        assert np.mean(angles) == pytest.approx(0.01 * math.sqrt(2 / math.pi), rel=0.05)

    def test_hidden_schedule(self):
        specs = SensorSuite(
            True,
            (MarkerSensorSpec("grasp_point", hidden=((5, 8),)),),
            (ImuSensorSpec("link2", hidden=((6, 7),)),),
        )
        rng = lambda: np.random.default_rng(0)  # noqa: E731
        hidden = generate_observation(MODEL, self.theta, self.ref, specs, 6, rng())
        assert hidden.positions["grasp_point"] is None
        assert hidden.orientations["link2"] is None
        shown = generate_observation(MODEL, self.theta, self.ref, specs, 8, rng())
        assert shown.positions["grasp_point"] is not None
        # the schedule does not shift the noise stream of other sensors
        visible = SensorSuite(True, (MarkerSensorSpec("grasp_point"),), (ImuSensorSpec("link2"),))
        partial = generate_observation(MODEL, self.theta, self.ref, specs, 7, rng())
        full = generate_observation(MODEL, self.theta, self.ref, visible, 7, rng())
        np.testing.assert_array_equal(partial.orientations["link2"], full.orientations["link2"])

    def test_default_drift_rate(self):
        assert ImuSensorSpec("link2").drift_rate == DEFAULT_DRIFT_RATE == 0.005

    def test_bad_covariance(self):
        with pytest.raises(ConfigError):
            MarkerSensorSpec("grasp_point", [[1.0, 2.0, 0], [2.0, 1.0, 0], [0, 0, 1.0]])

    def test_unknown_frame(self):
        with pytest.raises(ConfigError):
            SensorSuite(True, (MarkerSensorSpec("elbow"),)).validate(MODEL)

    def test_simulate_deterministic(self):
        model, bent, suite = headline_scenario(hold=3)
        a = simulate(model, bent, suite, seed=5)
        b = simulate(model, bent, suite, seed=5)
        c = simulate(model, bent, suite, seed=6)
        np.testing.assert_array_equal(a.observations[4].positions["grasp_point"], b.observations[4].positions["grasp_point"])
        assert not np.array_equal(a.observations[4].positions["grasp_point"], c.observations[4].positions["grasp_point"])
        assert [o.step for o in a.observations] == list(range(1, 13))


class TestDirectFusion:
    @pytest.mark.parametrize("pitches", [(0.0, 0.0), (0.3, -0.2), (math.pi / 3, 0.1), (-1.2, 0.9)])
    def test_pure_pitch_recovered(self, pitches):
        theta = np.array([0.0, pitches[0], pitches[1], 0.0])
        r = direct_fusion(pitch_quats(theta), "yxz", MODEL)
        assert not r.gimbal_lock
        assert abs(r.angles["link2_pitch_joint"] - theta[1]) < 1e-9
        assert abs(r.angles["link3_pitch_joint"] - theta[2]) < 1e-9
        np.testing.assert_allclose(r.joint_vector(MODEL, np.zeros(4))[1:3], theta[1:3], atol=1e-9)

    @pytest.mark.parametrize("yaw", [0.5, -2.0])
    def test_yaw_drift_cancelled(self, yaw):
        theta = np.array([0.0, 0.4, -0.6, 0.0])
        clean = direct_fusion(pitch_quats(theta), "yxz", MODEL)
        drifted = {f: quat_multiply(quat_rotz(yaw), q) for f, q in pitch_quats(theta).items()}
        out = direct_fusion(drifted, "yxz", MODEL)
        for j, v in clean.angles.items():
            assert abs(out.angles[j] - v) < 1e-9

    def test_xyz_horizontal_start_locks(self):
        # horizontal link2: its x axis is turned onto the base z axis
        theta = np.array([0.0, math.pi / 2, 0.0, 0.0])
        drifted = {f: quat_multiply(quat_rotz(0.3), q) for f, q in pitch_quats(theta).items()}
        out = direct_fusion(drifted, "xyz", MODEL)
        assert out.gimbal_lock
        assert any("gimbal lock" in w for w in out.warnings)
        good = direct_fusion(drifted, "yxz", MODEL)
        assert not good.gimbal_lock
        assert abs(good.angles["link2_pitch_joint"] - math.pi / 2) < 1e-9

    @pytest.mark.parametrize("past", [0.005, 0.05, 0.3])
    def test_xyz_wrong_past_horizontal(self, past):
        # beyond the lock the middle angle folds back and zeroing z strips a half turn
        theta = np.array([0.0, math.pi / 2 + past, -0.3, 0.0])
        drifted = {f: quat_multiply(quat_rotz(0.3), q) for f, q in pitch_quats(theta).items()}
        bad = direct_fusion(drifted, "xyz", MODEL)
        good = direct_fusion(drifted, "yxz", MODEL)
        assert abs(wrap_angle(bad.angles["link2_pitch_joint"] - theta[1])) > 1e-3
        assert abs(wrap_angle(good.angles["link2_pitch_joint"] - theta[1])) < 1e-9

    def test_bad_order(self):
        with pytest.raises(ParameterError):
            direct_fusion(pitch_quats(np.zeros(4)), "xxz", MODEL)

    def test_base_frame_rejected(self):
        with pytest.raises(ConfigError):
            direct_fusion({"base": np.array([0, 0, 0, 1.0])}, "yxz", MODEL)


class TestStaticRecovery:
    """Noise-free static postures: the sensors decide which angle is recovered.

    A static truth warrants a slow random walk, so kappa_v is raised well
    above the tracking value.
    """

    ref = np.array([0.0, math.pi / 3, 0.2, 0.1])

    def _run(self, cfg, specs, steps=40, seed=0):
        eff = simulate_effective_angles(MODEL, self.ref, 0.033)
        pf = ParticleFilter(cfg, MODEL, seed)
        for t in range(1, steps + 1):
            obs = generate_observation(MODEL, eff, self.ref, specs, t, np.random.default_rng(t))
            s = pf.step(obs)
        return eff, s.mean

    def test_encoder_only_recovers_reference(self):
        eff, est = self._run(SensorConfig(kappa_w=400.0, kappa_v=200.0, n_particles=2048), SensorSuite(True))
        assert np.abs(wrap_angle(est - self.ref)).max() < 0.02
        assert abs(wrap_angle(est[1] - eff[1])) > 0.08

    def test_marker_and_imu_recover_effective(self):
        specs = SensorSuite(
            False,
            (MarkerSensorSpec("grasp_point", np.eye(3) * 1e-30),),
            tuple(ImuSensorSpec(f, 0.0, 0.0) for f in ("link2", "link3")),
        )
        cfg = SensorConfig(
            kappa_v=200.0,
            n_particles=2048,
            position_frames={"grasp_point": 1e-4},
            orientation_frames={f: HEADLINE_LAMBDA for f in ("link2", "link3")},
        )
        eff, est = self._run(cfg, specs)
        assert np.abs(wrap_angle(est - eff)).max() < 0.02
        assert abs(wrap_angle(est[1] - self.ref[1])) > 0.08

    def test_direct_fusion_agrees_with_filter(self):
        model, bent, suite = headline_scenario(hold=30)
        run = simulate(model, bent, suite, seed=0)
        pf = ParticleFilter(headline_filter_config(), model, 0)
        est = np.array([pf.step(o).mean for o in run.observations])
        fused = np.array([
            [direct_fusion(o.orientations, "yxz", model).angles[j] for j in ("link2_pitch_joint", "link3_pitch_joint")]
            for o in run.observations
        ])
        for h in np.unique(run.hold_id):
            sel = (run.hold_id == h) & run.tail
            gap = wrap_angle(circular_mean(est[sel][:, 1:3], axis=0) - circular_mean(fused[sel], axis=0))
            assert np.abs(gap).max() < 0.05
