"""Particle-filter estimation of effective joint angles with directional noise models."""

from .dirstats import (
    BinghamParams,
    GaussianParams,
    VonMisesParams,
    bingham_log_normalizer,
    bingham_unnorm_log_density,
    circular_mean,
    gaussian_log_density,
    vm_log_density,
    vm_sample,
    wrap_angle,
)
from .kinematics import (
    Pose,
    RobotModel,
    cantilever_max_deflection,
    default_robot,
    forward_kinematics,
    generalized_gravity,
    gravity_torque,
    quat_inverse,
    quat_multiply,
    quat_to_rotmat,
)
from .particle_filter import (
    Observation,
    ParticleEnsemble,
    ParticleFilter,
    PosteriorSummary,
    SensorConfig,
    init_particles,
    log_likelihood,
    normalize_log_weights,
    predict,
    resample_stratified,
    step,
    summarize,
)
from .simulator import direct_fusion, generate_observation, simulate_effective_angles

__version__ = "0.1.0"
