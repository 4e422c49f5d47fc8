"""Particle filter over effective joint angles.

The state is the joint vector of the rigid model.  Each step runs
predict (von Mises random walk) -> composite log-likelihood ->
max-shifted weight normalization -> summary -> stratified resampling.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import dirstats as ds
from .errors import ConfigError, DegenerateLikelihood, ParameterError
from .kinematics import (
    RobotModel,
    chordal_mean,
    forward_kinematics_many,
    quat_inverse,
    quat_multiply,
)

log = logging.getLogger(__name__)

# log-likelihood this far below the best achievable value flags degeneration
DEGENERACY_GAP = 1e6

# substream tags for the per-step generators
_INIT, _STEP = 0, 1


@dataclass
class ParticleEnsemble:
    particles: np.ndarray  # (N, m), wrapped angles
    log_weights: np.ndarray  # (N,)
    generation: int = 0

    @property
    def n(self):
        return self.particles.shape[0]

    @property
    def m(self):
        return self.particles.shape[1]

    def weights(self):
        return normalize_log_weights(self.log_weights)


@dataclass
class Observation:
    """One timestep of sensor data.

    ``positions`` and ``orientations`` map frame names to a value, or to
    ``None`` when that sensor is unavailable at this step.
    """

    reference_angles: Optional[np.ndarray] = None
    positions: dict = field(default_factory=dict)
    orientations: dict = field(default_factory=dict)
    step: int = 0

    def restricted_to(self, cfg: "SensorConfig") -> "Observation":
        return replace(
            self,
            positions={k: v for k, v in self.positions.items() if k in cfg.position_frames},
            orientations={k: v for k, v in self.orientations.items() if k in cfg.orientation_frames},
        )


@dataclass
class SensorConfig:
    """Filter hyperparameters and the observed frames.

    ``position_frames`` maps frame -> 3x3 covariance (or per-axis variances);
    ``orientation_frames`` maps frame -> BinghamParams or a 4-vector of
    eigenvalues (with D = I).
    """

    kappa_w: float = 15.0
    kappa_v: float = 5.0
    kappa_0: float = 0.1
    n_particles: int = 2048
    position_frames: dict = field(default_factory=dict)
    orientation_frames: dict = field(default_factory=dict)
    resample_ess_fraction: Optional[float] = None
    angular_noise: str = "vonmises"
    workers: int = 1

    def __post_init__(self):
        for name in ("kappa_w", "kappa_v"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", f"filter.{name}")
        if not self.kappa_0 >= 0:
            raise ConfigError("kappa_0 must be >= 0", "filter.kappa_0")
        if int(self.n_particles) < 1:
            raise ConfigError("n_particles must be >= 1", "filter.n_particles")
        self.n_particles = int(self.n_particles)
        if self.angular_noise not in ("vonmises", "gaussian"):
            raise ConfigError("angular_noise must be 'vonmises' or 'gaussian'", "filter.angular_noise")
        pos = {}
        for name, cov in self.position_frames.items():
            if isinstance(cov, ds.GaussianParams):
                pos[name] = cov
                continue
            cov = np.asarray(cov, dtype=float)
            if cov.ndim == 0:
                cov = np.eye(3) * float(cov)
            elif cov.ndim == 1:
                cov = np.diag(cov)
            try:
                pos[name] = ds.GaussianParams(np.zeros(3), cov)
            except ParameterError as exc:
                raise ConfigError(str(exc), f"filter.position_frames.{name}") from None
        self.position_frames = pos
        ori = {}
        for name, p in self.orientation_frames.items():
            if not isinstance(p, ds.BinghamParams):
                p = ds.BinghamParams(np.eye(4), p)
            ori[name] = p.canonical()
        self.orientation_frames = ori

    @property
    def reference_params(self):
        return ds.VonMisesParams(self.kappa_w, 0.0)

    @property
    def observed_frames(self):
        return list(dict.fromkeys([*self.position_frames, *self.orientation_frames]))


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    ess: float
    frame_positions: dict = field(default_factory=dict)
    frame_orientations: dict = field(default_factory=dict)
    max_log_likelihood: float = 0.0
    degenerate: bool = False

    @property
    def ci_width(self):
        return ds.wrap_angle(self.ci_high - self.ci_low) % (2 * np.pi)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _angular_noise(cfg: SensorConfig, kappa, rng, shape):
    if cfg.angular_noise == "gaussian":
        return ds.wrap_angle(rng.normal(0.0, 1.0 / math.sqrt(kappa), size=shape))
    return ds.vm_sample(ds.VonMisesParams(kappa), rng, size=shape)


def init_particles(cfg: SensorConfig, m: int, rng: np.random.Generator) -> ParticleEnsemble:
    """N x m particles i.i.d. VM(kappa_0, 0), uniform log-weights."""
    n = cfg.n_particles
    parts = ds.vm_sample(ds.VonMisesParams(cfg.kappa_0), rng, size=(n, m))
    return ParticleEnsemble(parts, np.full(n, -math.log(n)), 0)


def predict(ens: ParticleEnsemble, cfg: SensorConfig, rng: np.random.Generator) -> ParticleEnsemble:
    """Quasi-static random walk x + v, v ~ VM(kappa_v, 0)^m."""
    noise = _angular_noise(cfg, cfg.kappa_v, rng, ens.particles.shape)
    return ParticleEnsemble(ds.wrap_angle(ens.particles + noise), ens.log_weights.copy(), ens.generation)


def _check_frames(obs: Observation, cfg: SensorConfig, model: RobotModel):
    for name in obs.positions:
        if name not in cfg.position_frames:
            raise ConfigError(f"observed position frame {name!r} is not configured")
    for name in obs.orientations:
        if name not in cfg.orientation_frames:
            raise ConfigError(f"observed orientation frame {name!r} is not configured")
    for name in cfg.observed_frames:
        if name not in model.frame_names:
            raise ConfigError(f"frame {name!r} does not exist in robot model {model.name}")


def log_likelihood_terms(particles, obs: Observation, cfg: SensorConfig, model: RobotModel):
    """Per-particle reference, position and orientation log-likelihoods.

    Unavailable sensors contribute exactly zero.
    """
    _check_frames(obs, cfg, model)
    x = np.asarray(particles, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    ref = np.zeros(n)
    pos = np.zeros(n)
    ori = np.zeros(n)

    if obs.reference_angles is not None:
        u = np.asarray(obs.reference_angles, dtype=float)
        # VM(u - x; kappa_w, 0) -- symmetric in the sign of the residual
        ref = np.sum(ds.vm_log_density(u - x, cfg.reference_params), axis=-1)

    pos_frames = [f for f, v in obs.positions.items() if v is not None]
    ori_frames = [f for f, v in obs.orientations.items() if v is not None]
    if pos_frames or ori_frames:
        poses = forward_kinematics_many(model, x, dict.fromkeys(pos_frames + ori_frames))
        for f in pos_frames:
            resid = np.asarray(obs.positions[f], dtype=float) - poses[f].translation
            pos = pos + ds.gaussian_log_density(resid, cfg.position_frames[f])
        for f in ori_frames:
            q_obs = np.asarray(obs.orientations[f], dtype=float)
            resid = quat_multiply(q_obs, quat_inverse(poses[f].rotation))
            ori = ori + ds.bingham_unnorm_log_density(resid, cfg.orientation_frames[f])
    if single:
        return float(ref[0]), float(pos[0]), float(ori[0])
    return ref, pos, ori


def log_likelihood(particles, obs: Observation, cfg: SensorConfig, model: RobotModel):
    """Composite log-likelihood: reference + position + orientation terms."""
    ref, pos, ori = log_likelihood_terms(particles, obs, cfg, model)
    return ref + pos + ori


def best_log_likelihood(obs: Observation, cfg: SensorConfig, m: int) -> float:
    """Supremum of the composite log-likelihood for this observation."""
    best = 0.0
    if obs.reference_angles is not None:
        best += m * (cfg.kappa_w - cfg.reference_params.log_normalizer)
    for f, v in obs.positions.items():
        if v is not None:
            best += cfg.position_frames[f].log_mode_density
    return best


def normalize_log_weights(log_l) -> np.ndarray:
    """exp(ll_i - ll_M) / sum_j exp(ll_j - ll_M), M = argmax."""
    ll = np.asarray(log_l, dtype=float)
    ll = np.where(np.isnan(ll), -np.inf, ll)
    top = ll[np.argmax(ll)]
    if not np.isfinite(top):
        raise DegenerateLikelihood("all log-likelihoods are -inf or NaN")
    w = np.exp(ll - top)
    return w / np.sum(w)


def effective_sample_size(beta) -> float:
    beta = np.asarray(beta)
    return float(1.0 / np.sum(beta * beta))


def stratified_indices(beta, rng: np.random.Generator) -> np.ndarray:
    n = len(beta)
    u = (np.arange(n) + rng.random(n)) / n
    cdf = np.cumsum(beta)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


def resample_stratified(ens: ParticleEnsemble, beta, rng: np.random.Generator) -> ParticleEnsemble:
    """One uniform draw per stratum [(i + U_i)/N]; weights reset to uniform."""
    idx = stratified_indices(beta, rng)
    n = ens.n
    return ParticleEnsemble(ens.particles[idx].copy(), np.full(n, -math.log(n)), ens.generation)


def _weighted_quantiles(values, weights, qs):
    order = np.argsort(values, kind="stable")
    v = values[order]
    cdf = np.cumsum(weights[order])
    cdf /= cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, qs, side="left"), len(v) - 1)
    return v[idx]


def summarize(particles, beta, model: RobotModel, watched_frames=(), level=0.95) -> PosteriorSummary:
    """Weighted circular mean, credible interval, ESS and frame poses."""
    x = np.atleast_2d(np.asarray(particles, dtype=float))
    beta = np.asarray(beta, dtype=float)
    mean = ds.circular_mean(x, weights=beta, axis=0)
    dev = ds.wrap_angle(x - mean)
    tail = 0.5 * (1.0 - level)
    lo = np.empty(x.shape[1])
    hi = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        lo[j], hi[j] = _weighted_quantiles(dev[:, j], beta, [tail, 1.0 - tail])
    summary = PosteriorSummary(
        mean=np.atleast_1d(mean),
        ci_low=ds.wrap_angle(mean + lo),
        ci_high=ds.wrap_angle(mean + hi),
        ess=effective_sample_size(beta),
    )
    if watched_frames:
        poses = forward_kinematics_many(model, x, watched_frames)
        for f, pose in poses.items():
            summary.frame_positions[f] = beta @ pose.translation
            summary.frame_orientations[f] = chordal_mean(pose.rotation, beta)
    return summary


# ---------------------------------------------------------------------------
# Recursion
# ---------------------------------------------------------------------------


def _parallel_log_likelihood(particles, obs, cfg, model, workers):
    if workers <= 1 or len(particles) < 2 * workers:
        return log_likelihood(particles, obs, cfg, model)
    chunks = np.array_split(particles, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: log_likelihood(c, obs, cfg, model), chunks))
    return np.concatenate(parts)


def step(ens, obs, cfg, model, rng, watched_frames=()):
    """predict -> weight -> summarize -> resample.

    The summary is taken from the weighted, pre-resampling ensemble.
    """
    pred = predict(ens, cfg, rng)
    ll = _parallel_log_likelihood(pred.particles, obs, cfg, model, cfg.workers)
    total = pred.log_weights + ll
    try:
        beta = normalize_log_weights(total)
    except DegenerateLikelihood as exc:
        exc.diagnostics.update(step=obs.step, n_particles=pred.n)
        raise
    max_ll = float(np.max(ll))
    summary = summarize(pred.particles, beta, model, watched_frames)
    summary.max_log_likelihood = max_ll
    gap = best_log_likelihood(obs, cfg, pred.m) - max_ll
    if gap > DEGENERACY_GAP:
        summary.degenerate = True
        log.warning("step %d: best particle is %.3g below the achievable log-likelihood", obs.step, gap)

    if cfg.resample_ess_fraction is not None and summary.ess >= cfg.resample_ess_fraction * pred.n:
        new = ParticleEnsemble(pred.particles, np.log(beta), pred.generation + 1)
    else:
        new = resample_stratified(pred, beta, rng)
        new.generation = pred.generation + 1
    return new, summary


def substream(seed: int, tag: int, t: int) -> np.random.Generator:
    """Generator keyed by (seed, tag, t); independent of call order."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(tag), int(t)))
    return np.random.Generator(np.random.PCG64(ss))


class ParticleFilter:
    """Owns one ensemble and the seeded substreams that drive it.

    Results are bit-reproducible given (seed, N, step count) and do not
    depend on ``cfg.workers``.
    """

    def __init__(self, cfg: SensorConfig, model: RobotModel, seed: int = 0, watched_frames=None):
        self.cfg = cfg
        self.model = model
        self.seed = int(seed)
        self.watched_frames = tuple(model.frame_names if watched_frames is None else watched_frames)
        self.t = 0
        self.ensemble = init_particles(cfg, model.n_joints, substream(self.seed, _INIT, 0))

    def step(self, obs: Observation) -> PosteriorSummary:
        self.t += 1
        self.ensemble, summary = step(
            self.ensemble,
            obs,
            self.cfg,
            self.model,
            substream(self.seed, _STEP, self.t),
            self.watched_frames,
        )
        return summary
