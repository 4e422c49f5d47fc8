"""Experiment configuration, single runs and hyperparameter sweeps.

Outputs per run: ``steps.csv`` (one row per filter step) and
``summary.json``.  A sweep writes one run directory per value plus
``sweep.csv``/``sweep.json``.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dirstats import circular_mean, circular_rmse, wrap_angle
from .errors import ConfigError, ParameterError
from .kinematics import RobotModel, forward_kinematics_many, load_robot, quat_geodesic_distance
from .particle_filter import ParticleFilter, SensorConfig
from .simulator import (
    DEFAULT_DRIFT_RATE,
    BentBodyConfig,
    ImuSensorSpec,
    MarkerSensorSpec,
    SensorSuite,
    SimulationRun,
    direct_fusion,
    posture_sweep,
    simulate,
)

SWEEP_PARAMETERS = ("kappa_v", "kappa_w", "kappa_0", "N", "lambda_w", "sigma_ee")
# a run is flagged degenerate when on a typical step the weight sits on
# fewer than this many effective particles
DEGENERATE_MEDIAN_ESS = 2.0


@dataclass
class ExperimentConfig:
    model: RobotModel
    bent: BentBodyConfig
    sensors: SensorSuite
    filter: SensorConfig
    seed: int = 0
    output: Path = Path("results")
    tail: int = 25
    sweep: dict | None = None
    raw: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _locate(text, path):
    """Best-effort 1-based line of the last key in ``path``."""
    if not text:
        return None
    idx = 0
    for key in path:
        if isinstance(key, int):
            continue
        found = text.find(f'"{key}"', idx)
        if found < 0:
            return None
        idx = found
    return text.count("\n", 0, idx) + 1


class _Reader:
    def __init__(self, text):
        self.text = text

    def fail(self, msg, *path):
        raise ConfigError(msg, ".".join(str(p) for p in path) or None, _locate(self.text, path))

    def get(self, d, key, *path, default=..., kind=None):
        if key not in d:
            if default is ...:
                self.fail(f"missing required field {key!r}", *path, key)
            return default
        value = d[key]
        if kind is not None:
            try:
                value = kind(value)
            except (TypeError, ValueError):
                self.fail(f"expected {kind.__name__}, got {value!r}", *path, key)
        return value


def _hidden(reader, spec, *path):
    hidden = spec.get("hidden", [])
    out = []
    for i, iv in enumerate(hidden):
        if not (isinstance(iv, (list, tuple)) and len(iv) == 2):
            reader.fail("hidden intervals are [start, stop) pairs", *path, "hidden", i)
        out.append((int(iv[0]), int(iv[1])))
    return tuple(out)


def parse_config(data: dict, text: str = "", base_dir: Path | None = None) -> ExperimentConfig:
    r = _Reader(text)
    if not isinstance(data, dict):
        r.fail("top level must be a JSON object")
    base_dir = Path(base_dir or ".")

    robot_ref = data.get("robot", "default")
    if isinstance(robot_ref, dict):
        model = RobotModel.from_dict(robot_ref)
    else:
        if robot_ref not in (None, "default") and not Path(robot_ref).is_absolute():
            robot_ref = str(base_dir / robot_ref)
        try:
            model = load_robot(robot_ref)
        except ConfigError as exc:
            r.fail(str(exc), "robot")

    bb = r.get(data, "bent_body", default={})
    k = r.get(bb, "k", "bent_body", default=0.033, kind=float)
    traj_spec = bb.get("trajectory", "posture_sweep")
    if traj_spec == "posture_sweep":
        traj = posture_sweep(model.n_joints, hold=int(bb.get("hold", 50)))
    else:
        traj = []
        if not isinstance(traj_spec, list):
            r.fail("trajectory must be a list or 'posture_sweep'", "bent_body", "trajectory")
        for i, item in enumerate(traj_spec):
            angles = r.get(item, "angles", "bent_body", "trajectory", i)
            if len(angles) != model.n_joints:
                r.fail(f"expected {model.n_joints} angles", "bent_body", "trajectory", i, "angles")
            traj.append((np.asarray(angles, dtype=float), r.get(item, "hold", "bent_body", "trajectory", i, kind=int)))
        traj = tuple(traj)
    try:
        bent = BentBodyConfig(k, traj)
    except ParameterError as exc:
        r.fail(str(exc), "bent_body")

    ss = r.get(data, "sensors", default={})
    markers = []
    for i, m in enumerate(ss.get("markers", [])):
        frame = r.get(m, "frame", "sensors", "markers", i)
        if frame not in model.frame_names:
            r.fail(f"unknown frame {frame!r}", "sensors", "markers", i, "frame")
        markers.append(MarkerSensorSpec(frame, m.get("covariance", [1e-4] * 3), _hidden(r, m, "sensors", "markers", i)))
    imus = []
    for i, m in enumerate(ss.get("imus", [])):
        frame = r.get(m, "frame", "sensors", "imus", i)
        if frame not in model.frame_names:
            r.fail(f"unknown frame {frame!r}", "sensors", "imus", i, "frame")
        imus.append(
            ImuSensorSpec(
                frame,
                r.get(m, "drift_rate", "sensors", "imus", i, default=DEFAULT_DRIFT_RATE, kind=float),
                r.get(m, "jitter_sigma", "sensors", "imus", i, default=0.01, kind=float),
                _hidden(r, m, "sensors", "imus", i),
            )
        )
    sensors = SensorSuite(bool(ss.get("encoders", True)), tuple(markers), tuple(imus))

    fs = r.get(data, "filter", default={})
    for name in [*fs.get("position_frames", {}), *fs.get("orientation_frames", {})]:
        if name not in model.frame_names:
            r.fail(f"unknown frame {name!r}", "filter", name)
    try:
        filt = SensorConfig(
            kappa_w=r.get(fs, "kappa_w", "filter", default=15.0, kind=float),
            kappa_v=r.get(fs, "kappa_v", "filter", default=5.0, kind=float),
            kappa_0=r.get(fs, "kappa_0", "filter", default=0.1, kind=float),
            n_particles=r.get(fs, "n_particles", "filter", default=2048, kind=int),
            position_frames=fs.get("position_frames", {}),
            orientation_frames=fs.get("orientation_frames", {}),
            resample_ess_fraction=fs.get("resample_ess_fraction"),
            angular_noise=fs.get("angular_noise", "vonmises"),
            workers=r.get(fs, "workers", "filter", default=1, kind=int),
        )
    except (ConfigError, ParameterError) as exc:
        path = getattr(exc, "path", None) or "filter"
        raise ConfigError(str(exc).split(": ", 1)[-1], path, _locate(text, path.split("."))) from None

    sweep = data.get("sweep")
    if sweep is not None:
        param = r.get(sweep, "parameter", "sweep")
        if param not in SWEEP_PARAMETERS:
            r.fail(f"sweep parameter must be one of {SWEEP_PARAMETERS}", "sweep", "parameter")
        if not isinstance(sweep.get("values"), list) or not sweep["values"]:
            r.fail("sweep values must be a non-empty list", "sweep", "values")

    return ExperimentConfig(
        model=model,
        bent=bent,
        sensors=sensors,
        filter=filt,
        seed=r.get(data, "seed", default=0, kind=int),
        output=Path(data.get("output", "results")),
        tail=r.get(data, "tail", default=25, kind=int),
        sweep=sweep,
        raw=data,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", None, exc.lineno) from None
    return parse_config(data, text, path.parent)


def with_parameter(cfg: ExperimentConfig, name: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one sweepable hyperparameter replaced."""
    if name not in SWEEP_PARAMETERS:
        raise ConfigError(f"unknown sweep parameter {name!r}", "sweep.parameter")
    f = cfg.filter
    kw = dict(
        kappa_w=f.kappa_w,
        kappa_v=f.kappa_v,
        kappa_0=f.kappa_0,
        n_particles=f.n_particles,
        position_frames=dict(f.position_frames),
        orientation_frames=dict(f.orientation_frames),
        resample_ess_fraction=f.resample_ess_fraction,
        angular_noise=f.angular_noise,
        workers=f.workers,
    )
    if name == "N":
        kw["n_particles"] = int(value)
    elif name == "lambda_w":
        kw["orientation_frames"] = {k: list(value) for k in f.orientation_frames}
    elif name == "sigma_ee":
        kw["position_frames"] = {k: np.asarray(value, dtype=float) for k in f.position_frames}
    else:
        kw[name] = float(value)
    new = copy.copy(cfg)
    new.filter = SensorConfig(**kw)
    return new


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


@dataclass
class ExperimentResult:
    sim: SimulationRun
    estimate: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    ess: np.ndarray
    pos_err: dict
    ori_err: dict
    degenerate: np.ndarray
    summary: dict
    csv_text: str


def csv_header(model: RobotModel, watched):
    cols = ["step", "hold"]
    for j in model.joint_names:
        cols += [f"{j}_eff", f"{j}_ref", f"{j}_est", f"{j}_ci_low", f"{j}_ci_high"]
    cols.append("ess")
    for f in watched:
        cols += [f"{f}_pos_err", f"{f}_ori_err"]
    return cols


def watched_frames(model: RobotModel):
    return [f for f in model.frame_names if f != "base"]


def execute(cfg: ExperimentConfig, sim: SimulationRun | None = None) -> ExperimentResult:
    """Simulate (unless ``sim`` is given) and filter; nothing is written."""
    model = cfg.model
    t0 = time.perf_counter()
    if sim is None:
        sim = simulate(model, cfg.bent, cfg.sensors, cfg.seed, cfg.tail)
    watched = watched_frames(model)
    pf = ParticleFilter(cfg.filter, model, cfg.seed, watched)
    T, m = sim.theta_eff.shape
    est, lo, hi = np.empty((T, m)), np.empty((T, m)), np.empty((T, m))
    ess, degenerate = np.empty(T), np.zeros(T, dtype=bool)
    pos_err = {f: np.empty(T) for f in watched}
    ori_err = {f: np.empty(T) for f in watched}
    for t, obs in enumerate(sim.observations):
        s = pf.step(obs.restricted_to(cfg.filter))
        est[t], lo[t], hi[t], ess[t], degenerate[t] = s.mean, s.ci_low, s.ci_high, s.ess, s.degenerate
        truth = forward_kinematics_many(model, sim.theta_eff[t], watched)
        for f in watched:
            pos_err[f][t] = np.linalg.norm(s.frame_positions[f] - truth[f].translation)
            ori_err[f][t] = quat_geodesic_distance(s.frame_orientations[f], truth[f].rotation)
    runtime = time.perf_counter() - t0

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(csv_header(model, watched))
    for t in range(T):
        row = [t + 1, sim.hold_id[t]]
        for j in range(m):
            row += [sim.theta_eff[t, j], sim.theta_ref[t, j], est[t, j], lo[t, j], hi[t, j]]
        row.append(ess[t])
        for f in watched:
            row += [pos_err[f][t], ori_err[f][t]]
        w.writerow([_fmt(v) for v in row])

    tail = sim.tail
    names = model.joint_names
    width = wrap_angle(hi - lo) % (2 * np.pi)
    summary = {
        "n_steps": int(T),
        "seed": cfg.seed,
        "n_particles": cfg.filter.n_particles,
        "rmse": dict(zip(names, circular_rmse(est[tail], sim.theta_eff[tail]).tolist())),
        "rmse_all": dict(zip(names, circular_rmse(est, sim.theta_eff).tolist())),
        "naive_rmse": dict(zip(names, circular_rmse(sim.theta_ref[tail], sim.theta_eff[tail]).tolist())),
        "mean_ci_width": dict(zip(names, width[tail].mean(axis=0).tolist())),
        "final_position_error": {f: float(np.mean(pos_err[f][tail])) for f in watched},
        "min_ess": float(ess.min()),
        "median_ess": float(np.median(ess)),
        "degenerate_steps": int(degenerate.sum()),
        "degenerate": bool(degenerate.any() or np.median(ess) < DEGENERATE_MEDIAN_ESS),
        "runtime_s": runtime,
    }
    return ExperimentResult(sim, est, lo, hi, ess, pos_err, ori_err, degenerate, summary, buf.getvalue())


def write_result(result: ExperimentResult, out_dir, config_echo=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "steps.csv").write_text(result.csv_text, newline="")
    summary = dict(result.summary)
    if config_echo is not None:
        summary["config"] = config_echo
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    result = execute(cfg)
    write_result(result, out_dir or cfg.output, cfg.raw)
    return result


def _sweep_one(args):
    cfg, param, value, out_dir = args
    result = execute(with_parameter(cfg, param, value))
    write_result(result, out_dir)
    return result.summary


def _label(value):
    if isinstance(value, list):
        return "_".join(_fmt(v) for v in value)
    return _fmt(value)


def run_sweep(cfg: ExperimentConfig, out_dir=None, jobs=1):
    """One run per sweep value, all with the same seed; returns the report."""
    if not cfg.sweep:
        raise ConfigError("config has no sweep block", "sweep")
    param, values = cfg.sweep["parameter"], cfg.sweep["values"]
    out = Path(out_dir or cfg.output)
    tasks = [(cfg, param, v, out / f"{param}={_label(v)}") for v in values]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_sweep_one, tasks))
    else:
        summaries = [_sweep_one(t) for t in tasks]

    names = cfg.model.joint_names
    rows = []
    for v, s in zip(values, summaries):
        rows.append(
            {
                "value": v,
                "rmse": s["rmse"],
                "mean_rmse": float(np.mean(list(s["rmse"].values()))),
                "mean_ci_width": s["mean_ci_width"],
                "min_ess": s["min_ess"],
                "median_ess": s["median_ess"],
                "degenerate": s["degenerate"],
                "runtime_s": s["runtime_s"],
            }
        )
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(
            ["value"] + [f"{j}_rmse" for j in names] + ["mean_rmse"] + [f"{j}_ci_width" for j in names]
            + ["min_ess", "median_ess", "degenerate"]
        )
        for row in rows:
            w.writerow(
                [_label(row["value"])]
                + [_fmt(row["rmse"][j]) for j in names]
                + [_fmt(row["mean_rmse"])]
                + [_fmt(row["mean_ci_width"][j]) for j in names]
                + [_fmt(row["min_ess"]), _fmt(row["median_ess"]), int(row["degenerate"])]
            )
    report = {"parameter": param, "seed": cfg.seed, "rows": rows}
    (out / "sweep.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# ---------------------------------------------------------------------------
# Direct fusion comparison
# ---------------------------------------------------------------------------


def run_direct_fusion(cfg: ExperimentConfig, out_dir=None, orders=("yxz", "xyz")):
    """Direct fusion in each Euler order next to the filter, per step."""
    if not cfg.sensors.imus:
        raise ConfigError("direct fusion needs at least one IMU", "sensors.imus")
    result = execute(cfg)
    sim = result.sim
    model = cfg.model
    imu_frames = [s.frame for s in cfg.sensors.imus]
    joints = [model.joints[model.frame_location(f)[0] - 1].name for f in imu_frames]
    jidx = [model.joint_names.index(j) for j in joints]

    per_order = {o: np.full((len(sim.observations), len(joints)), np.nan) for o in orders}
    lock = {o: np.zeros(len(sim.observations), dtype=bool) for o in orders}
    for t, obs in enumerate(sim.observations):
        quats = {f: obs.orientations[f] for f in imu_frames if obs.orientations.get(f) is not None}
        if len(quats) != len(imu_frames):
            continue
        for o in orders:
            r = direct_fusion(quats, o, model)
            per_order[o][t] = [r.angles[j] for j in joints]
            lock[o][t] = r.gimbal_lock

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    header = ["step"] + [f"{j}_eff" for j in joints] + [f"{j}_filter" for j in joints]
    for o in orders:
        header += [f"{j}_{o}" for j in joints] + [f"gimbal_lock_{o}"]
    w.writerow(header)
    for t in range(len(sim.observations)):
        row = [_fmt(t + 1)] + [_fmt(sim.theta_eff[t, i]) for i in jidx] + [_fmt(result.estimate[t, i]) for i in jidx]
        for o in orders:
            row += [_fmt(v) for v in per_order[o][t]] + [str(int(lock[o][t]))]
        w.writerow(row)

    tail = sim.tail
    summary = {
        "joints": joints,
        "filter_rmse": circular_rmse(result.estimate[tail][:, jidx], sim.theta_eff[tail][:, jidx]).tolist(),
    }
    for o in orders:
        ok = ~np.isnan(per_order[o][:, 0]) & tail
        summary[f"{o}_rmse"] = circular_rmse(per_order[o][ok], sim.theta_eff[ok][:, jidx]).tolist()
        summary[f"{o}_gimbal_lock_steps"] = int(lock[o].sum())
    out = Path(out_dir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "direct_fusion.csv").write_text(buf.getvalue(), newline="")
    (out / "direct_fusion.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary, per_order, lock, result


def hold_means(values, sim: SimulationRun):
    """Circular mean of ``values`` over the tail of each hold, (holds, m)."""
    out = []
    for h in np.unique(sim.hold_id):
        sel = (sim.hold_id == h) & sim.tail
        out.append(circular_mean(values[sel], axis=0))
    return np.array(out)
