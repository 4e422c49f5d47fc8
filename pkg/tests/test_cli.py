import copy
import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from effjoint.cli import main
from effjoint.errors import ConfigError
from effjoint.experiment import csv_header, load_config, parse_config, watched_frames, with_parameter
from effjoint.kinematics import default_robot

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = {
    "seed": 3,
    "bent_body": {"k": 0.033, "trajectory": "posture_sweep", "hold": 6},
    "tail": 3,
    "sensors": {
        "encoders": True,
        "markers": [{"frame": "grasp_point", "covariance": [1e-4, 1e-4, 1e-4]}],
        "imus": [{"frame": "link2", "drift_rate": 0.0}, {"frame": "link3", "drift_rate": 0.0}],
    },
    "filter": {
        "n_particles": 128,
        "position_frames": {"grasp_point": [0.01, 0.01, 0.01]},
        "orientation_frames": {"link2": [-800, -800, 0, 0], "link3": [-800, -800, 0, 0]},
    },
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return path


def run_cli(*args):
    return main([str(a) for a in args])


class TestConfigParsing:
    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
    def test_shipped_configs_parse(self, name):
        cfg = load_config(CONFIGS / name)
        assert cfg.model.n_joints == 4
        assert cfg.bent.n_steps == 200

    def test_defaults(self):
        cfg = parse_config({})
        assert cfg.filter.n_particles == 2048
        assert cfg.filter.kappa_w == 15.0
        assert cfg.bent.k == 0.033
        assert cfg.seed == 0

    def test_line_diagnostics(self, tmp_path):
        bad = copy.deepcopy(SMALL)
        bad["filter"]["kappa_w"] = -2
        path = write_config(tmp_path, bad)
        with pytest.raises(ConfigError) as info:
            load_config(path)
        line = path.read_text().splitlines().index('    "kappa_w": -2') + 1
        assert info.value.line == line
        assert str(info.value).startswith(f"line {line}:")

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda d: d["sensors"]["markers"][0].update(frame="elbow"),
            lambda d: d["filter"]["position_frames"].update(elbow=0.01),
            lambda d: d["bent_body"].update(trajectory=[{"angles": [0, 0], "hold": 3}]),
            lambda d: d["bent_body"].update(k=-1),
            lambda d: d.update(sweep={"parameter": "gamma", "values": [1]}),
            lambda d: d.update(sweep={"parameter": "N", "values": []}),
            lambda d: d.update(robot="missing_robot.json"),
            lambda d: d.update(seed="abc"),
            lambda d: d["sensors"]["imus"][0].update(hidden=[[1, 2, 3]]),
        ],
    )
    def test_invalid(self, tmp_path, mutate):
        bad = copy.deepcopy(SMALL)
        mutate(bad)
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, bad))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n  "seed": 1,\n  oops\n}')
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert info.value.line == 3

    def test_robot_file(self, tmp_path):
        (tmp_path / "arm.json").write_text(json.dumps(default_robot().to_dict()))
        data = dict(SMALL, robot="arm.json")
        cfg = load_config(write_config(tmp_path, data))
        assert cfg.model.to_dict() == default_robot().to_dict()

    @pytest.mark.parametrize(
        "name, value, check",
        [
            ("N", 64, lambda f: f.n_particles == 64),
            ("kappa_w", 100, lambda f: f.kappa_w == 100.0),
            ("kappa_0", 5, lambda f: f.kappa_0 == 5.0),
            ("kappa_v", 2, lambda f: f.kappa_v == 2.0),
            ("lambda_w", [-100, -100, 0, 0], lambda f: f.orientation_frames["link2"].lam[0] == -100),
            ("sigma_ee", [0.04, 0.04, 0.04], lambda f: f.position_frames["grasp_point"].sigma[0, 0] == 0.04),
        ],
    )
    def test_with_parameter(self, name, value, check):
        cfg = parse_config(copy.deepcopy(SMALL))
        assert check(with_parameter(cfg, name, value).filter)
        assert cfg.filter.n_particles == 128


class TestRun:
    def test_outputs_and_schema(self, tmp_path):
        path = write_config(tmp_path, SMALL)
        assert run_cli("run", "--config", path, "--out", tmp_path / "a", "--quiet") == 0
        text = (tmp_path / "a" / "steps.csv").read_bytes()
        assert b"\r\n" in text
        rows = list(csv.reader(text.decode().splitlines()))
        model = default_robot()
        assert rows[0] == csv_header(model, watched_frames(model))
        assert len(rows) == 25
        assert all(len(r) == len(rows[0]) for r in rows)
        summary = json.loads((tmp_path / "a" / "summary.json").read_text())
        assert set(summary["rmse"]) == set(model.joint_names)
        assert summary["config"]["seed"] == 3
        assert summary["runtime_s"] > 0

    def test_header_independent_of_sensors(self, tmp_path):
        enc = copy.deepcopy(SMALL)
        enc["sensors"] = {"encoders": True}
        enc["filter"] = {"n_particles": 64}
        run_cli("run", "--config", write_config(tmp_path, SMALL, "a.json"), "--out", tmp_path / "a", "--quiet")
        run_cli("run", "--config", write_config(tmp_path, enc, "b.json"), "--out", tmp_path / "b", "--quiet")
        head = [(tmp_path / d / "steps.csv").read_text().splitlines()[0] for d in "ab"]
        assert head[0] == head[1]

    def test_byte_identical_and_seed_override(self, tmp_path):
        path = write_config(tmp_path, SMALL)
        par = copy.deepcopy(SMALL)
        par["filter"]["workers"] = 3
        ppath = write_config(tmp_path, par, "par.json")
        for out, cfg in (("a", path), ("b", path), ("c", ppath)):
            run_cli("run", "--config", cfg, "--out", tmp_path / out, "--quiet")
        run_cli("run", "--config", path, "--out", tmp_path / "d", "--seed", 4, "--quiet")
        csvs = {d: (tmp_path / d / "steps.csv").read_bytes() for d in "abcd"}
        assert csvs["a"] == csvs["b"] == csvs["c"]
        assert csvs["a"] != csvs["d"]

    def test_encoder_only_noise_free_tracks_reference(self, tmp_path):
        data = {
            "seed": 0,
            "bent_body": {"k": 0.033, "trajectory": [{"angles": [0.2, 0.9, -0.4, 0.3], "hold": 40}]},
            "tail": 10,
            "sensors": {"encoders": True},
            "filter": {"n_particles": 1024, "kappa_w": 400.0, "kappa_v": 200.0},
        }
        run_cli("run", "--config", write_config(tmp_path, data), "--out", tmp_path / "r", "--quiet")
        rows = list(csv.DictReader((tmp_path / "r" / "steps.csv").read_text().splitlines()))
        for j in default_robot().joint_names:
            est = np.array([float(r[f"{j}_est"]) for r in rows[-10:]])
            ref = float(rows[-1][f"{j}_ref"])
            assert np.abs(est - ref).max() < 0.03

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = copy.deepcopy(SMALL)
        bad["filter"]["n_particles"] = 0
        assert run_cli("run", "--config", write_config(tmp_path, bad), "--quiet") == 2
        assert "config error" in capsys.readouterr().err
        assert run_cli("run", "--config", tmp_path / "nope.json", "--quiet") == 2

    def test_degeneration_exit_code(self, tmp_path):
        bad = copy.deepcopy(SMALL)
        bad["filter"]["position_frames"] = {"grasp_point": [1e-12, 1e-12, 1e-12]}
        assert run_cli("run", "--config", write_config(tmp_path, bad), "--out", tmp_path / "o", "--quiet") == 3
        assert json.loads((tmp_path / "o" / "summary.json").read_text())["degenerate"]

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "effjoint", "deflection", "--gamma", "1", "--area", "1", "--length", "1",
             "--youngs", "1", "--inertia", "1", "--scale", "2"],
            capture_output=True, text=True, check=True,
        )
        out = json.loads(proc.stdout)
        assert out["deflection_m"] == 0.125
        assert out["scaled_deflection_m"] == 0.5


class TestSweepAndFusion:
    def test_sweep(self, tmp_path):
        data = dict(copy.deepcopy(SMALL), sweep={"parameter": "N", "values": [32, 64]})
        assert run_cli("sweep", "--config", write_config(tmp_path, data), "--out", tmp_path / "s", "--quiet") == 0
        report = json.loads((tmp_path / "s" / "sweep.json").read_text())
        assert [r["value"] for r in report["rows"]] == [32, 64]
        assert {"rmse", "mean_ci_width", "min_ess", "degenerate"} <= set(report["rows"][0])
        assert (tmp_path / "s" / "N=32" / "steps.csv").exists()
        lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_parallel_sweep_matches_serial(self, tmp_path):
        data = dict(copy.deepcopy(SMALL), sweep={"parameter": "kappa_w", "values": [1.0, 100.0]})
        path = write_config(tmp_path, data)
        run_cli("sweep", "--config", path, "--out", tmp_path / "serial", "--quiet")
        run_cli("sweep", "--config", path, "--out", tmp_path / "par", "--jobs", 2, "--quiet")
        for sub in ("kappa_w=1", "kappa_w=100"):
            assert (tmp_path / "serial" / sub / "steps.csv").read_bytes() == (tmp_path / "par" / sub / "steps.csv").read_bytes()

    def test_sweep_without_block(self, tmp_path):
        assert run_cli("sweep", "--config", write_config(tmp_path, SMALL), "--quiet") == 2

    def test_direct_fusion(self, tmp_path):
        path = write_config(tmp_path, SMALL)
        assert run_cli("direct-fusion", "--config", path, "--out", tmp_path / "d", "--quiet") == 0
        summary = json.loads((tmp_path / "d" / "direct_fusion.json").read_text())
        assert summary["joints"] == ["link2_pitch_joint", "link3_pitch_joint"]
        assert len(summary["yxz_rmse"]) == 2
        header = (tmp_path / "d" / "direct_fusion.csv").read_text().splitlines()[0]
        assert "gimbal_lock_xyz" in header

    def test_deflection_rejects_bad_input(self, capsys):
        assert run_cli("deflection", "--gamma", "0", "--area", "1", "--length", "1", "--youngs", "1", "--inertia", "1") == 2
