import csv
import json
import math
import os
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from probe_vio.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from probe_vio.scenarios import loop, moving_object

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def validate(path, schema):
    jsonschema.validate(json.loads(Path(path).read_text()),
                        json.loads((SCHEMAS / f"{schema}.schema.json").read_text()))


def write_spec(path, spec):
    path.write_text(json.dumps(spec.to_dict()))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A simulated dataset, a trained model (gamma fixed at 2) and one comparison run."""
    root = tmp_path_factory.mktemp("cli")
    spec = write_spec(root / "spec.json", moving_object(seed=1, frames=12))
    assert main(["simulate", str(spec), "--out", str(root / "sim")]) == EXIT_OK
    assert main(["train", "--dataset", str(root / "sim"), "--out", str(root / "train"), "--iterations", "2",
                 "--gamma-candidates", "2", "--k-candidates", "1,5,10"]) == EXIT_OK
    assert main(["compare", "--dataset", str(root / "sim"), "--model", str(root / "train" / "model.prb"),
                 "--out", str(root / "cmp")]) == EXIT_OK
    return root


def read_xyz(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {round(float(r["t"]), 9): [float(r[c]) for c in "xyz"] for r in rows}


class TestOutputs:
    def test_simulation_files(self, workspace):
        sim = workspace / "sim"
        for name in ("calib.json", "imu.csv", "tracks.csv", "groundtruth.csv", "predictors.csv", "labels.csv"):
            assert (sim / name).exists()
        validate(sim / "spec.json", "simulation_spec")
        validate(workspace / "spec.json", "simulation_spec")

    def test_training_outputs(self, workspace):
        validate(workspace / "train" / "training_report.json", "training_report")
        report = json.loads((workspace / "train" / "training_report.json").read_text())
        assert report["gamma"] == 2.0 and report["k"] in (1, 5, 10)
        header = (workspace / "train" / "training_set.csv").read_text().splitlines()[0]
        assert header.endswith(",alpha")

    def test_comparison_outputs(self, workspace):
        validate(workspace / "cmp" / "comparison.json", "comparison")
        for mode in ("nominal", "aggressive", "probe"):
            validate(workspace / "cmp" / mode / "metrics.json", "metrics")
            validate(workspace / "cmp" / mode / "diagnostics.json", "diagnostics")
            assert (workspace / "cmp" / mode / "errors.csv").exists()

    def test_table_columns(self, workspace):
        table = json.loads((workspace / "cmp" / "comparison.json").read_text())
        assert table["columns"] == ["trial", "path_length", "nominal_armse", "nominal_final_error",
                                    "aggressive_armse", "aggressive_final_error", "probe_armse",
                                    "probe_final_error"]

    def test_text_matches_json(self, workspace):
        table = json.loads((workspace / "cmp" / "comparison.json").read_text())
        lines = (workspace / "cmp" / "comparison.txt").read_text().splitlines()
        assert lines[0].split() == table["columns"]
        cells = lines[2].split()
        row = table["rows"][0]
        for col, cell in zip(table["columns"][1:], cells[1:]):
            assert float(cell) == row[col]

    def test_armse_recomputed(self, workspace):
        truth = read_xyz(workspace / "sim" / "groundtruth.csv")
        for mode in ("nominal", "aggressive", "probe"):
            est = read_xyz(workspace / "cmp" / mode / "trajectory.csv")
            sq = [sum((a - b) ** 2 for a, b in zip(est[t], truth[t])) for t in truth]
            armse = math.sqrt(sum(sq) / len(sq))
            metrics = json.loads((workspace / "cmp" / mode / "metrics.json").read_text())
            assert metrics["armse"] == pytest.approx(armse, rel=1e-9)
            last = max(truth)
            assert metrics["final_error"] == pytest.approx(math.dist(est[last], truth[last]), rel=1e-9)

    def test_inspect_text(self, workspace, capsys):
        assert main(["inspect", "--model", str(workspace / "train" / "model.prb")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "neighbour mean 1.0 x alpha_bar -> beta 1.0" in out
        assert "neighbour mean 2.0 x alpha_bar -> beta 4.0" in out
        assert "gamma: 2.0" in out

    def test_inspect_json(self, workspace, capsys, tmp_path):
        assert main(["inspect", "--model", str(workspace / "train" / "model.prb"), "--json"]) == EXIT_OK
        (tmp_path / "inspect.json").write_text(capsys.readouterr().out)
        validate(tmp_path / "inspect.json", "inspect")


class TestDeterminism:
    def test_simulate(self, workspace, tmp_path):
        assert main(["simulate", str(workspace / "spec.json"), "--out", str(tmp_path / "again")]) == EXIT_OK
        for f in (workspace / "sim").iterdir():
            assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes(), f.name

    def test_train(self, workspace, tmp_path):
        assert main(["train", "--dataset", str(workspace / "sim"), "--out", str(tmp_path), "--iterations", "2",
                     "--gamma-candidates", "2", "--k-candidates", "1,5,10"]) == EXIT_OK
        for name in ("model.prb", "training_report.json", "training_set.csv"):
            assert (tmp_path / name).read_bytes() == (workspace / "train" / name).read_bytes()

    def test_compare(self, workspace, tmp_path):
        assert main(["compare", "--dataset", str(workspace / "sim"), "--model",
                     str(workspace / "train" / "model.prb"), "--out", str(tmp_path)]) == EXIT_OK
        for path in sorted((workspace / "cmp").rglob("*.json")):
            rel = path.relative_to(workspace / "cmp")
            assert (tmp_path / rel).read_bytes() == path.read_bytes(), str(rel)


class TestRun:
    def test_single_mode(self, workspace, tmp_path, capsys):
        assert main(["run", "--dataset", str(workspace / "sim"), "--mode", "nominal",
                     "--out", str(tmp_path)]) == EXIT_OK
        assert "ARMSE" in capsys.readouterr().out
        assert (tmp_path / "trajectory.csv").read_text().splitlines()[0] == "t,x,y,z"
        ours = json.loads((tmp_path / "metrics.json").read_text())
        theirs = json.loads((workspace / "cmp" / "nominal" / "metrics.json").read_text())
        assert ours == theirs

    def test_config_override(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"pipeline": {"nominal_confidence": 0.9}, "solver": {"max_iterations": 20}}))
        assert main(["run", "--dataset", str(workspace / "sim"), "--mode", "nominal", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == EXIT_OK

    def test_log_level_env(self, workspace, tmp_path):
        env = dict(os.environ, PROBE_LOG="INFO")
        proc = subprocess.run([sys.executable, "-m", "probe_vio.cli", "train", "--dataset", str(workspace / "sim"),
                               "--iterations", "1", "--gamma-candidates", "1", "--out", str(tmp_path)],
                              env=env, capture_output=True, text=True)
        assert proc.returncode == EXIT_OK
        assert "INFO probe_vio.training: training iteration 0" in proc.stderr


class TestExitCodes:
    def run(self, *argv):
        return main([str(a) for a in argv])

    def test_no_command(self, capsys):
        assert self.run() == EXIT_USAGE

    def test_unknown_mode(self, workspace, tmp_path):
        assert self.run("run", "--dataset", workspace / "sim", "--mode", "fast", "--out", tmp_path) == EXIT_USAGE

    def test_probe_without_model(self, workspace, tmp_path):
        assert self.run("run", "--dataset", workspace / "sim", "--mode", "probe", "--out", tmp_path) == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        assert self.run("run", "--dataset", tmp_path / "nope", "--mode", "nominal", "--out", tmp_path) == EXIT_USAGE

    def test_missing_model_file(self, workspace, tmp_path):
        assert self.run("compare", "--dataset", workspace / "sim", "--model", tmp_path / "none.prb",
                        "--out", tmp_path) == EXIT_USAGE

    def test_corrupt_model(self, workspace, tmp_path, capsys):
        blob = (workspace / "train" / "model.prb").read_bytes()
        (tmp_path / "bad.prb").write_bytes(blob[: len(blob) // 2])
        assert self.run("inspect", "--model", tmp_path / "bad.prb") == EXIT_RUNTIME
        assert "error" in capsys.readouterr().err

    def test_broken_dataset(self, workspace, tmp_path):
        broken = tmp_path / "ds"
        broken.mkdir()
        (broken / "calib.json").write_text((workspace / "sim" / "calib.json").read_text())
        assert self.run("run", "--dataset", broken, "--mode", "nominal", "--out", tmp_path / "o") == EXIT_RUNTIME

    def test_bad_config(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"pipeline": {"warp_speed": 1}}))
        assert self.run("run", "--dataset", workspace / "sim", "--mode", "nominal", "--config", cfg,
                        "--out", tmp_path) == EXIT_USAGE
        assert "warp_speed" in capsys.readouterr().err

    def test_bad_iterations(self, workspace, tmp_path):
        assert self.run("train", "--dataset", workspace / "sim", "--out", tmp_path, "--iterations", "0") == EXIT_USAGE

    def test_spec_missing_field(self, tmp_path, capsys):
        d = moving_object(seed=1, frames=5).to_dict()
        del d["world"]["clusters"][0]["count"]
        (tmp_path / "spec.json").write_text(json.dumps(d))
        assert self.run("simulate", tmp_path / "spec.json", "--out", tmp_path / "o") == EXIT_USAGE
        assert "count" in capsys.readouterr().err

    def test_spec_not_json(self, tmp_path):
        (tmp_path / "spec.json").write_text("[1, 2")
        assert self.run("simulate", tmp_path / "spec.json", "--out", tmp_path / "o") == EXIT_USAGE

    def test_open_path_without_groundtruth(self, workspace, tmp_path):
        d = moving_object(seed=1, frames=12).to_dict()
        d["groundtruth"] = "none"
        (tmp_path / "spec.json").write_text(json.dumps(d))
        assert self.run("simulate", tmp_path / "spec.json", "--out", tmp_path / "sim") == EXIT_OK
        assert self.run("train", "--dataset", tmp_path / "sim", "--out", tmp_path / "t") == EXIT_RUNTIME


def test_loop_dataset_trains_without_groundtruth(tmp_path):
    spec = write_spec(tmp_path / "loop.json", loop(seed=3, frames=60))
    assert main(["simulate", str(spec), "--out", str(tmp_path / "sim")]) == EXIT_OK
    assert not (tmp_path / "sim" / "groundtruth.csv").exists()
    assert main(["train", "--dataset", str(tmp_path / "sim"), "--out", str(tmp_path / "t"), "--iterations", "2",
                 "--gamma-candidates", "0,2"]) == EXIT_OK
    report = json.loads((tmp_path / "t" / "training_report.json").read_text())
    assert report["mode"] == "loop_closure"
    assert main(["compare", "--dataset", str(tmp_path / "sim"), "--model", str(tmp_path / "t" / "model.prb"),
                 "--out", str(tmp_path / "c")]) == EXIT_OK
    metrics = json.loads((tmp_path / "c" / "probe" / "metrics.json").read_text())
    assert metrics["armse"] is None and metrics["loop_closure_error"] >= 0
    validate(tmp_path / "c" / "probe" / "metrics.json", "metrics")
    validate(tmp_path / "c" / "comparison.json", "comparison")
