import json

import pytest

from probe_vio.config import load_overrides, parse_overrides
from probe_vio.errors import ConfigurationError
from probe_vio.frontend import PipelineConfig
from probe_vio.training import TrainingConfig


def test_defaults_without_file():
    pipeline, training = load_overrides(None)
    assert pipeline == PipelineConfig()
    assert training == TrainingConfig()


def test_every_section():
    pipeline, training = parse_overrides({
        "solver": {"max_iterations": 7},
        "predictor": {"patch_size": 11},
        "pipeline": {"prefilter_deg": 3.0, "sigma_px": 1.0},
        "training": {"iterations": 4, "policy": "uniform", "gamma_candidates": [0, 1], "k_candidates": [3]},
    })
    assert pipeline.solver.max_iterations == 7
    assert pipeline.predictor.patch_size == 11
    assert pipeline.prefilter_deg == 3.0 and pipeline.sigma_px == 1.0
    assert training.iterations == 4 and training.policy == "uniform"
    assert training.gamma_candidates == (0, 1) and training.k_candidates == (3,)


@pytest.mark.parametrize("raw, needle", [
    ([], "object"),
    ({"solvr": {}}, "solvr"),
    ({"solver": {"damping": 1}}, "solver.damping"),
    ({"pipeline": {"solver": {}}}, "pipeline.solver"),
    ({"training": {"seed": 3}}, "training.seed"),
    ({"training": {"iterations": 0}}, "training"),
    ({"pipeline": []}, "pipeline"),
])
def test_rejected(raw, needle):
    with pytest.raises(ConfigurationError, match=needle.replace(".", r"\.")):
        parse_overrides(raw)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_overrides(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigurationError, match="valid JSON"):
        load_overrides(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps({"pipeline": {"outlier_fraction": 0.4}}))
    assert load_overrides(tmp_path / "ok.json")[0].outlier_fraction == 0.4
