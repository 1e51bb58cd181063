"""
命令列介面整合測試
"""

import json

import numpy as np
import pandas as pd
import pytest

from src.cli import main
from src.core.constants import SCHEMA_VERSION, ExitCodes
from src.core.data_model import DescriptorBlock
from src.core.em_engine import FittedBlock, MixtureModel
from src.core.emission_models import BernoulliParams, CovariateParams
from src.core.exceptions import AllInitsFailedError
from src.utils.report import save_model

pytestmark = pytest.mark.integration

FIT_ARGS = ["--measurement", "binary", "--n-components", "2", "--n-init", "2", "--seed", "0"]


@pytest.fixture
def toy(fixtures_dir):
    return str(fixtures_dir / "toy_binary.csv"), str(fixtures_dir / "toy_outcome.csv")


@pytest.fixture
def fitted_model(tmp_path, toy):
    out = tmp_path / "model.json"
    code = main(
        ["fit", "--data-mm", toy[0], *FIT_ARGS, "--out", str(out), "--report", str(tmp_path / "r.txt")]
    )
    assert code == ExitCodes.OK
    return out


class TestArguments:
    def test_help(self):
        with pytest.raises(SystemExit) as exc_info:
            main(["--help"])
        assert exc_info.value.code == 0

    def test_correction_requires_three_steps(self, tmp_path, toy):
        with pytest.raises(SystemExit) as exc_info:
            main(
                [
                    "fit", "--data-mm", toy[0], *FIT_ARGS,
                    "--n-steps", "2", "--correction", "bch", "--out", str(tmp_path / "m.json"),
                ]
            )
        assert exc_info.value.code == ExitCodes.VALIDATION_ERROR

    def test_missing_required_argument(self, toy):
        with pytest.raises(SystemExit) as exc_info:
            main(["fit", "--data-mm", toy[0], "--measurement", "binary"])
        assert exc_info.value.code == ExitCodes.VALIDATION_ERROR


class TestFit:
    def test_writes_model_and_report(self, tmp_path, fitted_model):
        raw = json.loads(fitted_model.read_text(encoding="utf-8"))
        assert raw["schema_version"] == SCHEMA_VERSION
        assert raw["n_components"] == 2
        assert raw["fit_meta"]["estimator"] == "1-step"
        assert "擬合統計" in (tmp_path / "r.txt").read_text(encoding="utf-8")

    def test_report_to_stdout(self, tmp_path, toy, capsys):
        code = main(
            ["fit", "--data-mm", toy[0], *FIT_ARGS, "--out", str(tmp_path / "m.json"), "--verbosity", "0"]
        )
        assert code == ExitCodes.OK
        assert "AIC" in capsys.readouterr().out

    def test_empty_csv(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("", encoding="utf-8")
        code = main(["fit", "--data-mm", str(empty), *FIT_ARGS, "--out", str(tmp_path / "m.json")])
        assert code == ExitCodes.VALIDATION_ERROR

    def test_structural_data_requires_descriptor(self, tmp_path, toy):
        code = main(
            ["fit", "--data-mm", toy[0], "--data-sm", toy[1], *FIT_ARGS, "--out", str(tmp_path / "m.json")]
        )
        assert code == ExitCodes.VALIDATION_ERROR

    def test_three_step_exports(self, tmp_path, toy):
        weights_out = tmp_path / "w.csv"
        confusion_out = tmp_path / "d.csv"
        code = main(
            [
                "fit", "--data-mm", toy[0], "--data-sm", toy[1], "--structural", "gaussian_unit",
                *FIT_ARGS, "--n-steps", "3", "--correction", "ml",
                "--weights-out", str(weights_out), "--confusion-out", str(confusion_out),
                "--out", str(tmp_path / "m.json"), "--report", str(tmp_path / "r.txt"),
            ]
        )
        assert code == ExitCodes.OK
        weights = pd.read_csv(weights_out)
        assert list(weights.columns) == ["w0", "w1"]
        assert len(weights) == 60
        np.testing.assert_allclose(pd.read_csv(confusion_out).sum(axis=1), 1.0)

    def test_numerical_failure_exit_code(self, tmp_path, toy, mocker):
        mocker.patch(
            "src.cli.fit_stepwise",
            side_effect=AllInitsFailedError("所有初始化皆失敗", failures=["x"]),
        )
        code = main(["fit", "--data-mm", toy[0], *FIT_ARGS, "--out", str(tmp_path / "m.json")])
        assert code == ExitCodes.NUMERICAL_FAILURE


class TestInference:
    def test_predict(self, tmp_path, toy, fitted_model):
        out = tmp_path / "pred.csv"
        code = main(
            ["predict", "--model", str(fitted_model), "--data-mm", toy[0], "--out", str(out), "--proba"]
        )
        assert code == ExitCodes.OK
        frame = pd.read_csv(out)
        assert list(frame.columns) == ["class", "p0", "p1"]
        assert len(frame) == 60
        np.testing.assert_allclose(frame[["p0", "p1"]].sum(axis=1), 1.0)

    def test_score(self, tmp_path, toy, fitted_model, capsys):
        stats_out = tmp_path / "stats.json"
        code = main(
            ["score", "--model", str(fitted_model), "--data-mm", toy[0], "--stats-out", str(stats_out)]
        )
        assert code == ExitCodes.OK
        value = float(capsys.readouterr().out.strip())
        stats = json.loads(stats_out.read_text(encoding="utf-8"))
        assert value == pytest.approx(stats["avg_log_likelihood"])

    def test_bootstrap(self, tmp_path, toy, fitted_model):
        out = tmp_path / "boot.csv"
        code = main(
            [
                "bootstrap", "--model", str(fitted_model), "--data-mm", toy[0],
                "--reps", "3", "--n-init", "1", "--seed", "2", "--out", str(out),
            ]
        )
        assert code == ExitCodes.OK
        frame = pd.read_csv(out)
        assert "rep" in frame.columns
        assert set(frame["rep"]) <= {0, 1, 2}

    def test_sample(self, tmp_path, fitted_model):
        out_mm = tmp_path / "s_mm.csv"
        out_classes = tmp_path / "s_classes.csv"
        code = main(
            [
                "sample", "--model", str(fitted_model), "--n", "25", "--seed", "1",
                "--out-mm", str(out_mm), "--out-classes", str(out_classes),
            ]
        )
        assert code == ExitCodes.OK
        assert pd.read_csv(out_mm).shape == (25, 4)
        assert pd.read_csv(out_classes)["class"].isin([0, 1]).all()

    def test_sample_covariate_model(self, tmp_path):
        model = MixtureModel(
            2,
            [0.5, 0.5],
            measurement=(
                FittedBlock(
                    DescriptorBlock("items", "binary", (0, 1)),
                    BernoulliParams(pi=[[0.9, 0.8], [0.2, 0.1]]),
                ),
            ),
            structural=(
                FittedBlock(
                    DescriptorBlock("z", "covariate", (0, 0)),
                    CovariateParams(beta=[[0.0], [1.0]], b=[0.0, 0.0]),
                ),
            ),
        )
        path = save_model(model, tmp_path / "cov.json")
        code = main(["sample", "--model", str(path), "--n", "5", "--out-mm", str(tmp_path / "s.csv")])
        assert code == ExitCodes.VALIDATION_ERROR


class TestSimulation:
    def test_simulate_is_deterministic(self, tmp_path):
        for name in ("a", "b"):
            code = main(
                [
                    "simulate", "bakk-complete", "--n", "50", "--missing-ratio", "0.25",
                    "--seed", "4", "--out-dir", str(tmp_path / name),
                ]
            )
            assert code == ExitCodes.OK
        for suffix in ("mm", "sm", "classes"):
            first = (tmp_path / "a" / f"bakk_complete_{suffix}.csv").read_bytes()
            second = (tmp_path / "b" / f"bakk_complete_{suffix}.csv").read_bytes()
            assert first == second

    def test_invalid_design(self, tmp_path):
        code = main(["simulate", "mixed", "--n", "10", "--out-dir", str(tmp_path)])
        assert code == ExitCodes.VALIDATION_ERROR

    def test_small_study(self, tmp_path, capsys):
        out = tmp_path / "study.csv"
        code = main(
            [
                "study", "response", "--n", "200", "--sep", "0.9", "--reps", "1",
                "--estimators", "1-step", "3-naive", "--n-init", "1", "--jobs", "1",
                "--out", str(out),
            ]
        )
        assert code == ExitCodes.OK
        frame = pd.read_csv(out)
        assert list(frame.columns[:4]) == ["separation", "n", "1-step_bias", "3-naive_bias"]
        assert len(frame) == 1
        assert "1-step_bias" in capsys.readouterr().out


class TestValidate:
    def test_overlapping_descriptor(self, tmp_path, toy):
        descriptor = tmp_path / "mm.json"
        descriptor.write_text(
            json.dumps(
                {
                    "blocks": [
                        {"name": "a", "family": "binary", "columns": [0, 2]},
                        {"name": "b", "family": "binary", "columns": [2, 3]},
                    ]
                }
            ),
            encoding="utf-8",
        )
        code = main(["validate", "--descriptor", str(descriptor), "--data", toy[0]])
        assert code == ExitCodes.VALIDATION_ERROR

    def test_valid_descriptor_and_env(self, tmp_path, toy):
        descriptor = tmp_path / "mm.json"
        descriptor.write_text(
            json.dumps({"blocks": [{"name": "a", "family": "binary", "columns": [0, 3]}]}),
            encoding="utf-8",
        )
        env = tmp_path / ".env"
        env.write_text("STEPFIT_SEED=1\nLOG_LEVEL=INFO\n", encoding="utf-8")
        code = main(
            ["validate", "--descriptor", str(descriptor), "--data", toy[0], "--env", str(env)]
        )
        assert code == ExitCodes.OK

    def test_nothing_to_validate(self):
        assert main(["validate"]) == ExitCodes.VALIDATION_ERROR
