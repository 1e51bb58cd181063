"""
模擬設計與模擬研究測試
"""

import numpy as np
import pandas as pd
import pytest

from src.core.constants import SimulationDefaults
from src.core.data_model import DescriptorBlock, load_csv, validate_descriptor
from src.core.em_engine import FittedBlock, MixtureModel
from src.core.emission_models import CovariateParams, GaussianParams
from src.core.exceptions import DegenerateClassError, ValidationError
from src.estimators.simulation import (
    REPLICATION_COLUMNS,
    STUDY_COLUMNS,
    BakkDesign,
    StudyResult,
    _summarize,
    design_descriptors,
    generate,
    response_probabilities,
    run_study,
    tracked_parameter,
)

pytestmark = pytest.mark.unit


class TestDesign:
    def test_response_probabilities(self):
        pi = response_probabilities(0.8)
        assert pi.shape == (3, 6)
        np.testing.assert_allclose(pi[0], [0.8] * 6)
        np.testing.assert_allclose(pi[1], [0.8, 0.8, 0.8, 0.2, 0.2, 0.2])
        np.testing.assert_allclose(pi[2], [0.2] * 6)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": "mixed", "n": 10},
            {"kind": "response", "n": 0},
            {"kind": "response", "n": 10, "separation": 1.0},
            {"kind": "complete", "n": 10, "missing_ratio": 1.0},
        ],
    )
    def test_invalid_design(self, kwargs):
        with pytest.raises(ValidationError):
            BakkDesign(**kwargs)

    def test_missing_only_for_complete_design(self):
        with pytest.raises(ValidationError) as exc_info:
            BakkDesign("response", 10, missing_ratio=0.25)
        assert exc_info.value.details["validation_rule"] == "complete_only"


class TestGenerate:
    @pytest.mark.parametrize(
        "kind, columns",
        [
            ("response", ("outcome",)),
            ("covariate", ("covariate",)),
            ("complete", ("covariate", "outcome")),
        ],
    )
    def test_structural_columns(self, kind, columns):
        data = generate(BakkDesign(kind, 50, seed=1))
        assert data.data_sm.column_names == columns
        assert data.data_mm.column_names == tuple(f"y{d}" for d in range(1, 7))
        assert data.classes.shape == (50,)

    def test_same_seed_same_data(self):
        a = generate(BakkDesign("complete", 200, missing_ratio=0.25, seed=(4, 0, 1)))
        b = generate(BakkDesign("complete", 200, missing_ratio=0.25, seed=(4, 0, 1)))
        np.testing.assert_array_equal(a.data_mm.values, b.data_mm.values)
        np.testing.assert_array_equal(a.data_sm.values, b.data_sm.values)
        np.testing.assert_array_equal(a.classes, b.classes)

    def test_different_seed_different_data(self):
        a = generate(BakkDesign("response", 200, seed=(4, 0, 1)))
        b = generate(BakkDesign("response", 200, seed=(4, 0, 2)))
        assert not np.array_equal(a.data_sm.values, b.data_sm.values)

    def test_outcome_means(self):
        data = generate(BakkDesign("response", 6000, seed=2))
        outcome = data.data_sm.values[:, 0]
        for k, mean in enumerate(SimulationDefaults.OUTCOME_MEANS):
            assert outcome[data.classes == k].mean() == pytest.approx(mean, abs=0.08)

    def test_indicator_probabilities(self):
        design = BakkDesign("response", 6000, separation=0.7, seed=3)
        data = generate(design)
        for k in range(3):
            rows = data.classes == k
            np.testing.assert_allclose(
                data.data_mm.values[rows].mean(axis=0), design.pi[k], atol=0.04
            )

    def test_covariate_levels(self):
        data = generate(BakkDesign("covariate", 3000, seed=2))
        z = data.data_sm.values[:, 0]
        assert set(np.unique(z)) == {1.0, 2.0, 3.0, 4.0, 5.0}
        # β 使類別 2 隨 z 增加、類別 1 隨 z 減少
        assert np.mean(data.classes[z == 5.0] == 2) > np.mean(data.classes[z == 1.0] == 2)
        assert np.mean(data.classes[z == 1.0] == 1) > np.mean(data.classes[z == 5.0] == 1)

    def test_mcar_masking(self):
        data = generate(BakkDesign("complete", 4000, missing_ratio=0.5, seed=6))
        assert 1.0 - data.data_mm.missing_mask.mean() == pytest.approx(0.5, abs=0.03)
        assert data.data_sm.missing_mask[:, 0].all()
        assert 1.0 - data.data_sm.missing_mask[:, 1].mean() == pytest.approx(0.5, abs=0.05)

    def test_no_masking_without_missing_ratio(self):
        data = generate(BakkDesign("complete", 300, seed=6))
        assert data.data_mm.fully_observed
        assert data.data_sm.fully_observed

    def test_true_responsibilities(self):
        data = generate(BakkDesign("response", 30, seed=0))
        tau = data.true_responsibilities().tau
        np.testing.assert_array_equal(np.argmax(tau, axis=1), data.classes)
        np.testing.assert_array_equal(tau.sum(axis=1), 1.0)

    def test_write(self, tmp_path):
        data = generate(BakkDesign("complete", 40, missing_ratio=0.25, seed=0))
        mm_path, sm_path, classes_path = data.write(tmp_path, prefix="demo")
        assert mm_path.name == "demo_mm.csv"
        mm = load_csv(mm_path)
        np.testing.assert_array_equal(mm.missing_mask, data.data_mm.missing_mask)
        assert load_csv(sm_path).column_names == ("covariate", "outcome")
        assert pd.read_csv(classes_path)["class"].tolist() == data.classes.tolist()

    @pytest.mark.parametrize("kind", SimulationDefaults.KINDS)
    def test_descriptors_fit_generated_data(self, kind):
        data = generate(BakkDesign(kind, 20, seed=0))
        descriptors = design_descriptors(kind)
        validate_descriptor(descriptors.measurement, data.data_mm, role="measurement")
        validate_descriptor(descriptors.structural, data.data_sm)


class TestTrackedParameter:
    def test_outcome_mean(self):
        model = MixtureModel(
            3,
            [0.2, 0.3, 0.5],
            structural=(
                FittedBlock(
                    DescriptorBlock("outcome", "gaussian_unit", (0, 0)),
                    GaussianParams(mu=[[-1.0], [1.2], [0.0]]),
                ),
            ),
        )
        assert tracked_parameter("response").extract(model) == pytest.approx(1.2)

    def test_covariate_slope_is_rebased(self):
        model = MixtureModel(
            3,
            [0.2, 0.3, 0.5],
            structural=(
                FittedBlock(
                    DescriptorBlock("covariate", "covariate", (0, 0)),
                    CovariateParams(beta=[[1.0], [0.0], [2.5]], b=[0.0, 1.0, 2.0]),
                ),
            ),
        )
        assert tracked_parameter("covariate").extract(model) == pytest.approx(1.5)

    def test_missing_block(self):
        model = MixtureModel(1, [1.0])
        with pytest.raises(ValidationError):
            tracked_parameter("response").extract(model)


class TestSummary:
    def test_bias_rmse_and_failures(self):
        replications = pd.DataFrame(
            [
                (0.9, 100, 0, "1-step", 1.1),
                (0.9, 100, 1, "1-step", 0.9),
                (0.9, 100, 2, "1-step", np.nan),
            ],
            columns=REPLICATION_COLUMNS,
        )
        table = _summarize(replications, 1.0)
        assert list(table.columns) == STUDY_COLUMNS
        row = table.iloc[0]
        assert row["bias"] == pytest.approx(0.0, abs=1e-12)
        assert row["rmse"] == pytest.approx(0.1)
        assert (row["n_ok"], row["n_failed"]) == (2, 1)

    def test_wide_table(self):
        replications = pd.DataFrame(
            [
                (0.9, 100, 0, "1-step", 1.2),
                (0.9, 100, 0, "3-naive", 0.8),
                (0.7, 100, 0, "1-step", 1.0),
                (0.7, 100, 0, "3-naive", 0.5),
            ],
            columns=REPLICATION_COLUMNS,
        )
        result = StudyResult(
            "response", _summarize(replications, 1.0), replications, ("1-step", "3-naive")
        )
        wide = result.to_wide()
        assert list(wide.columns[:4]) == ["separation", "n", "1-step_bias", "3-naive_bias"]
        assert wide["separation"].tolist() == [0.9, 0.7]
        assert wide["3-naive_bias"].tolist() == pytest.approx([-0.2, -0.5])
        assert wide["1-step_n_ok"].tolist() == [1, 1]
        assert result.cell(0.7, 100, "3-naive")["rmse"] == pytest.approx(0.5)


class TestRunStudy:
    STUDY = dict(
        n_values=[300],
        levels=[0.9],
        n_replications=2,
        estimators=("1-step", "3-naive"),
        base_seed=5,
        n_init=1,
    )

    def test_table_shape(self):
        result = run_study("response", **self.STUDY)
        assert list(result.table.columns) == STUDY_COLUMNS
        assert len(result.table) == 2
        assert len(result.replications) == 4
        assert (result.table["n_ok"] + result.table["n_failed"] == 2).all()

    def test_reproducible_and_independent_of_jobs(self):
        serial = run_study("response", **self.STUDY)
        parallel = run_study("response", n_jobs=2, **self.STUDY)
        pd.testing.assert_frame_equal(serial.replications, parallel.replications)

    def test_failed_estimates_are_counted(self, mocker):
        mocker.patch(
            "src.estimators.simulation.run_stepwise",
            side_effect=DegenerateClassError("類別 0 的有效權重為零", class_index=0),
        )
        result = run_study("response", **self.STUDY)
        assert (result.table["n_failed"] == 2).all()
        assert result.table["bias"].isna().all()

    def test_unknown_estimator(self):
        with pytest.raises(ValidationError):
            run_study("response", [100], estimators=("4-step",))

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            run_study("mixed", [100])
