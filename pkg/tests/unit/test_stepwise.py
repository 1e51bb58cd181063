"""
逐步估計器測試
"""

import numpy as np
import pandas as pd
import pytest

from src.core.data_model import Dataset, ModelDescriptor, ModelDescriptors
from src.core.em_engine import EmConfig, fit_em
from src.core.exceptions import (
    ConfigurationError,
    ContractError,
    CorrectionInfeasibleError,
    ValidationError,
)
from src.estimators.inference import predict_proba
from src.estimators.simulation import design_descriptors
from src.estimators.stepwise import (
    ConfusionMatrix,
    ImputedWeights,
    StepwiseConfig,
    bch_adjust,
    compute_assignments,
    compute_confusion,
    export_confusion_csv,
    export_weights_csv,
    fit_one_step,
    fit_stepwise,
    fit_two_step,
    run_three_step,
    third_step,
)

pytestmark = pytest.mark.unit

EM = EmConfig(n_init=3, seed=0)
OUTCOME = ModelDescriptor.single("gaussian_unit", 1, name="outcome")


@pytest.fixture(scope="module")
def descriptors() -> ModelDescriptors:
    return design_descriptors("response")


@pytest.fixture(scope="module")
def step1(response_data, descriptors):
    config = StepwiseConfig(3, 1, em_config=EM)
    return fit_one_step(
        response_data.data_mm, None, ModelDescriptors(descriptors.measurement), config
    )


class TestStepwiseConfig:
    @pytest.mark.parametrize(
        "n_steps, correction, label",
        [(1, "none", "1-step"), (2, "none", "2-step"), (3, "none", "3-naive"), (3, "ml", "3-ml")],
    )
    def test_label(self, n_steps, correction, label):
        assert StepwiseConfig(3, n_steps, correction=correction).label == label

    def test_from_label(self):
        config = StepwiseConfig.from_label("3-bch", 3, assignment="soft")
        assert (config.n_steps, config.correction, config.assignment) == (3, "bch", "soft")
        assert StepwiseConfig.from_label("2-step", 2).n_steps == 2

    def test_unknown_label(self):
        with pytest.raises(ConfigurationError):
            StepwiseConfig.from_label("4-step", 2)

    def test_invalid_values(self):
        with pytest.raises(ConfigurationError):
            StepwiseConfig(2, n_steps=4)
        with pytest.raises(ConfigurationError):
            StepwiseConfig(2, n_steps=3, correction="exact")


class TestWeightsAndConfusion:
    def test_imputed_weights_rows_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            ImputedWeights(np.array([[0.5, 0.4]]))

    def test_uncorrected_weights_within_unit_interval(self):
        with pytest.raises(ValidationError):
            ImputedWeights(np.array([[1.5, -0.5]]))
        assert ImputedWeights(np.array([[1.5, -0.5]]), corrected=True).corrected

    def test_confusion_must_be_square(self):
        with pytest.raises(ValidationError):
            ConfusionMatrix(np.array([[0.5, 0.5]]))

    def test_bch_identity_leaves_weights(self):
        w = ImputedWeights(np.array([[0.2, 0.8], [1.0, 0.0]]))
        adjusted = bch_adjust(w, ConfusionMatrix(np.eye(2)))
        np.testing.assert_allclose(adjusted.w, w.w)
        assert adjusted.corrected

    def test_bch_inverts_confusion(self):
        D = ConfusionMatrix(np.array([[0.9, 0.1], [0.2, 0.8]]))
        w = ImputedWeights(np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.4]]))
        adjusted = bch_adjust(w, D)
        np.testing.assert_allclose(adjusted.w @ D.D, w.w)
        np.testing.assert_allclose(adjusted.w.sum(axis=1), 1.0)

    def test_bch_singular(self):
        w = ImputedWeights(np.array([[1.0, 0.0]]))
        with pytest.raises(CorrectionInfeasibleError) as exc_info:
            bch_adjust(w, ConfusionMatrix(np.full((2, 2), 0.5)))
        assert exc_info.value.details["suggestion"] == "correction=ml"

    def test_modal_assignments_are_one_hot(self, response_data, step1):
        w = compute_assignments(step1, response_data.data_mm, "modal")
        assert set(np.unique(w.w)) <= {0.0, 1.0}
        np.testing.assert_array_equal(w.w.sum(axis=1), 1.0)

    def test_soft_assignments_are_posteriors(self, response_data, step1):
        w = compute_assignments(step1, response_data.data_mm, "soft")
        expected = predict_proba(step1, response_data.data_mm).tau
        np.testing.assert_allclose(w.w, expected)

    def test_confusion_rows_and_diagonal(self, response_data, step1):
        w = compute_assignments(step1, response_data.data_mm, "modal")
        D = compute_confusion(step1, response_data.data_mm, w)
        np.testing.assert_allclose(D.D.sum(axis=1), 1.0)
        assert np.all(np.diag(D.D) > 0.6)
        assert np.isfinite(D.condition_number)

    def test_confusion_requires_uncorrected_weights(self, response_data, step1):
        w = compute_assignments(step1, response_data.data_mm, "modal")
        corrected = ImputedWeights(w.w, corrected=True)
        with pytest.raises(ContractError):
            compute_confusion(step1, response_data.data_mm, corrected)


class TestThirdStep:
    @pytest.fixture
    def outcome_data(self) -> Dataset:
        return Dataset.from_arrays([[1.0], [2.0], [3.0], [10.0]], column_names=["outcome"])

    def test_naive_uses_weighted_means(self, outcome_data):
        w = ImputedWeights(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
        model = third_step(outcome_data, w, None, "none", OUTCOME)
        np.testing.assert_allclose(model.block("outcome").params.mu[:, 0], [1.5, 6.5])
        assert model.fit_meta.estimator == "3-naive"

    def test_ml_requires_confusion(self, outcome_data):
        w = ImputedWeights(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
        with pytest.raises(ContractError):
            third_step(outcome_data, w, None, "ml", OUTCOME)

    def test_row_count_must_match(self, outcome_data):
        w = ImputedWeights(np.array([[1.0, 0.0]]))
        with pytest.raises(ValidationError):
            third_step(outcome_data, w, None, "none", OUTCOME)

    def test_ml_estimator(self, outcome_data):
        w = ImputedWeights(np.array([[1.0, 0.0], [0.9, 0.1], [0.1, 0.9], [0.0, 1.0]]))
        D = ConfusionMatrix(np.array([[0.9, 0.1], [0.1, 0.9]]))
        model = third_step(outcome_data, w, D, "ml", OUTCOME, EmConfig())
        assert model.fit_meta.estimator == "3-ml"
        mu = model.block("outcome").params.mu[:, 0]
        assert mu[0] < mu[1]


class TestEstimators:
    def test_two_step_keeps_step_one_measurement(self, response_data, descriptors, step1):
        config = StepwiseConfig(3, 2, em_config=EM)
        model = fit_two_step(response_data.data_mm, response_data.data_sm, descriptors, config)
        np.testing.assert_array_equal(
            model.block("indicators").params.pi, step1.block("indicators").params.pi
        )
        np.testing.assert_array_equal(model.class_weights, step1.class_weights)
        assert model.block("outcome") is not None
        assert model.fit_meta.estimator == "2-step"

    def test_two_step_with_separate_step_one_units(self, response_data, descriptors):
        half = response_data.data_mm.take(np.arange(500))
        config = StepwiseConfig(3, 2, em_config=EM)
        model = fit_two_step(
            response_data.data_mm, response_data.data_sm, descriptors, config, step1_data=half
        )
        reference = fit_one_step(half, None, ModelDescriptors(descriptors.measurement), config)
        np.testing.assert_array_equal(
            model.block("indicators").params.pi, reference.block("indicators").params.pi
        )

    @pytest.mark.parametrize("correction", ["none", "bch", "ml"])
    def test_three_step_keeps_step_one_measurement(
        self, response_data, descriptors, step1, correction
    ):
        config = StepwiseConfig(3, 3, "modal", correction, EM)
        result = run_three_step(response_data.data_mm, response_data.data_sm, descriptors, config)
        np.testing.assert_array_equal(
            result.model.block("indicators").params.pi, step1.block("indicators").params.pi
        )
        assert result.model.fit_meta.estimator == config.label
        assert (result.confusion is None) == (correction == "none")
        assert result.weights.corrected == (correction == "bch")

    def test_outcome_means_recovered(self, response_data, descriptors):
        for n_steps in (1, 2):
            model = fit_stepwise(
                response_data.data_mm,
                response_data.data_sm,
                descriptors,
                StepwiseConfig(3, n_steps, em_config=EM),
            )
            mu = np.sort(model.block("outcome").params.mu[:, 0])
            np.testing.assert_allclose(mu, [-1.0, 0.0, 1.0], atol=0.25)

    def test_one_step_without_structural_data(self, response_data, descriptors):
        model = fit_one_step(
            response_data.data_mm,
            response_data.data_sm,
            ModelDescriptors(descriptors.measurement),
            StepwiseConfig(3, 1, em_config=EM),
        )
        assert model.structural == ()


class TestConsistency:
    @pytest.mark.parametrize("correction", ["bch", "ml"])
    def test_identity_confusion_reproduces_naive(
        self, mocker, response_data, descriptors, correction
    ):
        naive = run_three_step(
            response_data.data_mm,
            response_data.data_sm,
            descriptors,
            StepwiseConfig(3, 3, "modal", "none", EM),
        )
        mocker.patch(
            "src.estimators.stepwise.compute_confusion", return_value=ConfusionMatrix(np.eye(3))
        )
        corrected = run_three_step(
            response_data.data_mm,
            response_data.data_sm,
            descriptors,
            StepwiseConfig(3, 3, "modal", correction, EM),
        )
        np.testing.assert_allclose(
            corrected.model.block("outcome").params.mu,
            naive.model.block("outcome").params.mu,
            atol=1e-12,
        )
        np.testing.assert_array_equal(corrected.model.class_weights, naive.model.class_weights)

    def test_frozen_refit_of_one_step_is_fixed_point(self, response_data, descriptors):
        one_step = fit_one_step(
            response_data.data_mm,
            response_data.data_sm,
            descriptors,
            StepwiseConfig(3, 1, em_config=EM),
        )
        refit = fit_em(
            response_data.data_mm,
            response_data.data_sm,
            descriptors,
            3,
            EmConfig(),
            init=one_step,
            freeze_measurement=True,
        )
        np.testing.assert_allclose(
            refit.block("outcome").params.mu, one_step.block("outcome").params.mu, atol=1e-3
        )
        np.testing.assert_allclose(refit.class_weights, one_step.class_weights, atol=1e-3)


class TestExports:
    def test_weights_csv(self, tmp_path):
        w = ImputedWeights(np.array([[0.25, 0.75], [1.0, 0.0]]))
        frame = pd.read_csv(export_weights_csv(w, tmp_path / "w.csv"))
        assert list(frame.columns) == ["w0", "w1"]
        np.testing.assert_array_equal(frame.to_numpy(), w.w)

    def test_confusion_csv(self, tmp_path):
        D = ConfusionMatrix(np.array([[0.9, 0.1], [0.3, 0.7]]))
        frame = pd.read_csv(export_confusion_csv(D, tmp_path / "d.csv"))
        assert list(frame.columns) == ["k0", "k1"]
        assert len(frame) == 2
