"""
StepwiseMixture 物件介面測試
"""

import numpy as np
import pandas as pd
import pytest

from src.core.exceptions import ContractError, UnsupportedOperationError
from src.estimators.stepwise_mixture import StepwiseMixture, as_dataset

pytestmark = pytest.mark.unit


@pytest.fixture(scope="module")
def estimator(response_data) -> StepwiseMixture:
    model = StepwiseMixture(
        n_components=3,
        measurement="binary",
        structural="gaussian_unit",
        n_steps=2,
        n_init=2,
        random_state=1,
    )
    return model.fit(response_data.data_mm.values, response_data.data_sm.values)


class TestAsDataset:
    def test_dataframe_keeps_names_and_missing(self):
        data = as_dataset(pd.DataFrame({"a": [1.0, np.nan], "b": [0.0, 1.0]}))
        assert data.column_names == ("a", "b")
        assert data.missing_mask.tolist() == [[True, True], [False, True]]

    def test_array(self):
        assert as_dataset(np.zeros((3, 2))).column_names == ("x0", "x1")


class TestStepwiseMixture:
    def test_unfitted(self):
        with pytest.raises(ContractError):
            StepwiseMixture().predict(np.zeros((2, 2)))

    def test_structural_data_requires_descriptor(self):
        with pytest.raises(ContractError):
            StepwiseMixture().fit(np.zeros((4, 2)), np.zeros((4, 1)))

    def test_descriptor_requires_structural_data(self):
        with pytest.raises(ContractError):
            StepwiseMixture(structural="gaussian_unit").fit(np.zeros((4, 2)))

    def test_fit_and_predict(self, estimator, response_data):
        Y, Z = response_data.data_mm.values, response_data.data_sm.values
        assert estimator.is_fitted
        assert estimator.model.fit_meta.estimator == "2-step"
        proba = estimator.predict_proba(Y, Z)
        assert proba.shape == (1000, 3)
        np.testing.assert_array_equal(estimator.predict(Y, Z), np.argmax(proba, axis=1))

    def test_measurement_only_prediction(self, estimator, response_data):
        labels = estimator.predict(response_data.data_mm.values)
        agreement = np.mean(labels == estimator.predict(
            response_data.data_mm.values, response_data.data_sm.values
        ))
        assert agreement > 0.8

    def test_fit_statistics(self, estimator, response_data):
        Y, Z = response_data.data_mm.values, response_data.data_sm.values
        stats = estimator.fit_stats(Y, Z)
        assert estimator.score(Y, Z) == pytest.approx(stats.avg_log_likelihood)
        assert estimator.aic(Y, Z) == pytest.approx(stats.aic)
        assert estimator.bic(Y, Z) > estimator.aic(Y, Z)

    def test_parameter_tables(self, estimator):
        assert estimator.get_mm_df().shape == (6, 3)
        assert estimator.get_sm_df().shape == (1, 3)
        assert estimator.get_cw_df().shape == (1, 3)

    def test_sample(self, estimator):
        sampled = estimator.sample(20, random_state=0)
        assert sampled.data_mm.n_units == 20
        assert sampled.data_sm.n_columns == 1

    def test_report(self, estimator, response_data):
        text = estimator.report(response_data.data_mm.values, response_data.data_sm.values)
        assert "結構模型" in text

    def test_categorical_encoding_is_reused(self):
        Y = np.array([[2.0], [5.0], [9.0], [2.0], [5.0], [9.0]] * 10)
        model = StepwiseMixture(n_components=2, measurement="categorical", n_init=1).fit(Y)
        assert model.encodings_["measurement"]
        assert model.predict(np.array([[9.0], [2.0]])).shape == (2,)

    def test_covariate_model_cannot_sample(self):
        rng = np.random.default_rng(0)
        classes = rng.choice(2, size=300)
        Y = (rng.random((300, 4)) < np.where(classes == 0, 0.85, 0.15)[:, None]).astype(float)
        Z = (classes + rng.normal(size=300))[:, None]
        model = StepwiseMixture(
            n_components=2, structural="covariate", n_steps=2, n_init=1
        ).fit(Y, Z)
        with pytest.raises(UnsupportedOperationError):
            model.sample(5)
