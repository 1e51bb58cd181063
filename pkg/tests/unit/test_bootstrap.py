"""
bootstrap 與類別對齊測試
"""

import numpy as np
import pandas as pd
import pytest

from src.core.data_model import Dataset, DescriptorBlock
from src.core.em_engine import EmConfig, FittedBlock, MixtureModel, fit_em
from src.core.emission_models import BernoulliParams
from src.core.exceptions import BootstrapFailureError, DegenerateClassError, ValidationError
from src.estimators.bootstrap import (
    SAMPLE_COLUMNS,
    align_classes,
    best_permutation,
    bootstrap_stats,
    uniform_resampler,
)
from src.estimators.inference import predict_proba
from src.estimators.stepwise import StepwiseConfig

pytestmark = pytest.mark.unit

CONFIG = StepwiseConfig(2, 1, em_config=EmConfig(n_init=2, seed=0))


@pytest.fixture(scope="module")
def main_model(two_class_binary, binary_descriptors):
    data, _ = two_class_binary
    return fit_em(data, None, binary_descriptors, 2, CONFIG.em_config)


class TestAlignment:
    def test_swapped_agreement(self):
        assert best_permutation(np.array([[1.0, 5.0], [6.0, 2.0]])) == (1, 0)

    def test_ties_keep_identity(self):
        assert best_permutation(np.ones((3, 3))) == (0, 1, 2)

    def test_large_k_uses_assignment_solver(self):
        perm = np.random.default_rng(0).permutation(9)
        agreement = np.eye(9)[perm]
        assert best_permutation(agreement) == tuple(int(p) for p in perm)

    def test_align_undoes_label_swap(self, main_model, two_class_binary):
        data, _ = two_class_binary
        swapped = main_model.permuted([1, 0])
        order = align_classes(predict_proba(main_model, data), swapped, data)
        assert order == (1, 0)
        np.testing.assert_array_equal(
            swapped.permuted(order).block("items").params.pi,
            main_model.block("items").params.pi,
        )

    def test_component_count_must_match(self, main_model, two_class_binary):
        data, _ = two_class_binary
        other = MixtureModel(
            3,
            [0.2, 0.3, 0.5],
            measurement=(
                FittedBlock(
                    DescriptorBlock("items", "binary", (0, 4)),
                    BernoulliParams(pi=np.full((3, 5), 0.5)),
                ),
            ),
        )
        with pytest.raises(ValidationError):
            align_classes(predict_proba(main_model, data), other, data)


class TestResampler:
    def test_indices_in_range(self):
        idx = uniform_resampler(np.random.default_rng(0), 50)
        assert idx.shape == (50,)
        assert idx.min() >= 0 and idx.max() < 50


class TestBootstrapStats:
    def test_samples_and_aggregates(self, main_model, two_class_binary, binary_descriptors):
        data, _ = two_class_binary
        result = bootstrap_stats(main_model, data, None, binary_descriptors, CONFIG, 4, seed=3)
        assert result.n_repetitions == 4
        assert result.n_failed == 0
        assert list(result.samples.columns) == SAMPLE_COLUMNS
        assert sorted(result.samples["rep"].unique()) == [0, 1, 2, 3]
        assert result.mm_mean.shape == (5, 2)
        assert result.cw_std.shape == (1, 2)
        np.testing.assert_allclose(
            result.mm_mean.to_numpy(), main_model.block("items").params.pi.T, atol=0.1
        )

    def test_parameter_samples(self, main_model, two_class_binary, binary_descriptors):
        data, _ = two_class_binary
        result = bootstrap_stats(main_model, data, None, binary_descriptors, CONFIG, 3, seed=3)
        assert result.parameter_samples("items.pi", 0).shape == (3, 2)
        with pytest.raises(ValidationError):
            result.parameter_samples("nothing.here")

    def test_reproducible_and_independent_of_jobs(
        self, main_model, two_class_binary, binary_descriptors
    ):
        data, _ = two_class_binary
        serial = bootstrap_stats(main_model, data, None, binary_descriptors, CONFIG, 3, seed=8)
        parallel = bootstrap_stats(
            main_model, data, None, binary_descriptors, CONFIG, 3, seed=8, n_jobs=3
        )
        pd.testing.assert_frame_equal(serial.samples, parallel.samples)

    def test_too_few_repetitions(self, main_model, two_class_binary, binary_descriptors):
        data, _ = two_class_binary
        with pytest.raises(ValidationError):
            bootstrap_stats(main_model, data, None, binary_descriptors, CONFIG, 1)

    def test_failure_ratio(self, mocker, main_model, two_class_binary, binary_descriptors):
        data, _ = two_class_binary
        mocker.patch(
            "src.estimators.bootstrap.run_stepwise",
            side_effect=DegenerateClassError("類別 1 的有效權重為零", class_index=1),
        )
        with pytest.raises(BootstrapFailureError) as exc_info:
            bootstrap_stats(main_model, data, None, binary_descriptors, CONFIG, 5)
        assert exc_info.value.details["failed"] == 5

    def test_csv_export(self, tmp_path, main_model, two_class_binary, binary_descriptors):
        data, _ = two_class_binary
        result = bootstrap_stats(main_model, data, None, binary_descriptors, CONFIG, 2, seed=1)
        frame = pd.read_csv(result.to_csv(tmp_path / "boot.csv"))
        assert list(frame.columns) == SAMPLE_COLUMNS
        assert len(frame) == len(result.samples)


def identity_resampler(rng, n):
    return np.arange(n)


def binary_sample(n_units, seed):
    rng = np.random.default_rng(seed)
    pi = np.array([[0.9] * 5, [0.1] * 5])
    classes = rng.choice(2, size=n_units, p=[0.5, 0.5])
    return Dataset.from_arrays((rng.random((n_units, 5)) < pi[classes]).astype(np.float64))


class TestBootstrapProperties:
    def test_permuted_main_model_permutes_aggregates(
        self, main_model, two_class_binary, binary_descriptors
    ):
        data, _ = two_class_binary
        plain = bootstrap_stats(main_model, data, None, binary_descriptors, CONFIG, 4, seed=2)
        swapped = bootstrap_stats(
            main_model.permuted([1, 0]), data, None, binary_descriptors, CONFIG, 4, seed=2
        )
        np.testing.assert_array_equal(
            swapped.mm_mean.to_numpy(), plain.mm_mean.to_numpy()[:, ::-1]
        )
        np.testing.assert_array_equal(
            swapped.cw_mean.to_numpy(), plain.cw_mean.to_numpy()[:, ::-1]
        )

    def test_identity_resampler_reproduces_main_fit(
        self, main_model, two_class_binary, binary_descriptors
    ):
        data, _ = two_class_binary
        result = bootstrap_stats(
            main_model, data, None, binary_descriptors, CONFIG, 4, seed=0,
            resampler=identity_resampler,
        )
        assert result.n_failed == 0
        np.testing.assert_allclose(
            result.mm_mean.to_numpy(), main_model.block("items").params.pi.T, atol=1e-4
        )
        np.testing.assert_allclose(result.cw_mean.to_numpy()[0], main_model.class_weights, atol=1e-4)
        assert result.mm_std.to_numpy().max() < 1e-4

    @pytest.mark.slow
    def test_standard_errors_shrink_with_root_n(self, binary_descriptors):
        spread = []
        for n_units in (500, 2000):
            data = binary_sample(n_units, seed=n_units)
            model = fit_em(data, None, binary_descriptors, 2, CONFIG.em_config)
            result = bootstrap_stats(model, data, None, binary_descriptors, CONFIG, 60, seed=1)
            spread.append(result.mm_std.to_numpy().mean())
        assert 1.6 <= spread[0] / spread[1] <= 2.4


class TestRepetitionFailures:
    def test_zero_weight_resample_counts_as_failed(
        self, main_model, two_class_binary, binary_descriptors
    ):
        data, _ = two_class_binary
        weighted = data.with_weights(np.r_[0.0, np.ones(data.n_units - 1)])
        calls = []

        def first_draw_bad(rng, n):
            calls.append(n)
            if len(calls) == 1:
                return np.zeros(n, dtype=np.int64)
            return uniform_resampler(rng, n)

        result = bootstrap_stats(
            main_model, weighted, None, binary_descriptors, CONFIG, 5, seed=4,
            resampler=first_draw_bad,
        )
        assert result.n_failed == 1
        assert result.n_repetitions == 4
        assert 0 not in set(result.samples["rep"])

    def test_singular_solve_counts_as_failed(
        self, mocker, main_model, two_class_binary, binary_descriptors
    ):
        data, _ = two_class_binary
        mocker.patch(
            "src.estimators.bootstrap.run_stepwise",
            side_effect=np.linalg.LinAlgError("Singular matrix"),
        )
        with pytest.raises(BootstrapFailureError) as exc_info:
            bootstrap_stats(main_model, data, None, binary_descriptors, CONFIG, 5)
        assert exc_info.value.details["failed"] == 5

    def test_all_zero_weight_resamples_fail_the_run(
        self, main_model, two_class_binary, binary_descriptors
    ):
        data, _ = two_class_binary
        weighted = data.with_weights(np.r_[0.0, np.ones(data.n_units - 1)])
        with pytest.raises(BootstrapFailureError):
            bootstrap_stats(
                main_model, weighted, None, binary_descriptors, CONFIG, 3,
                resampler=lambda rng, n: np.zeros(n, dtype=np.int64),
            )
