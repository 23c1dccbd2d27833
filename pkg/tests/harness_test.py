import json

import numpy as np
import pytest

from membrane.biharmonic import GAMMA
from membrane.errors import InsufficientDataError, ReplicateError
from membrane.field_sampler import Field, Provenance
from membrane.harness import (
    CONSTANTS,
    EstimatorResult,
    ExperimentConfig,
    ReplicateRunner,
    build_results_document,
    collect_replicates,
    empirical_cov,
    fit_exponential_tail,
    fit_gumbel,
    git_describe,
    run_replicates,
    write_results_document,
)
from membrane.lattice import Lattice4
from utils.rng import StreamFactory


def _center(h):
    return h.at(h.lattice.center)


@pytest.mark.harness
class TestExperimentConfig:
    """Validation of experiment parameters"""

    @pytest.mark.parametrize("changes", [
        {"field": "gff"},
        {"n_side": None},
        {"n_side": 1},
        {"reps": 1},
        {"seed": 2 ** 64},
        {"seed": -1},
        {"threads": 0},
        {"r": 0},
        {"r_values": (3, 0)},
        {"r_values": (2, 3)},
        {"n_side": 3},
        {"ell": 0},
        {"t": -0.5},
        {"c": 0.0},
        {"pairs": 0},
        {"norm": "l1"},
        {"solver": "cholesky"},
    ])
    def test_invalid_parameters(self, changes):
        params = {"experiment": "geometry", "field": "membrane", "n_side": 4, "reps": 10}
        params.update(changes)
        with pytest.raises(ValueError):
            ExperimentConfig(**params)

    @pytest.mark.parametrize("experiment", ["extremes", "dyson-check", "geometry", "intensity"])
    def test_centered_experiments_need_four_points_per_side(self, expect, experiment):
        with pytest.raises(ValueError, match="m_N"):
            ExperimentConfig(experiment=experiment, field="membrane", n_side=3, reps=2)
        expect.to_equal(ExperimentConfig(experiment="sample", field="membrane", n_side=3, reps=2).side, 3)

    def test_dyson_time_stays_below_the_log_variance(self, expect):
        bound = GAMMA * np.log(4)
        expect.to_equal(ExperimentConfig(experiment="dyson-check", n_side=4, reps=2, t=0.99 * bound).t, 0.99 * bound)
        for t in (bound, 5.0):
            with pytest.raises(ValueError, match="g ln N"):
                ExperimentConfig(experiment="dyson-check", n_side=4, reps=2, t=t)
        expect.to_equal(ExperimentConfig(experiment="extremes", n_side=4, reps=1, t=5.0).t, 5.0)

    def test_dyadic_fields_need_a_power_of_two(self):
        with pytest.raises(ValueError):
            ExperimentConfig(field="mbrw", n_side=6, reps=10)
        with pytest.raises(ValueError):
            ExperimentConfig(field="brw", n_side=8, depth=2, reps=10)

    def test_depth_and_side_are_linked(self, expect):
        expect.to_equal(ExperimentConfig(field="mbrw", depth=3, reps=10).side, 8)
        expect.to_equal(ExperimentConfig(field="brw", n_side=16, reps=10).depth, 4)
        expect.to_equal(ExperimentConfig(field="membrane", n_side=5, reps=10).depth, None)

    def test_single_replicate_only_for_persisted_fields(self, expect):
        expect.to_equal(ExperimentConfig(experiment="sample", n_side=4, reps=1).reps, 1)
        expect.to_equal(ExperimentConfig(experiment="extremes", n_side=4, reps=1).reps, 1)
        with pytest.raises(ValueError):
            ExperimentConfig(experiment="intensity", n_side=4, reps=1)

    def test_covariance_checks_need_many_replicates(self, expect):
        with pytest.raises(ValueError):
            ExperimentConfig(experiment="cov-check", field="mbrw", depth=2, reps=999)
        expect.to_equal(ExperimentConfig(experiment="cov-check", field="mbrw", depth=2, reps=1000).reps, 1000)

    def test_to_dict_is_json_ready(self, expect):
        data = ExperimentConfig(experiment="geometry", n_side=8, reps=10, r_values=[3, 4]).to_dict()
        expect.to_equal(data["r_values"], [3, 4])
        expect.to_equal(json.loads(json.dumps(data))["n_side"], 8)


@pytest.mark.harness
class TestReplicateRunner:
    """Replicates over independent streams, gathered in order"""

    def test_constant_statistic(self, expect, runner):
        config = ExperimentConfig(field="membrane", n_side=2, reps=8)
        result = runner.run(config, lambda h: 1.0)
        expect.to_equal(result.estimate, 1.0)
        expect.to_equal(result.std_error, 0.0)
        expect.to_equal(result.replicates, 8)
        expect.to_equal(result.wall_time, None)

    def test_thread_count_does_not_change_results(self, expect, operator_cache):
        config = ExperimentConfig(field="mbrw", depth=2, reps=12, seed=123)
        serial = ReplicateRunner(1, operator_cache).collect(config, lambda h: h.flat.copy())
        parallel = ReplicateRunner(4, operator_cache).collect(config, lambda h: h.flat.copy())
        expect.to_equal(np.array(serial), np.array(parallel))

    def test_membrane_replicates_are_reproducible(self, expect, operator_cache):
        config = ExperimentConfig(field="membrane", n_side=3, reps=4, seed=9)
        first = ReplicateRunner(2, operator_cache).collect(config, lambda h: h.flat.copy())
        second = ReplicateRunner(1, operator_cache).collect(config, lambda h: h.flat.copy())
        expect.to_equal(np.array(first), np.array(second))
        expect.to_be_truthy(not np.array_equal(first[0], first[1]))

    def test_sides_are_independent_families(self, expect, runner):
        config = ExperimentConfig(field="mbrw", depth=2, reps=3, seed=4)
        left = runner.collect(config, _center, side=0)
        right = runner.collect(config, _center, side=1)
        expect.to_be_truthy(left != right)

    def test_fields_carry_their_stream_id(self, expect, runner):
        config = ExperimentConfig(field="brw", depth=2, reps=3, seed=5)
        seeds = runner.collect(config, lambda h: h.seed)
        streams = StreamFactory(5)
        expect.to_equal(seeds, [streams.stream_id(i) for i in range(3)])

    @pytest.mark.parametrize("threads", [1, 4])
    def test_first_failing_replicate_is_reported(self, expect, operator_cache, threads):
        config = ExperimentConfig(field="mbrw", depth=2, reps=8, seed=6)
        streams = StreamFactory(6)
        failing = {streams.stream_id(3), streams.stream_id(5)}

        def statistic(h):
            if h.seed in failing:
                raise FloatingPointError("non-finite statistic")
            return 0.0

        with pytest.raises(ReplicateError) as error:
            ReplicateRunner(threads, operator_cache).collect(config, statistic)
        expect.to_equal(error.value.replicate, 3)
        expect.to_be_truthy(isinstance(error.value.__cause__, FloatingPointError))

    def test_center_mean_is_zero(self, expect, runner, reps):
        config = ExperimentConfig(field="mbrw", depth=2, reps=reps(2000), seed=7)
        result = runner.run(config, _center)
        expect.to_be_within_standard_errors(result.estimate, 0.0, result.std_error)

    def test_standard_error_shrinks_like_a_square_root(self, expect, runner, reps):
        small = runner.run(ExperimentConfig(field="mbrw", depth=2, reps=reps(400), seed=8), _center)
        large = runner.run(ExperimentConfig(field="mbrw", depth=2, reps=reps(1600), seed=8), _center)
        expect.to_be_close(small.std_error / large.std_error, 2.0, rel=0.15)

    def test_timing_is_opt_in(self, expect, runner):
        config = ExperimentConfig(field="mbrw", depth=2, reps=3, record_timing=True)
        result = runner.run(config, _center)
        expect.to_be_greater_than_or_equal(result.wall_time, 0.0)

    def test_function_interface(self, expect):
        config = ExperimentConfig(field="brw", depth=2, reps=5, seed=10)
        values = collect_replicates(config, _center)
        result = run_replicates(config, _center)
        expect.to_be_close(result.estimate, np.mean(values), rel=1e-12)
        expect.to_equal(result.seed, 10)

    def test_thread_count_must_be_positive(self):
        with pytest.raises(ValueError):
            ReplicateRunner(0)


@pytest.mark.harness
class TestEstimators:
    """Means, covariances, tail rates and Gumbel fits"""

    def test_mean_and_standard_error(self, expect):
        result = EstimatorResult.from_samples([1.0, 2.0, 3.0, 4.0], seed=3)
        expect.to_equal(result.estimate, 2.5)
        expect.to_be_close(result.std_error, np.std([1, 2, 3, 4], ddof=1) / 2, rel=1e-12)
        expect.to_equal(result.to_entry("mean")["name"], "mean")

    def test_mean_needs_two_samples(self):
        with pytest.raises(InsufficientDataError):
            EstimatorResult.from_samples([1.0], seed=0)

    def test_covariance_of_independent_columns(self, expect, stream):
        samples = stream(111).standard_normal((4000, 3))
        variance, cross = empirical_cov(samples, [(0, 0), (1, 2)])
        expect.to_be_within_standard_errors(variance.estimate, 1.0, variance.std_error)
        expect.to_be_within_standard_errors(cross.estimate, 0.0, cross.std_error)
        expect.to_equal(cross.replicates, 4000)

    def test_jackknife_matches_explicit_leave_one_out(self, expect, stream):
        samples = stream(112).standard_normal((40, 2)) @ np.array([[1.0, 0.6], [0.0, 0.8]])
        estimate = empirical_cov(samples, [(0, 1)], min_replicates=3)[0]
        n = len(samples)
        loo = np.array([np.cov(np.delete(samples, i, axis=0), rowvar=False)[0, 1] for i in range(n)])
        expected_se = np.sqrt((n - 1) / n * ((loo - loo.mean()) ** 2).sum())
        expect.to_be_close(estimate.estimate, np.cov(samples, rowvar=False)[0, 1], rel=1e-12)
        expect.to_be_close(estimate.std_error, expected_se, rel=1e-10)

    def test_fields_with_coordinate_pairs(self, expect, stream):
        lattice = Lattice4(2)
        fields = [Field(lattice, stream(113, i).standard_normal(81), Provenance.MBRW) for i in range(10)]
        estimate = empirical_cov(fields, [((0, 0, 0, 0), (1, 0, 0, 0))], min_replicates=3)[0]
        a = np.array([f.at((0, 0, 0, 0)) for f in fields])
        b = np.array([f.at((1, 0, 0, 0)) for f in fields])
        expect.to_be_close(estimate.estimate, np.cov(a, b)[0, 1], rel=1e-12)
        expect.to_equal((estimate.u, estimate.v), (0, 27))

    def test_covariance_needs_enough_replicates(self, stream):
        with pytest.raises(InsufficientDataError):
            empirical_cov(stream(114).standard_normal((999, 2)), [(0, 1)])
        with pytest.raises(InsufficientDataError):
            empirical_cov(stream(114).standard_normal((2, 2)), [(0, 1)], min_replicates=0)

    def test_coordinates_need_fields(self, stream):
        with pytest.raises(ValueError):
            empirical_cov(stream(115).standard_normal((10, 2)), [((0, 0, 0, 0), (1, 0, 0, 0))], min_replicates=3)

    @pytest.mark.parametrize("rate, threshold", [(np.pi, 0.0), (1.0, -1.5)])
    def test_exponential_tail_rate(self, expect, stream, rate, threshold):
        heights = threshold + stream(116).exponential(1.0 / rate, size=20000)
        fit = fit_exponential_tail(heights, threshold)
        expect.to_be_within_standard_errors(fit.rate, rate, fit.std_error)
        expect.to_equal(fit.threshold, threshold)

    def test_equal_excesses(self, expect):
        fit = fit_exponential_tail(np.full(60, 0.5), 0.0)
        expect.to_be_close(fit.rate, 2.0, rel=1e-12)
        expect.to_equal(fit.exceedances, 60)

    def test_exceedances_are_strict(self):
        heights = np.concatenate([np.zeros(100), np.ones(49)])
        with pytest.raises(InsufficientDataError):
            fit_exponential_tail(heights, 0.0)

    def test_gumbel_fit(self, expect, stream):
        samples = 1.0 + 2.0 * stream(117).gumbel(size=5000)
        fit = fit_gumbel(samples)
        expect.to_be_close(fit.location, 1.0, rel=0.0, abs_tol=0.15)
        expect.to_be_close(fit.scale, 2.0, rel=0.0, abs_tol=0.15)
        with pytest.raises(InsufficientDataError):
            fit_gumbel([0.3])


@pytest.mark.harness
class TestResultsDocument:
    """Results JSON with config echo, seed and constants"""

    def _document(self, record_timing=False):
        config = ExperimentConfig(experiment="intensity", field="mbrw", depth=2, reps=4, seed=11,
                                  record_timing=record_timing)
        estimate = EstimatorResult.from_samples([3.0, 3.2, 3.1, 2.9], seed=11)
        return build_results_document(
            "intensity", config, [estimate.to_entry("rate")], wall_time_s=1.5,
            details={"exceedances": 120, "pooled_maxima": 400, "threshold": -1.5, "target_rate": np.pi},
        )

    def test_matches_its_schema(self, expect):
        document = self._document()
        expect.to_match_schema(document)
        expect.to_equal(document["wall_time_s"], None)
        expect.to_equal(document["seed"], 11)
        expect.to_equal(document["config"]["n_side"], 4)

    def test_wall_time_is_kept_when_recorded(self, expect):
        document = self._document(record_timing=True)
        expect.to_equal(document["wall_time_s"], 1.5)
        expect.to_match_schema(document)

    def test_constants(self, expect):
        expect.to_equal(CONSTANTS["gamma"], GAMMA)
        expect.to_equal(CONSTANTS["intensity_rate"], np.pi)
        expect.to_equal(self._document()["constants"], CONSTANTS)

    def test_written_file(self, expect, tmp_path):
        path = write_results_document(self._document(), tmp_path / "nested" / "intensity.json")
        expect.to_match_schema(path)
        expect.to_equal(json.loads(path.read_text())["experiment"], "intensity")

    def test_non_finite_values_are_rejected(self, tmp_path):
        document = self._document()
        document["estimates"][0]["value"] = float("nan")
        with pytest.raises(ValueError):
            write_results_document(document, tmp_path / "bad.json")

    def test_git_describe(self, expect):
        expect.to_be_truthy(isinstance(git_describe(), str) and git_describe())
