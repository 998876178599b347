"""Monte Carlo engine: state sampling, simulation, noise, trials, benchmark grid."""

from __future__ import annotations

import numpy as np
import pytest

from gridsense import (
    BenchmarkReport,
    ScenarioSpec,
    ValidationError,
    add_noise,
    build_impedance_model,
    default_epsilon,
    eligible_injection_buses,
    greedy_place_sensors,
    invert_to_impedance,
    run_benchmark,
    run_trial,
    sample_sparse_state,
    simulate_measurements,
)
from gridsense.network import Branch, Bus, DcNetwork, InjectionDevice
from gridsense.sensing import PlacementPlan

TWO_BUS_Z = invert_to_impedance(np.array([[1.0, -1.0], [-1.0, 2.0]]))  # Z=[[2,1],[1,1]]


@pytest.fixture(scope="module")
def ieee9_spec(ieee9_network, ieee9_model):
    plan = greedy_place_sensors(ieee9_model, 7)

    def make(**overrides):
        kwargs = dict(
            network=ieee9_network, model=ieee9_model, placement=plan,
            sparsity=1, trials=4, seed=11,
        )
        kwargs.update(overrides)
        return ScenarioSpec(**kwargs)

    return make


class TestScenarioSpec:
    def test_invalid_sparsity(self, ieee9_spec):
        with pytest.raises(ValidationError):
            ieee9_spec(sparsity=0)
        with pytest.raises(ValidationError):
            ieee9_spec(sparsity=10)

    def test_invalid_range(self, ieee9_spec):
        with pytest.raises(ValidationError):
            ieee9_spec(injection_low=1.5, injection_high=0.5)

    def test_invalid_sign_policy(self, ieee9_spec):
        with pytest.raises(ValidationError):
            ieee9_spec(sign_policy="positive")

    def test_negative_noise(self, ieee9_spec):
        with pytest.raises(ValidationError):
            ieee9_spec(noise_std=-0.01)


class TestSampleSparseState:
    def test_single_active_bus(self, ieee9_spec):
        spec = ieee9_spec(sparsity=1)
        x = sample_sparse_state(9, spec, trial_index=0)
        assert np.count_nonzero(x) == 1
        mag = np.abs(x[x != 0][0])
        assert 0.5 <= mag <= 1.5

    def test_deterministic_in_seed_and_trial(self, ieee9_spec):
        spec = ieee9_spec(sparsity=3)
        a = sample_sparse_state(9, spec, trial_index=5)
        b = sample_sparse_state(9, spec, trial_index=5)
        assert np.array_equal(a, b)
        c = sample_sparse_state(9, spec, trial_index=6)
        assert not np.array_equal(a, c)

    def test_full_density_allowed(self, ieee9_spec):
        spec = ieee9_spec(sparsity=9)
        x = sample_sparse_state(9, spec, trial_index=0)
        assert np.count_nonzero(x) == 9

    def test_sign_policies(self, ieee9_spec):
        pos = sample_sparse_state(9, ieee9_spec(sparsity=4, sign_policy="sources"), 0)
        neg = sample_sparse_state(9, ieee9_spec(sparsity=4, sign_policy="loads"), 0)
        assert np.all(pos[pos != 0] > 0)
        assert np.all(neg[neg != 0] < 0)

    def test_fixed_device_buses_excluded(self):
        # a current source pins its bus; sampling must avoid it
        net = DcNetwork(
            (Bus(id=1), Bus(id=2, shunt_resistance=1.0), Bus(id=3)),
            (Branch(1, 2, 1.0), Branch(2, 3, 1.0)),
            (InjectionDevice(1, "current_source", 0.7),),
        )
        assert eligible_injection_buses(net) == [2, 3]
        model = build_impedance_model(net)
        plan = greedy_place_sensors(model, 2)
        spec = ScenarioSpec(network=net, model=model, placement=plan, sparsity=2, seed=0)
        for t in range(20):
            x = sample_sparse_state(3, spec, t)
            assert x[0] == 0.0

    def test_sparsity_exceeds_eligible(self):
        # two of three buses are pinned by sources, so S=2 cannot be sampled
        net = DcNetwork(
            (Bus(id=1), Bus(id=2, shunt_resistance=1.0), Bus(id=3)),
            (Branch(1, 2, 1.0), Branch(2, 3, 1.0)),
            (
                InjectionDevice(1, "current_source", 0.7),
                InjectionDevice(3, "current_source", -0.2),
            ),
        )
        model = build_impedance_model(net)
        plan = greedy_place_sensors(model, 2)
        spec = ScenarioSpec(network=net, model=model, placement=plan, sparsity=2, seed=0)
        with pytest.raises(ValidationError):
            sample_sparse_state(3, spec, 0)


class TestSimulateMeasurements:
    def test_zero_state(self, ieee9_model):
        plan = greedy_place_sensors(ieee9_model, 3)
        assert np.array_equal(simulate_measurements(ieee9_model, plan, np.zeros(9)), np.zeros(3))

    def test_single_row_product(self):
        plan = PlacementPlan(chosen=(1,), objective_trace=(0.0,), final_coherence=0.0)
        y = simulate_measurements(TWO_BUS_Z, plan, [1.0, 0.0])
        assert np.allclose(y, [2.0])


class TestAddNoise:
    def test_zero_std_identity(self):
        y = np.array([1.0, 2.0])
        out = add_noise(y, 0.0, seed=0, trial_index=0)
        assert np.array_equal(out, y)
        assert out is not y

    def test_negative_std_error(self):
        with pytest.raises(ValidationError):
            add_noise(np.zeros(2), -1.0, seed=0, trial_index=0)

    def test_deterministic(self):
        y = np.zeros(8)
        a = add_noise(y, 0.01, seed=3, trial_index=4)
        b = add_noise(y, 0.01, seed=3, trial_index=4)
        assert np.array_equal(a, b)
        c = add_noise(y, 0.01, seed=3, trial_index=5)
        assert not np.array_equal(a, c)

    def test_sample_statistics(self):
        n = 100_000
        samples = add_noise(np.zeros(n), 0.01, seed=0, trial_index=0)
        std = samples.std(ddof=1)
        assert abs(std / 0.01 - 1.0) < 0.01
        assert abs(samples.mean()) < 3 * 0.01 / np.sqrt(n)


class TestDefaultEpsilon:
    def test_noiseless_zero(self):
        assert default_epsilon(0.0, 7) == 0.0

    def test_scales_with_sqrt_meters(self):
        assert default_epsilon(0.01, 9) == pytest.approx(3 * default_epsilon(0.01, 1))


class TestRunTrial:
    def test_noiseless_sparse_success(self, ieee9_spec):
        result = run_trial(ieee9_spec(sparsity=1), "cs", 0)
        assert result.success
        assert result.max_relative_error < 0.05
        assert result.rmse < 1e-6

    def test_min_energy_less_accurate(self, ieee9_spec):
        spec = ieee9_spec(sparsity=1)
        cs = run_trial(spec, "cs", 0)
        me = run_trial(spec, "min_energy", 0)
        assert np.array_equal(cs.true_injections, me.true_injections)
        assert me.rmse > cs.rmse

    def test_dense_state_fails(self, ieee9_spec):
        # S = M with 7 meters: information-theoretic deficit
        result = run_trial(ieee9_spec(sparsity=9), "cs", 0)
        assert not result.success

    def test_unknown_estimator(self, ieee9_spec):
        with pytest.raises(ValidationError):
            run_trial(ieee9_spec(), "omp", 0)

    def test_unsupported_devices_rejected(self):
        net = DcNetwork(
            (Bus(id=1, shunt_resistance=1.0), Bus(id=2)),
            (Branch(1, 2, 1.0),),
            (InjectionDevice(2, "constant_power", 1.0),),
        )
        model = build_impedance_model(net)
        plan = greedy_place_sensors(model, 1)
        spec = ScenarioSpec(network=net, model=model, placement=plan, sparsity=1, seed=0)
        with pytest.raises(ValidationError):
            run_trial(spec, "cs", 0)


class TestRunBenchmark:
    def test_single_trial_ratios_degenerate(self, ieee9_network, ieee9_model):
        report = run_benchmark(
            ieee9_network, ieee9_model,
            [(1, 7, "greedy", "cs", 0.0)], trials=1, seed=0,
        )
        assert report.cells[0].reconstruction_ratio in (0.0, 1.0)
        assert report.cells[0].trials == 1

    def test_every_cell_present_in_order(self, ieee9_network, ieee9_model):
        cells = [
            (s, k, "greedy", "cs", 0.0) for s in (1, 2) for k in (7, 8)
        ]
        report = run_benchmark(ieee9_network, ieee9_model, cells, trials=2, seed=1)
        assert [(c.sparsity, c.meters) for c in report.cells] == [
            (1, 7), (1, 8), (2, 7), (2, 8)
        ]
        for c in report.cells:
            assert 0.0 <= c.reconstruction_ratio <= 1.0
            assert c.mean_rmse >= 0.0

    def test_thread_count_invariance(self, ieee9_network, ieee9_model):
        cells = [(1, 7, "greedy", "cs", 0.0), (2, 7, "random", "min_energy", 0.01)]
        serial = run_benchmark(ieee9_network, ieee9_model, cells, trials=8, seed=5, threads=1)
        parallel = run_benchmark(ieee9_network, ieee9_model, cells, trials=8, seed=5, threads=4)
        assert serial.to_csv_text() == parallel.to_csv_text()
        assert serial.to_json_text() == parallel.to_json_text()

    def test_dict_cells_accepted(self, ieee9_network, ieee9_model):
        report = run_benchmark(
            ieee9_network, ieee9_model,
            [{"sparsity": 1, "meters": 7, "placement": "greedy", "estimator": "cs"}],
            trials=1, seed=0,
        )
        assert report.cells[0].noise_std == 0.0

    def test_file_placement_plan(self, ieee9_network, ieee9_model):
        plan = greedy_place_sensors(ieee9_model, 6)
        report = run_benchmark(
            ieee9_network, ieee9_model, [(1, 6, plan, "cs", 0.0)], trials=2, seed=0,
        )
        assert report.cells[0].placement == "file"

    def test_empty_grid_error(self, ieee9_network, ieee9_model):
        with pytest.raises(ValidationError):
            run_benchmark(ieee9_network, ieee9_model, [], trials=1, seed=0)

    def test_unknown_placement_error(self, ieee9_network, ieee9_model):
        with pytest.raises(ValidationError):
            run_benchmark(
                ieee9_network, ieee9_model, [(1, 7, "optimal", "cs", 0.0)], trials=1, seed=0,
            )

    def test_epsilon_override_changes_noisy_cells(self, ieee9_network, ieee9_model):
        cells = [(1, 7, "greedy", "cs", 0.05)]
        auto = run_benchmark(ieee9_network, ieee9_model, cells, trials=6, seed=2)
        huge = run_benchmark(ieee9_network, ieee9_model, cells, trials=6, seed=2, epsilon=10.0)
        # an absurdly wide radius makes the zero estimate feasible, so every
        # trial collapses to all-zero injections and no trial can succeed
        assert huge.cells[0].mean_rmse != auto.cells[0].mean_rmse
        assert huge.cells[0].reconstruction_ratio == 0.0

    def test_serialization_formats(self, ieee9_network, ieee9_model):
        report = run_benchmark(
            ieee9_network, ieee9_model, [(1, 7, "greedy", "cs", 0.0)],
            trials=2, seed=9, model_id="ieee9.case",
        )
        csv = report.to_csv_text()
        assert csv.splitlines()[0].startswith("sparsity,meters,placement")
        assert len(csv.splitlines()) == 2
        js = report.to_json_text()
        assert '"model_id": "ieee9.case"' in js
        table = report.to_table_text()
        assert "ieee9.case" in table and "greedy" in table
        plot = report.to_plot_text()
        assert plot.splitlines()[0].startswith("# series")
        assert "greedy/cs/m7" in plot
