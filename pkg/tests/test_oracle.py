import numpy as np
import pytest

from gantrace.influence import QueryVector, infer_linear_influence
from gantrace.metrics import MetricContext, MetricSpec
from gantrace.models import FcGan, GanArchitecture, data_term_gradient
from gantrace.oracle import batch_oracle, counterfactual_retrain, true_influence_on_metric
from gantrace.training import TrainingSettings, run_training


def normal2d(n, seed):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(np.array([[1.0, 0.8], [0.8, 1.0]]))
    return 1.0 + rng.standard_normal((n, 2)) @ chol.T


@pytest.fixture
def gan():
    return FcGan(GanArchitecture(latent_dim=3, data_dim=2, hidden_gen=4,
                                 hidden_disc=5, l2_rate=1e-3))


@pytest.fixture
def trained(gan):
    data = normal2d(24, 0)
    settings = TrainingSettings(epochs=2, batch_size=6, lr_gen=1e-3, lr_disc=1e-3, seed=1)
    return data, run_training(gan, data, settings)


def test_no_exclusion_reproduces_final_params_bit_exactly(gan, trained):
    data, trace = trained
    result = counterfactual_retrain(gan, trace, data, excluded=[])
    assert np.array_equal(result.params, trace.final_params)
    assert np.array_equal(result.delta, np.zeros(gan.dim_params))


def test_untouched_instance_changes_nothing(gan):
    # A hand-built schedule that never uses indices 8..11: excluding them
    # must reproduce the final parameters bit-exactly.
    from toys import build_trace

    data = normal2d(12, 2)
    rng = np.random.default_rng(3)
    theta0 = gan.init_params(rng)
    schedule = [np.array([0, 1, 2, 3]), np.array([4, 5, 6, 7])]
    trace = build_trace(gan, data, schedule, [(1e-3, 1e-3)] * 2, theta0)
    for excluded in (9, {8, 11}):
        result = counterfactual_retrain(gan, trace, data, excluded)
        assert np.array_equal(result.params, trace.final_params)
        assert np.array_equal(result.delta, np.zeros(gan.dim_params))


def test_disjoint_untouched_union_changes_nothing(gan):
    from toys import build_trace

    data = normal2d(12, 4)
    theta0 = gan.init_params(np.random.default_rng(5))
    schedule = [np.array([0, 1, 2]), np.array([3, 4, 5])]
    trace = build_trace(gan, data, schedule, [(1e-3, 1e-3)] * 2, theta0)
    merged = {6, 7} | {10, 11}
    result = counterfactual_retrain(gan, trace, data, merged)
    assert np.array_equal(result.params, trace.final_params)


def test_zero_disc_rate_means_zero_influence(gan):
    data = normal2d(20, 5)
    settings = TrainingSettings(epochs=2, batch_size=5, lr_gen=1e-3, lr_disc=0.0, seed=6)
    trace = run_training(gan, data, settings)
    result = counterfactual_retrain(gan, trace, data, excluded=7)
    assert np.array_equal(result.delta, np.zeros(gan.dim_params))


def test_final_step_exclusion_has_closed_form(gan):
    data = normal2d(30, 7)
    settings = TrainingSettings(epochs=2, batch_size=30, lr_gen=1e-3, lr_disc=1e-3, seed=8)
    trace = run_training(gan, data, settings)
    j = 11
    result = counterfactual_retrain(gan, trace, data, j, k_epochs=1)
    removal = data_term_gradient(gan, trace.records[-1].params, data[j])
    expected = np.concatenate([np.zeros(gan.dim_gen), (1e-3 / 30) * removal])
    assert np.allclose(result.delta, expected, rtol=1e-7, atol=1e-18)


def test_sign_agreement_with_estimator_on_final_step(gan):
    data = normal2d(30, 9)
    settings = TrainingSettings(epochs=2, batch_size=30, lr_gen=1e-3, lr_disc=1e-3, seed=10)
    trace = run_training(gan, data, settings)
    rng = np.random.default_rng(11)
    for j in (2, 13, 27):
        query = QueryVector(rng.standard_normal(gan.dim_params), gan.dim_gen)
        table = infer_linear_influence(gan, trace, data, query, targets=[j], k_epochs=1)
        truth = float(query.data @ counterfactual_retrain(gan, trace, data, j, k_epochs=1).delta)
        assert np.sign(table.scores[j]) == np.sign(truth)
        assert table.scores[j] == pytest.approx(truth, rel=1e-8)


def test_true_metric_influence_zero_when_params_equal(gan, trained):
    data, trace = trained
    rng = np.random.default_rng(12)
    latents = rng.standard_normal((40, 3))
    context = MetricContext(real_data=normal2d(40, 13))
    spec = MetricSpec("all")
    value = true_influence_on_metric(gan, trace.final_params, trace.final_params,
                                     spec, latents, context)
    assert value == 0.0


def test_constant_metric_stub_gives_zero_influence(gan, trained, monkeypatch):
    import gantrace.metrics as metrics_module

    data, trace = trained
    monkeypatch.setitem(metrics_module._METRIC_VALUES, "all",
                        lambda spec, gen, ctx: 42.0)
    rng = np.random.default_rng(14)
    latents = rng.standard_normal((10, 3))
    context = MetricContext(real_data=normal2d(10, 15))
    cf = counterfactual_retrain(gan, trace, data, 3, k_epochs=1)
    value = true_influence_on_metric(gan, trace.final_params, cf.params,
                                     MetricSpec("all"), latents, context)
    assert value == 0.0


def test_batch_oracle_empty_and_duplicate_targets(gan, trained):
    data, trace = trained
    assert batch_oracle(gan, trace, data, targets=[]) == {}
    results = batch_oracle(gan, trace, data, targets=[5, 5, 5], k_epochs=1)
    assert list(results) == [5]
    again = counterfactual_retrain(gan, trace, data, 5, k_epochs=1)
    assert np.array_equal(results[5].params, again.params)


def test_batch_oracle_fills_metric_deltas(gan, trained):
    data, trace = trained
    rng = np.random.default_rng(16)
    latents = rng.standard_normal((30, 3))
    context = MetricContext(real_data=normal2d(30, 17))
    results = batch_oracle(gan, trace, data, targets=[1, 2], k_epochs=1,
                           specs=[MetricSpec("all")], eval_latents=latents,
                           context=context)
    for target in (1, 2):
        assert "all" in results[target].metric_deltas
        assert np.isfinite(results[target].metric_deltas["all"])


def test_batch_oracle_runtime_budget():
    # Ten one-epoch re-runs at desk scale must complete in well under a
    # minute; the bound is generous to stay robust on slow machines.
    import time

    from gantrace.datasets import sample_normal2d
    from gantrace.models import FcGan, GanArchitecture

    gan = FcGan(GanArchitecture(latent_dim=10, data_dim=2, hidden_gen=32,
                                hidden_disc=64, l2_rate=1e-3))
    data = sample_normal2d(1000, np.random.default_rng(20))
    trace = run_training(gan, data, TrainingSettings(
        epochs=5, batch_size=100, lr_gen=1e-3, lr_disc=1e-3, seed=21))
    start = time.perf_counter()
    results = batch_oracle(gan, trace, data, targets=range(10), k_epochs=1)
    elapsed = time.perf_counter() - start
    assert len(results) == 10
    assert elapsed < 60.0


def test_batch_oracle_worker_pool_matches_serial(gan, trained):
    data, trace = trained
    serial = batch_oracle(gan, trace, data, targets=[0, 3, 9], k_epochs=1)
    parallel = batch_oracle(gan, trace, data, targets=[0, 3, 9], k_epochs=1,
                            n_workers=2)
    for target in (0, 3, 9):
        assert np.array_equal(serial[target].params, parallel[target].params)
