import math

import numpy as np
import pytest

from fedrdn.augmentation import RDN, AugmentationPipeline, FedMix, FixedNormalize, HorizontalFlip, ChannelStats
from fedrdn.datasets import ClientDataset, FederationData, SkewConfig, generate_synthetic
from fedrdn.errors import ConfigError, ExperimentError, MisuseError
from fedrdn.federation import (
    AlgorithmConfig,
    aggregate_weighted,
    aggregation_weights,
    build_clients,
    cross_site_matrix,
    evaluate,
    init_server,
    local_train,
    prox_gradient,
    run_experiment,
    server_update,
)
from fedrdn.model import MLP, ModelSpec, forward, init_params
from fedrdn.params import ParameterVector

from oracles import brute_accuracy, central_differences, loop_weighted_average, max_relative_error


@pytest.fixture(scope="module")
def fed():
    return generate_synthetic(SkewConfig(K=3, num_classes=3, image_shape=(2, 4, 4), n_train=12, n_test=9,
                                         seed=11, gain_range=(0.5, 2.0), bias_range=(-1.0, 1.0)))


@pytest.fixture(scope="module")
def spec(fed):
    return ModelSpec(MLP((8,)), fed.image_shape, fed.num_classes)


def _pv(*v):
    return ParameterVector([("w", np.array(v, dtype=float))])


def _cfg(**kw):
    base = dict(rounds=2, local_epochs=1, batch_size=5, lr=0.1)
    base.update(kw)
    return AlgorithmConfig(**base)


PIPE = AugmentationPipeline((HorizontalFlip(0.5), RDN()))


# --- local training ---------------------------------------------------------

def test_zero_lr_returns_global(fed, spec):
    client = build_clients(fed, AugmentationPipeline(()), 0)[0]
    w = init_params(spec, 0)
    assert local_train(client, w, _cfg(lr=0.0), spec).bit_equal(w)


def test_fedprox_with_zero_mu_is_fedavg(fed, spec):
    w = init_params(spec, 1)
    a = local_train(build_clients(fed, AugmentationPipeline(()), 3)[1], w, _cfg(name="fedavg"), spec)
    b = local_train(build_clients(fed, AugmentationPipeline(()), 3)[1], w, _cfg(name="fedprox", mu=0.0), spec)
    assert a.bit_equal(b)


def test_fedprox_pulls_towards_global(fed, spec):
    w = init_params(spec, 1)
    far = lambda name, mu: local_train(build_clients(fed, AugmentationPipeline(()), 3)[1], w,
                                       _cfg(name=name, mu=mu, local_epochs=3), spec)
    d_avg = np.linalg.norm(far("fedavg", 0.0).flat() - w.flat())
    d_prox = np.linalg.norm(far("fedprox", 5.0).flat() - w.flat())
    assert d_prox < d_avg


def test_prox_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    w = ParameterVector([("a", rng.normal(size=3)), ("b", rng.normal(size=(2, 2)))])
    g = w.with_flat(rng.normal(size=7))
    mu = 0.37
    f = lambda flat: 0.5 * mu * float(np.sum((flat - g.flat()) ** 2))
    fd = central_differences(f, w.flat())
    assert max_relative_error(prox_gradient(w, g, mu).flat(), fd) < 1e-6


def test_client_without_training_data_is_rejected():
    with pytest.raises(ConfigError, match="n_k"):
        ClientDataset(0, np.zeros((0, 2, 4, 4)), np.zeros(0, dtype=int), np.zeros((1, 2, 4, 4)), np.zeros(1, dtype=int))


# --- aggregation and server update ------------------------------------------

def test_aggregation_example():
    assert aggregate_weighted([_pv(0.0), _pv(4.0)], [1, 3])["w"][0] == 3.0


def test_identical_inputs_are_a_fixed_point():
    rng = np.random.default_rng(1)
    w = _pv(*rng.normal(size=50))
    assert aggregate_weighted([w, w, w], [3, 17, 1]).bit_equal(w)


def test_aggregation_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        K = int(rng.integers(1, 7))
        vecs = [rng.normal(size=13) * 10 for _ in range(K)]
        counts = [int(c) for c in rng.integers(1, 500, size=K)]
        out = aggregate_weighted([_pv(*v) for v in vecs], counts).flat()
        assert np.max(np.abs(out - loop_weighted_average(vecs, counts))) < 1e-12
        assert math.isclose(aggregation_weights(counts).sum(), 1.0, abs_tol=1e-15)


def test_aggregation_errors():
    with pytest.raises(MisuseError):
        aggregate_weighted([], [])
    with pytest.raises(MisuseError):
        aggregate_weighted([_pv(1.0)], [0])
    with pytest.raises(MisuseError):
        aggregate_weighted([_pv(1.0), _pv(1.0, 2.0)], [1, 1])


def test_fedavgm_with_zero_beta_is_fedavg():
    cfg = AlgorithmConfig(name="fedavgm", beta=0.0)
    state = init_server(_pv(1.0, 2.0), cfg)
    for agg in (_pv(0.5, 1.0), _pv(-2.0, 3.0)):
        state = server_update(state, agg, cfg)
        assert state.global_params.bit_equal(agg)


def test_fedavgm_momentum_accumulates():
    beta = 0.5
    cfg = AlgorithmConfig(name="fedavgm", beta=beta)
    state = init_server(_pv(0.0), cfg)
    # every round the aggregate sits 1.0 below the current global: delta = 1
    state = server_update(state, _pv(-1.0), cfg)
    assert state.momentum["w"][0] == 1.0 and state.global_params["w"][0] == -1.0
    state = server_update(state, _pv(state.global_params["w"][0] - 1.0), cfg)
    assert state.momentum["w"][0] == pytest.approx(1.0 + beta)
    assert state.global_params["w"][0] == pytest.approx(-1.0 - (1.0 + beta))


def test_invalid_algorithm_config():
    for kw in ({"name": "sgd"}, {"mu": -1}, {"beta": 1.0}, {"lr": -0.1}, {"rounds": 0}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            AlgorithmConfig(**kw)


# --- evaluation ---------------------------------------------------------------

def _oracle_params(spec_in):
    """Linear model whose logits equal the pixel at position c of channel 0."""
    spec = ModelSpec(MLP(()), spec_in, 3)
    w = np.zeros((int(np.prod(spec_in)), 3))
    for c in range(3):
        w[c, c] = 1.0
    return spec, ParameterVector([("out.weight", w), ("out.bias", np.zeros(3))])


def test_accuracy_of_a_perfect_model_is_one():
    x = np.zeros((6, 1, 1, 3))
    y = np.array([0, 1, 2, 2, 1, 0])
    x[np.arange(6), 0, 0, y] = 5.0
    ds = ClientDataset(0, x, y, x, y)
    spec, params = _oracle_params((1, 1, 3))
    client = build_clients(FederationData((ds,), (1, 1, 3), 3), AugmentationPipeline(()), 0)[0]
    acc, loss = evaluate(client, params, spec)
    assert acc == 1.0 and loss < 0.02


def test_constant_logits_give_chance_accuracy():
    spec = ModelSpec(MLP(()), (1, 2, 2), 10)
    params = init_params(spec, 0).zeros_like()
    y = np.tile(np.arange(10), 20)
    x = np.random.default_rng(0).normal(size=(200, 1, 2, 2))
    client = build_clients(FederationData((ClientDataset(0, x, y, x, y),), (1, 2, 2), 10),
                           AugmentationPipeline(()), 0)[0]
    acc, loss = evaluate(client, params, spec)
    assert acc == pytest.approx(0.1)
    assert loss == pytest.approx(math.log(10))


def test_accuracy_matches_brute_force(fed, spec):
    params = init_params(spec, 5)
    for client in build_clients(fed, AugmentationPipeline(()), 0):
        acc, _ = evaluate(client, params, spec)
        logits = forward(spec, params, client.dataset.test_x).data
        assert acc == brute_accuracy(logits, client.dataset.test_y)


def test_cross_site_matrix(fed, spec):
    clients = build_clients(fed, PIPE, 0)
    locals_ = [init_params(spec, s) for s in range(3)]
    m = cross_site_matrix(locals_, clients, spec)
    for s in range(3):
        for t in range(3):
            assert m[s, t] == evaluate(clients[t], locals_[s], spec)[0]
    one = cross_site_matrix(locals_[:1], clients[:1], spec)
    assert one.shape == (1, 1) and one[0, 0] == evaluate(clients[0], locals_[0], spec)[0]


# --- full runs ----------------------------------------------------------------

def test_single_round_without_learning_keeps_initial_model(fed, spec):
    res = run_experiment(fed, spec, PIPE, _cfg(rounds=1, lr=0.0), seed=4)
    assert res.final_global.bit_equal(res.initial_global)
    assert len(res.reports) == 1


def test_concurrent_clients_do_not_change_results(fed, spec):
    a = run_experiment(fed, spec, PIPE, _cfg(), seed=2, workers=1)
    b = run_experiment(fed, spec, PIPE, _cfg(), seed=2, workers=3)
    assert a.reports == b.reports
    assert a.final_global.bit_equal(b.final_global)


def _separable_client(k, n, rng):
    y = np.arange(n) % 3
    x = rng.normal(0.0, 0.1, size=(n, 1, 1, 3))
    x[np.arange(n), 0, 0, y] += 1.0  # class c lights up pixel c
    return ClientDataset(k, x, y, x, y)


def test_training_loss_decreases_on_separable_data():
    rng = np.random.default_rng(0)
    fed = FederationData(tuple(_separable_client(k, 30, rng) for k in range(2)), (1, 1, 3), 3)
    spec = ModelSpec(MLP(()), fed.image_shape, 3)
    # full-batch steps on a convex objective: the loss must not go up
    cfg = _cfg(rounds=10, local_epochs=1, batch_size=30, lr=0.5)
    res = run_experiment(fed, spec, AugmentationPipeline(()), cfg, seed=0)
    losses = [np.mean([c.train_loss for c in r.clients]) for r in res.reports]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.5 * losses[0]
    assert res.reports[-1].avg_accuracy_unweighted == 1.0


def test_rdn_trace_uses_registry_in_training_and_own_stats_in_testing(fed, spec):
    trace = []
    run_experiment(fed, spec, PIPE, _cfg(rounds=1), seed=0, trace=trace)
    rdn = [e for e in trace if e[0] == "RDN"]
    assert rdn and set(rdn) == {("RDN", "train", "registry"), ("RDN", "test", "own")}


def test_uploads_carry_only_stats_and_params(fed, spec):
    res = run_experiment(fed, spec, PIPE, _cfg(rounds=2), seed=0)
    kinds = {u.kind for u in res.uploads}
    assert kinds == {"stats", "params"}
    stats = [u for u in res.uploads if u.kind == "stats"]
    assert len(stats) == 3 and all(u.n_floats == 2 * fed.image_shape[0] for u in stats)
    plain = run_experiment(fed, spec, AugmentationPipeline(()), _cfg(rounds=1), seed=0)
    assert {u.kind for u in plain.uploads} == {"params"} and plain.registry is None


def test_fedmix_run_uploads_mean_images(fed, spec):
    res = run_experiment(fed, spec, AugmentationPipeline((FedMix(lam=0.1),)), _cfg(rounds=1), seed=0)
    assert "mean_images" in {u.kind for u in res.uploads}


def test_round_reports_weighted_and_unweighted_average(fed, spec):
    res = run_experiment(fed, spec, AugmentationPipeline(()), _cfg(rounds=1), seed=1)
    r = res.reports[0]
    accs = [c.test_accuracy for c in r.clients]
    assert r.avg_accuracy_unweighted == pytest.approx(np.mean(accs))
    w = np.array(fed.counts) / sum(fed.counts)
    assert r.avg_accuracy_weighted == pytest.approx(float(np.dot(w, accs)))


def test_degenerate_normalization_surfaces_as_experiment_error(spec):
    x = np.ones((4, 2, 4, 4))
    y = np.array([0, 1, 2, 0])
    fed = FederationData((ClientDataset(0, x, y, x, y),), (2, 4, 4), 3)
    with pytest.raises(ExperimentError):
        run_experiment(fed, spec, AugmentationPipeline((RDN(),)), _cfg(rounds=1), seed=0)
    ok = AugmentationPipeline((FixedNormalize(ChannelStats([1.0, 1.0], [0.5, 0.5])),))
    run_experiment(fed, spec, ok, _cfg(rounds=1), seed=0)


def test_model_data_mismatch_is_config_error(fed):
    wrong = ModelSpec(MLP((4,)), (3, 4, 4), 3)
    with pytest.raises(ConfigError):
        run_experiment(fed, wrong, AugmentationPipeline(()), _cfg(), seed=0)
