import math

import numpy as np
import pytest

from dpmesh import accounting as acc
from dpmesh import graphs as gr
from dpmesh import simulator as sim
from dpmesh import workloads as wl
from dpmesh.errors import InputError, MissingColumn, NonNumeric, ParseError, SingularC, TooManyNodes
from conftest import random_gossip

PS = acc.ParticipationScheme


class _Mix:
    """Bare mixing matrix, enough for the simulator."""

    def __init__(self, W):
        self.W = np.asarray(W, dtype=float)
        self.n = self.W.shape[0]


@pytest.fixture(scope="module")
def ds():
    return sim.synthetic_linear_dataset(N=300, d_in=4, seed=3)


def test_plain_gradient_descent_oracle(ds):
    """One node, full batch, no clipping, no noise: the trace is plain GD."""
    T, eta = 15, 0.05
    cfg = sim.SimConfig(_Mix([[1.0]]), T, eta=eta, clip=1e9, batch=ds.train.size)
    tr = sim.run_mf_dsgd(cfg, ds)
    X, y = ds.X[ds.train], ds.y[ds.train]
    Xb = np.hstack([X, np.ones((len(y), 1))])
    theta = np.zeros(Xb.shape[1])
    Xt = np.hstack([ds.X[ds.test], np.ones((ds.test.size, 1))])
    for t in range(T):
        theta = theta - eta * (2.0 / len(y)) * Xb.T @ (Xb @ theta - y)
        assert tr.test_loss[t] == pytest.approx(np.mean((Xt @ theta - ds.y[ds.test]) ** 2), rel=1e-10)
    np.testing.assert_allclose(tr.final_models[0], theta, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_per_sample_grads_finite_difference(kind, rng):
    d = 3
    m = sim.make_model(kind, d, hidden=5)
    theta = m.init(rng) + 0.1 * rng.standard_normal(m.size)
    X = rng.standard_normal((4, d))
    y = rng.standard_normal(4)
    G = m.per_sample_grads(theta, X, y)
    h = 1e-5
    for i in range(4):
        loss = lambda th: float((m.predict(th, X[i:i + 1])[0] - y[i]) ** 2)
        fd = np.array([(loss(theta + h * e) - loss(theta - h * e)) / (2 * h) for e in np.eye(m.size)])
        np.testing.assert_allclose(G[i], fd, rtol=1e-4, atol=1e-6)


def test_make_model_unknown():
    with pytest.raises(InputError):
        sim.make_model("cnn", 3)


def test_clip_rows(rng):
    G = rng.standard_normal((20, 5)) * 3
    G[0] = 0.0
    Cl = sim.clip_rows(G, 1.5)
    norms = np.linalg.norm(Cl, axis=1)
    assert np.all(norms <= 1.5 + 1e-12)
    small = np.linalg.norm(G, axis=1) <= 1.5
    np.testing.assert_array_equal(Cl[small], G[small])
    big = ~small
    np.testing.assert_allclose(Cl[big] / norms[big, None], G[big] / np.linalg.norm(G[big], axis=1)[:, None])


def test_noise_streams_are_reproducible_and_independent():
    a = sim.node_noise(7, 2, 5, 10, 1.0)
    np.testing.assert_array_equal(a, sim.node_noise(7, 2, 5, 10, 1.0))
    assert not np.allclose(a, sim.node_noise(7, 3, 5, 10, 1.0))
    assert not np.allclose(a, sim.node_noise(7, 2, 6, 10, 1.0))
    assert not np.allclose(a, sim.node_noise(8, 2, 5, 10, 1.0))


def test_correlated_noise_covariance(rng):
    T, N = 4, 10_000
    C = np.tril(rng.uniform(0.3, 1.0, (T, T)))
    Cinv = np.linalg.inv(C)
    Z = np.stack([sim.node_noise(11, 0, t, N, 2.0) for t in range(T)])
    E = np.stack([sim.correlated_noise(Cinv, Z, t) for t in range(T)])
    emp = E @ E.T / N
    want = 4.0 * Cinv @ Cinv.T
    assert np.abs(emp - want).max() <= 0.05 * np.abs(want).max()


def test_antipgd_noise_telescopes(rng):
    T = 6
    Cinv = np.linalg.inv(wl.prefix_sum_matrix(T))
    Z = rng.standard_normal((T, 3, 2))
    total = sum(sim.correlated_noise(Cinv, Z, t) for t in range(T))
    np.testing.assert_allclose(total, Z[T - 1], atol=1e-12)


def test_exact_averaging_keeps_nodes_identical(ds):
    n = 4
    cfg = sim.SimConfig(_Mix(np.full((n, n), 1.0 / n)), 10, sigma=0.5, seed=1)
    tr = sim.run_mf_dsgd(cfg, ds)
    np.testing.assert_allclose(tr.final_models, np.tile(tr.final_models[0], (n, 1)), atol=1e-12)
    np.testing.assert_allclose(tr.node_test_loss, np.repeat(tr.test_loss[:, None], n, axis=1), rtol=1e-10)


def test_gossip_preserves_average_without_gradients(ds):
    """eta -> 0 leaves the averaged model at its initial value whatever the mixing."""
    _, G = random_gossip(5, 0)
    tr = sim.run_mf_dsgd(sim.SimConfig(G, 5, eta=1e-300, sigma=1.0), ds)
    np.testing.assert_allclose(tr.final_models.mean(axis=0), 0.0, atol=1e-200)


def test_determinism_and_seed_sensitivity(ds):
    _, G = random_gossip(5, 1)
    mk = lambda s: sim.SimConfig(G, 20, sigma=1.0, seed=s, sampling="random", batch=2)
    a, b, c = (sim.run_mf_dsgd(mk(s), ds) for s in (4, 4, 5))
    np.testing.assert_array_equal(a.test_loss, b.test_loss)
    np.testing.assert_array_equal(a.final_models, b.final_models)
    assert a.config_hash == b.config_hash != c.config_hash
    assert not np.array_equal(a.test_loss, c.test_loss)


def test_divergence_is_reported(ds):
    tr = sim.run_mf_dsgd(sim.SimConfig(_Mix([[1.0]]), 200, eta=50.0, clip=1e9, batch=8), ds)
    assert tr.diverged and tr.final_loss() == math.inf
    assert tr.test_loss.size < 200


def test_config_validation(ds):
    G = _Mix([[1.0]])
    with pytest.raises(InputError):
        sim.run_mf_dsgd(sim.SimConfig(G, 3, eta=0.0), ds)
    with pytest.raises(InputError):
        sim.run_mf_dsgd(sim.SimConfig(G, 3, C_local=np.eye(2)), ds)
    with pytest.raises(SingularC):
        sim.run_mf_dsgd(sim.SimConfig(G, 2, sigma=1.0, C_local=np.diag([1.0, 0.0])), ds)


def test_partition_sizes(ds):
    shards = sim.partition_uniform(ds, 7, seed=2)
    sizes = [s.size for s in shards]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)
    allidx = np.sort(np.concatenate(shards))
    np.testing.assert_array_equal(allidx, ds.train)
    with pytest.raises(TooManyNodes):
        sim.partition_uniform(ds, ds.train.size + 1)


def test_dataset_standardization(ds):
    Xtr = ds.X[ds.train]
    np.testing.assert_allclose(Xtr.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(Xtr.std(axis=0), 1.0, atol=1e-12)
    assert len(set(ds.train) & set(ds.test)) == 0 and ds.test.size == 60


def test_csv_loading(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,target,c\n1,2,3,5\n2,3,5,5\n4,1,2,5\n0,0,1,5\n\n")
    d = sim.load_csv_dataset(p, "target", test_fraction=0.25)
    assert d.columns == ("a", "b", "c") and d.X.shape == (4, 3)
    np.testing.assert_array_equal(d.X[:, 2], 0.0)  # constant column


@pytest.mark.parametrize("body,exc", [
    ("a,b\n1,2\n", MissingColumn),
    ("a,target\n1,x\n2,3\n", NonNumeric),
    ("a,target\n1,2,3\n2,3\n", ParseError),
    ("a,target\n1,nan\n2,3\n", NonNumeric),
    ("", ParseError),
])
def test_csv_errors(tmp_path, body, exc):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(exc):
        sim.load_csv_dataset(p, "target")


def test_trace_csv(tmp_path, ds):
    tr = sim.run_mf_dsgd(sim.SimConfig(_Mix([[1.0]]), 3), ds)
    p = tmp_path / "t.csv"
    tr.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "step,test_mse,train_mse,wallclock_ms" and len(lines) == 4
    assert all(l.endswith(",0.000") for l in lines[1:])
    assert float(lines[1].split(",")[1]) == tr.test_loss[0]


def test_method_correlations_unit_sensitivity():
    _, G = random_gossip(4, 0)
    s = PS.cyclic(2, 3)
    from dpmesh.mafalda import OptimizerConfig, sens_sq
    Cs = sim.method_correlations(G, 6, s, optimizer=OptimizerConfig(max_iters=100))
    assert set(Cs) == set(sim.METHODS)
    for C in Cs.values():
        assert sens_sq(C, s) == pytest.approx(1.0)


def test_run_comparison_rows(ds):
    g = gr.builtin_florentine()
    G = gr.gossip_from_graph(g)
    T = 8
    Cs = {m: np.eye(T) for m in ("nonprivate", "dpdsgd")}
    out = sim.run_comparison(G, ds, T, 1.0, [0, 1], PS.full(), methods=("nonprivate", "dpdsgd"),
                             correlations=Cs, last=3)
    rows = {r["method"]: r for r in out["rows"]}
    assert rows["nonprivate"]["eps_ldp"] == math.inf and rows["nonprivate"]["sigma"] == 0.0
    # identity correlation with full participation: mu = sqrt(T) / sigma
    want = acc.gdp_to_eps_delta(math.sqrt(T), 1e-6)
    assert rows["dpdsgd"]["eps_ldp"] == pytest.approx(want)
    assert len(out["traces"]) == 4
