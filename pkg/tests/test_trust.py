import numpy as np
import pytest

from dpmesh import graphs as gr
from dpmesh import matrixkit as mk
from dpmesh import trust as tr
from dpmesh import workloads as wl
from dpmesh.errors import EmptyAttackerSet, NoExactFactorization, ShapeMismatch, UnsupportedCombination
from conftest import path_graph, random_gossip


def _ok(view):
    return np.linalg.norm(view.A - view.B @ view.C) <= 1e-8 * max(1.0, np.linalg.norm(view.A))


def test_message_projector_path():
    g = path_graph(3)
    K = tr.message_projector(g, [1], 1)
    np.testing.assert_array_equal(K, np.eye(3))
    K = tr.message_projector(g, [1], 1, include_attackers=False)
    np.testing.assert_array_equal(K, np.eye(3)[[0, 2]])
    K2 = tr.message_projector(g, [1], 2, include_attackers=False)
    np.testing.assert_array_equal(K2, np.kron(np.eye(2), np.eye(3)[[0, 2]]))
    with pytest.raises(EmptyAttackerSet):
        tr.message_projector(g, [], 1)


def test_message_projector_all_nodes_covers_everything():
    g = gr.erdos_renyi(6, 0.5, 0)
    np.testing.assert_array_equal(tr.message_projector(g, range(6), 3), np.eye(18))


def test_reduce_view_edge_cases(rng):
    A = rng.standard_normal((5, 4))
    B = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(tr.reduce_view(A, B, np.zeros((0, 4))), A)
    np.testing.assert_allclose(tr.reduce_view(A, B, np.eye(4)), 0.0, atol=1e-12)
    K = np.eye(4)[[1]]
    R = tr.reduce_view(A, B, K)
    np.testing.assert_allclose(R[:, 1], 0.0, atol=1e-14)
    np.testing.assert_allclose(tr.reduce_view(R, B, K), R, atol=1e-10)
    with pytest.raises(ShapeMismatch):
        tr.reduce_view(A, B, np.eye(3))
    with pytest.raises(ShapeMismatch):
        tr.reduce_view(A, B[:4], K)


def test_reduce_view_idempotent_general(rng):
    A = rng.standard_normal((6, 5))
    K = rng.standard_normal((2, 5))
    R = tr.reduce_view(A, np.zeros((6, 1)), K)
    np.testing.assert_allclose(tr.reduce_view(R, np.zeros((6, 1)), K), R, atol=1e-10)
    np.testing.assert_allclose(R @ K.T, 0.0, atol=1e-10)


def test_row_selection_examples(rng):
    P = tr.row_selection(np.array([[1.0, 0], [2.0, 0], [0, 1.0]]))
    np.testing.assert_array_equal(P, np.eye(3)[[0, 2]])
    B = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(tr.row_selection(B), np.eye(4))
    for r in (1, 2, 4):
        B = rng.standard_normal((7, r)) @ rng.standard_normal((r, 6))
        P = tr.row_selection(B)
        assert P.shape[0] == r
        assert mk.rank(P @ B) == mk.rank(B) == r


def test_solve_C(rng):
    B = rng.standard_normal((4, 4)) + 4 * np.eye(4)
    A = rng.standard_normal((4, 3))
    np.testing.assert_allclose(tr.solve_C(A, B), np.linalg.solve(B, A), atol=1e-10)
    # known gradients with zero noise rows cannot be factored before reduction
    Abar, Bbar = rng.standard_normal((3, 4)), rng.standard_normal((3, 5))
    KG = np.eye(4)[[0]]
    A = np.vstack([Abar, KG])
    B = np.vstack([Bbar, np.zeros((1, 5))])
    with pytest.raises(NoExactFactorization):
        tr.solve_C(A, B)


def test_dsgd_ldp_view():
    _, G = random_gossip(4, 0)
    v = tr.build_view(tr.AlgorithmSpec("dsgd", G, 3), tr.TrustModel.ldp())
    Agrad = wl.dsgd_workload(G, 3).materialize()
    np.testing.assert_array_equal(v.A, Agrad)
    np.testing.assert_array_equal(v.B, Agrad)
    np.testing.assert_array_equal(v.C, np.eye(12))


def test_pndp_reduction_zero_pattern():
    g = path_graph(3)
    G = gr.gossip_from_graph(g)
    v = tr.build_view(tr.AlgorithmSpec("dsgd", G, 2), tr.TrustModel.pndp([0]))
    att_cols = [0, 3]
    np.testing.assert_allclose(v.A[:, att_cols], 0.0, atol=1e-12)
    keep = np.ones(6)
    keep[att_cols] = 0
    np.testing.assert_array_equal(v.C, np.diag(keep))
    # the unreduced view cannot be factored
    with pytest.raises(NoExactFactorization):
        tr.solve_C(v.raw_A, v.B)
    tr.solve_C(v.A, v.B)


def test_antipgd_pndp_structure():
    g = path_graph(3)
    G = gr.gossip_from_graph(g)
    v = tr.build_view(tr.AlgorithmSpec("antipgd", G, 2), tr.TrustModel.pndp([0]))
    assert _ok(v)
    Dinv = np.kron(np.tril(np.ones((2, 2))), np.eye(3))
    mask = np.diag([0.0, 1, 1, 0, 1, 1])
    np.testing.assert_array_equal(v.C, Dinv @ mask)


def test_decor_secldp_triangle():
    g = gr.complete_graph(3)
    G = gr.gossip_from_graph(g)
    v = tr.build_view(tr.AlgorithmSpec("decor", G, 1), tr.TrustModel.secldp([0]))
    assert _ok(v)
    known = tr.decor_known_secrets(g, [0], 1)
    assert sorted(known) == [e for e, (a, b) in enumerate(g.edges) if 0 in (a, b)]
    assert v.meta["known_secrets"] == 2
    assert any(lbl.startswith("secret[") for lbl in v.row_labels)


def test_unsupported_combinations():
    _, G = random_gossip(4, 0)
    with pytest.raises(UnsupportedCombination):
        tr.build_view(tr.AlgorithmSpec("decor", G, 2), tr.TrustModel.pndp([0]))
    with pytest.raises(UnsupportedCombination):
        tr.build_view(tr.AlgorithmSpec("dsgd", G, 2), tr.TrustModel.secldp([0]))
    with pytest.raises(EmptyAttackerSet):
        tr.TrustModel.pndp([])


@pytest.mark.parametrize("seed", range(3))
def test_all_supported_pairs_factor(seed):
    r = np.random.default_rng(seed)
    for _ in range(4):
        n, T = int(r.integers(3, 7)), int(r.integers(1, 5))
        _, G = random_gossip(n, int(r.integers(1 << 30)))
        for kind, algos in tr.SUPPORTED.items():
            for a in sorted(algos):
                att = tuple(sorted(r.choice(n, size=int(r.integers(1, 3)), replace=False).tolist()))
                trust = tr.TrustModel.ldp() if kind == "ldp" else tr.TrustModel(kind, att)
                v = tr.build_view(tr.AlgorithmSpec(a, G, T, K=2), trust)
                assert _ok(v), (a, kind, n, T)
                if kind != "ldp":
                    for t in range(T):
                        for u in att:
                            np.testing.assert_allclose(v.A[:, t * n + u], 0.0, atol=1e-10)
                    with pytest.raises(NoExactFactorization):
                        tr.solve_C(v.raw_A, v.B)


def test_own_rows_do_not_change_pndp_information():
    """Adding the attackers' own messages leaves the projector on the other nodes' rows unchanged."""
    g, G = random_gossip(6, 7)
    T, n = 3, 6
    att = [2]
    Agrad = wl.dsgd_workload(G, T).materialize()
    P_in = mk.projector(tr.message_projector(g, att, T) @ Agrad)
    v = tr.build_view(tr.AlgorithmSpec("dsgd", G, T), tr.TrustModel.pndp(att))
    X = v.C.T @ mk.projector(v.B) @ v.C
    others = [t * n + u for t in range(T) for u in range(n) if u not in att]
    np.testing.assert_allclose(X[np.ix_(others, others)], P_in[np.ix_(others, others)], atol=1e-10)


def test_attacker_first_permutation():
    _, G = random_gossip(4, 1)
    v = tr.build_view(tr.AlgorithmSpec("dsgd", G, 2), tr.TrustModel.pndp([2]))
    perm = v.attacker_first_permutation(4)
    assert perm[:2].tolist() == [2, 6]
    assert sorted(perm.tolist()) == list(range(8))
    np.testing.assert_allclose(v.A[:, perm][:, :2], 0.0, atol=1e-12)
