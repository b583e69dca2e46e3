import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import grad_check
from tsadc import numerics as nx
from tsadc.errors import ConfigError, NumericError, ShapeError
from tsadc.graph import (
    GIN,
    GINLayer,
    GraphHyper,
    GraphModel,
    TemporalEmbedder,
    adjacency_rows,
    attention_adjacency,
    blend_adjacency,
    connectivity,
    cosine_similarity,
    graph_reg_loss,
    interval_embed,
    knn_adjacency,
    knn_select,
    recon_loss,
    smoothness,
    sparsity,
    total_loss,
)

unit = st.floats(-3, 3, allow_nan=False, width=64)


def test_interval_embed_loop_oracle(rng):
    H = rng.normal(size=(2, 3, 12, 5))
    E = interval_embed(H, 4).data
    assert E.shape == (2, 3, 3, 5)
    for b in range(2):
        for m in range(3):
            for k in range(3):
                np.testing.assert_allclose(E[b, m, k], H[b, k, 4 * m:4 * m + 4].mean(axis=0),
                                           atol=1e-12)


def test_interval_embed_edge_cases(rng):
    H = rng.normal(size=(3, 8, 4))
    np.testing.assert_allclose(interval_embed(H, 8).data[0], H.mean(axis=1), atol=1e-14)
    const = np.repeat(rng.normal(size=(3, 1, 4)), 8, axis=1)
    E = interval_embed(const, 2).data
    assert np.allclose(E, E[0])
    with pytest.raises(ConfigError):
        interval_embed(H, 3)


@given(hnp.arrays(np.float64, (2, 4, 3), elements=unit), hnp.arrays(np.float64, (3, 3), elements=unit),
       hnp.arrays(np.float64, (3, 3), elements=unit))
def test_attention_rows_sum_to_one(E, Wq, Wr):
    A = attention_adjacency(E, Wq, Wr).data
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_examples(rng):
    E = rng.normal(size=(4, 3))
    A = attention_adjacency(E, np.zeros((3, 3)), np.zeros((3, 3))).data
    np.testing.assert_array_equal(A, np.full((4, 4), 0.25))
    # K = 2 hand example with identity projections, U = 2
    E = np.array([[1.0, 0.0], [0.5, 2.0]])
    logits = E @ E.T / math.sqrt(2)
    ref = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attention_adjacency(E, np.eye(2), np.eye(2)).data, ref, atol=1e-12)


def test_knn_duplicates_and_row_counts(rng):
    E = np.array([[1.0, 2.0], [1.0, 2.0], [2.0, 4.0], [-1.0, 0.5]])
    A = knn_adjacency(E, 2).data
    assert A[0, 1] == pytest.approx(1.0) and A[0, 2] == pytest.approx(1.0)
    assert np.all(np.count_nonzero(A, axis=1) <= 2)
    assert np.all(np.diag(A) == 0)


def test_knn_matches_full_sort_oracle(rng):
    for _ in range(20):
        E = rng.normal(size=(4, 3))
        A = knn_adjacency(E, 3).data
        n = E / np.linalg.norm(E, axis=1, keepdims=True)
        sim = n @ n.T
        for v in range(4):
            others = sorted((u for u in range(4) if u != v), key=lambda u: (-sim[v, u], u))[:3]
            expect = np.zeros(4)
            expect[others] = np.maximum(sim[v, others], 0)
            np.testing.assert_allclose(A[v], expect, atol=1e-12)


def test_knn_ties_prefer_lower_index():
    sim = np.array([[1.0, 0.5, 0.5, 0.5], [0.5, 1, 0.5, 0.5], [0.5, 0.5, 1, 0.5], [0.5, 0.5, 0.5, 1]])
    mask = knn_select(sim, 1)
    assert list(np.argmax(mask, axis=1)) == [1, 0, 0, 0]


def test_zero_norm_rows_give_zero_similarity():
    E = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    S = cosine_similarity(E).data
    assert np.all(S[0] == 0) and np.all(S[:, 0] == 0)


@given(hnp.arrays(np.float64, (5, 3), elements=unit), st.integers(1, 4))
def test_knn_row_property(E, delta):
    A = knn_adjacency(E, delta).data
    assert np.all(A >= 0) and np.all(A <= 1 + 1e-12)
    assert np.all(np.count_nonzero(A, axis=1) <= delta)


def test_blend(rng):
    A_att = attention_adjacency(rng.normal(size=(4, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    A_knn = knn_adjacency(rng.normal(size=(4, 3)), 3)
    np.testing.assert_array_equal(blend_adjacency(A_knn, A_att, 0.0).data, A_att.data)
    B = blend_adjacency(A_knn, A_att, 0.3).data
    np.testing.assert_allclose(B, 0.3 * A_knn.data + 0.7 * A_att.data)
    np.testing.assert_allclose(B.sum(axis=1), 0.3 * A_knn.data.sum(axis=1) + 0.7, atol=1e-12)
    with pytest.raises(ConfigError):
        blend_adjacency(A_knn, A_att, 1.0)


def test_regularizer_closed_forms(rng):
    K = 5
    assert sparsity(np.ones((K, K))).item() == pytest.approx(1.0, abs=1e-10)
    P = rng.random((K, K))
    P /= P.sum(axis=1, keepdims=True)
    assert abs(connectivity(P).item()) < 1e-10
    E = np.tile(rng.normal(size=(1, 4)), (K, 1))
    assert abs(smoothness(E, P).item()) < 1e-10


def test_smoothness_matches_laplacian_trace(rng):
    E, A = rng.normal(size=(4, 3)), rng.random((4, 4))
    S = (A + A.T) / 2
    lap = np.diag(S.sum(axis=1)) - S
    assert smoothness(E, A).item() == pytest.approx(np.trace(E.T @ lap @ E) / 16, rel=1e-12)


@given(hnp.arrays(np.float64, (4, 3), elements=unit), st.integers(0, 2**32 - 1))
def test_regularizers_nonnegative(E, seed):
    r = np.random.default_rng(seed)
    A = r.random((4, 4))
    A /= A.sum(axis=1, keepdims=True) * r.uniform(1.0, 2.0)  # row sums <= 1
    assert smoothness(E, A).item() >= -1e-12
    assert sparsity(A).item() >= 0
    assert connectivity(A).item() >= 0


def test_smoothness_zero_iff_constant_for_connected_graph(rng):
    A = rng.random((4, 4)) + 0.1
    E = rng.normal(size=(4, 3))
    assert smoothness(E, A).item() > 1e-6
    assert abs(smoothness(np.tile(E[:1], (4, 1)), A).item()) < 1e-12


def test_graph_reg_loss_averages_intervals(rng):
    E, A = rng.normal(size=(3, 4, 2)), rng.random((3, 4, 4))
    per = [0.1 * smoothness(E[m], A[m]).item() + 0.2 * sparsity(A[m]).item()
           + 0.3 * connectivity(A[m]).item() for m in range(3)]
    assert graph_reg_loss(E, A, 0.1, 0.2, 0.3).item() == pytest.approx(np.mean(per), rel=1e-12)


def test_gin_identity_case(rng):
    layer = GINLayer(3, 8, rng, mlp=False)
    Hm = rng.normal(size=(4, 5, 3))
    np.testing.assert_array_equal(layer(Hm, np.zeros((4, 4))).data, Hm)


def test_gin_hand_example():
    layer = GINLayer(1, 4, np.random.default_rng(0), mlp=False)
    layer.eps.data[:] = 0.5
    Hm = np.array([[[1.0]], [[2.0]], [[3.0]]])  # K=3, g=1, U=1
    A = np.array([[0, 1, 0], [0.5, 0, 0.5], [0, 0, 0]])
    expect = 1.5 * Hm[:, 0, 0] + A @ Hm[:, 0, 0]
    np.testing.assert_allclose(layer(Hm, A).data[:, 0, 0], expect, atol=1e-12)


def test_gin_permutation_equivariance(rng):
    gin = GIN(4, 8, 2, rng)
    for _ in range(5):
        Hm, A = rng.normal(size=(5, 3, 4)), rng.random((5, 5))
        p = rng.permutation(5)
        z = gin(Hm, A).data
        zp = gin(Hm[p], A[np.ix_(p, p)]).data
        assert np.max(np.abs(zp - z[p])) < 1e-10


def test_gin_shape_error(rng):
    with pytest.raises(ShapeError):
        GINLayer(3, 4, rng)(np.ones((4, 2, 3)), np.ones((3, 3)))


def test_recon_loss_examples(rng):
    x = rng.normal(size=(2, 3, 8))
    assert recon_loss(x, x).item() == 0.0
    ref = np.mean([(x[i, k, l] - 0.25) ** 2 for i in range(2) for k in range(3) for l in range(8)])
    assert recon_loss(x, np.full(x.shape, 0.25)).item() == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ShapeError):
        recon_loss(x, x[:1])


def test_total_loss():
    assert total_loss(0.0, 0.0, 0.0).item() == 0
    assert total_loss(1.0, 2.0, 3.0).item() == 6
    with pytest.raises(NumericError, match="graph"):
        total_loss(1.0, np.nan, 3.0)


def test_total_loss_gradient_is_sum_of_parts(rng):
    W = nx.parameter(rng.normal(size=(3, 3)))
    x = rng.normal(size=(4, 3))
    parts = [lambda: (nx.matmul(x, W) ** 2).mean(), lambda: nx.matmul(x, W).tanh().sum(),
             lambda: (W * W).sum()]
    grads = []
    for f in parts:
        W.grad = None
        f().backward()
        grads.append(W.grad.copy())
    W.grad = None
    total_loss(*[f() for f in parts]).backward()
    np.testing.assert_allclose(W.grad, sum(grads), atol=1e-12)


def test_temporal_embedding_is_per_variable(rng):
    emb = TemporalEmbedder(4, 1, 4, rng)
    x = rng.normal(size=(1, 3, 16))
    x2 = x.copy()
    x2[0, 1] += rng.normal(size=16)
    H, H2 = emb(x).data, emb(x2).data
    assert H.shape == (1, 3, 16, 4)
    np.testing.assert_array_equal(H[0, [0, 2]], H2[0, [0, 2]])
    assert not np.allclose(H[0, 1], H2[0, 1])


def test_temporal_embedding_width_projection(rng):
    emb = TemporalEmbedder(4, 1, 4, rng, width=6)
    assert emb(rng.normal(size=(2, 3, 8))).shape == (2, 3, 8, 4)


def test_graph_model_forward(rng):
    hp = GraphHyper(g=4, delta=2)
    model = GraphModel(3, rng, hp, embed_dim=4, s4_layers=1, state_size=4, gin_hidden=8)
    x = rng.normal(size=(2, 3, 16))
    x_rec, reg, E, A = model(x)
    assert x_rec.shape == x.shape and E.shape == (2, 4, 3, 4) and A.shape == (2, 4, 3, 3)
    assert np.all(A.data >= 0)
    with pytest.raises(ConfigError):
        model(rng.normal(size=(2, 3, 18)))


def test_graph_model_end_to_end_gradient(rng):
    hp = GraphHyper(g=4, delta=2, zeta=0.4)
    model = GraphModel(3, rng, hp, embed_dim=3, s4_layers=1, state_size=2, gin_layers=1, gin_hidden=4)
    x = rng.normal(size=(1, 3, 8))
    target = rng.normal(size=x.shape)

    def build(Wq, Wr, head_w):
        model.W_q, model.W_r, model.head.weight = Wq, Wr, head_w
        x_rec, reg, _, _ = model(x)
        return total_loss(0.0, reg, recon_loss(target, x_rec))

    arrays = [model.W_q.data.copy(), model.W_r.data.copy(), model.head.weight.data.copy()]
    assert grad_check(build, arrays) < 1e-3


def test_hyper_checks():
    with pytest.raises(ConfigError):
        GraphHyper(g=5).check(4, 16)
    with pytest.raises(ConfigError):
        GraphHyper(delta=4).check(4, 16)
    GraphHyper(g=16, delta=3).check(4, 128)


def test_adjacency_rows(rng):
    rows = adjacency_rows(rng.random((2, 3, 3)), observation_id=7)
    assert len(rows) == 18 and rows[0][:4] == (7, 0, 0, 0)
