import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from currigraph.backbone import (NumericalError, ShapeError, edges_to_adjacency, gat_attention,
                                 gat_encoder, gat_layer, gcn_layer, grad_check, identity_mlp,
                                 init_gat, init_linear, init_mlp, iter_leaves, mlp,
                                 normalize_adjacency, replace_leaves)

D = torch.float64


def rand_adj(n, p, seed):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < p, 1)
    return torch.as_tensor((upper | upper.T).astype(float))


def test_normalize_empty_graph_gives_identity():
    assert torch.equal(normalize_adjacency(torch.zeros(2, 2, dtype=D)), torch.eye(2, dtype=D))


def test_normalize_single_edge_hand_value():
    # A + I = all ones, D = diag(2, 2): every entry 1 / sqrt(2 * 2)
    A = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=D)
    assert torch.allclose(normalize_adjacency(A), torch.full((2, 2), 0.5, dtype=D))


def test_normalize_sparse_matches_dense_and_rejects_negative():
    A = rand_adj(9, 0.4, 0)
    sparse = normalize_adjacency(A.to_sparse()).to_dense()
    assert torch.allclose(sparse, normalize_adjacency(A))
    assert torch.allclose(sparse, sparse.T)
    with pytest.raises(ValueError):
        normalize_adjacency(-A)


def test_edges_to_adjacency_symmetric():
    A = edges_to_adjacency(np.array([[0, 1], [1, 3]]), 4)
    assert torch.equal(A, A.T) and A.sum() == 4


def test_gcn_identity_and_zero():
    X = torch.randn(5, 3, dtype=D)
    ident = {"weight": torch.eye(3, dtype=D), "bias": torch.zeros(3, dtype=D)}
    assert torch.allclose(gcn_layer(torch.eye(5, dtype=D), X, ident, activation="identity"), X)
    params = init_linear(3, 4, np.random.default_rng(0), bias=False)
    out = gcn_layer(normalize_adjacency(rand_adj(5, 0.5, 1)), torch.zeros(5, 3, dtype=D), params,
                    activation="leaky_relu")
    assert torch.equal(out, torch.zeros(5, 4, dtype=D))


def test_shape_errors_name_dimension():
    params = init_linear(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError, match="input feature dim 2"):
        gcn_layer(torch.eye(5, dtype=D), torch.zeros(5, 2, dtype=D), params)
    with pytest.raises(ShapeError):
        gat_layer(torch.eye(4, dtype=D), torch.zeros(5, 3, dtype=D), init_gat(3, 2, np.random.default_rng(0)))


def test_gat_single_node_attends_to_itself():
    params = init_gat(3, 2, np.random.default_rng(0))
    _, att = gat_layer(torch.zeros(1, 1, dtype=D), torch.randn(1, 3, dtype=D), params,
                       return_attention=True)
    assert att.item() == 1.0


@settings(max_examples=50)
@given(st.integers(1, 25), st.floats(0, 1), st.integers(0, 1000))
def test_gat_attention_rows_are_simplex_over_neighbours(n, p, seed):
    A = rand_adj(n, p, seed)
    params = init_gat(4, 3, np.random.default_rng(seed))
    H = torch.as_tensor(np.random.default_rng(seed + 1).standard_normal((n, 3)))
    att = gat_attention(A, H, params)
    assert torch.allclose(att.sum(1), torch.ones(n, dtype=D), atol=1e-6)
    allowed = (A > 0) | torch.eye(n, dtype=torch.bool)
    assert bool((att[~allowed] == 0).all())


def test_mlp_identity_and_row_permutation():
    X = torch.randn(6, 4, dtype=D)
    assert torch.allclose(mlp(X, identity_mlp(4)), X)
    params = init_mlp([4, 7, 2], np.random.default_rng(0))
    perm = torch.randperm(6)
    assert torch.allclose(mlp(X[perm], params), mlp(X, params)[perm])


@pytest.mark.parametrize("layer", ["gcn", "gat"])
def test_layers_are_permutation_equivariant(layer):
    A, X = rand_adj(8, 0.4, 3), torch.randn(8, 3, dtype=D)
    perm = torch.randperm(8)
    rng = np.random.default_rng(0)
    if layer == "gcn":
        params = init_linear(3, 5, rng)
        f = lambda A_, X_: gcn_layer(normalize_adjacency(A_), X_, params)  # noqa: E731
    else:
        params = init_gat(3, 5, rng)
        f = lambda A_, X_: gat_layer(A_, X_, params)  # noqa: E731
    assert torch.allclose(f(A[perm][:, perm], X[perm]), f(A, X)[perm])


def test_grad_check_linear_and_quadratic():
    p = {"a": torch.randn(3, 2, dtype=D), "b": [torch.randn(4, dtype=D)]}
    total = lambda t: sum(x.sum() for _, x in iter_leaves(t))  # noqa: E731
    assert grad_check(total, p) < 1e-8
    half_sq = lambda t: 0.5 * sum((x ** 2).sum() for _, x in iter_leaves(t))  # noqa: E731
    assert grad_check(half_sq, p, eps=1e-5) <= 1e-8


def test_grad_check_rejects_non_finite():
    with pytest.raises(NumericalError):
        grad_check(lambda t: t["a"].sum() / 0.0, {"a": torch.ones(2, dtype=D)})


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=D)

    assert grad_check(lambda t: Wrong.apply(t["a"]), {"a": torch.tensor([1.0, 2.0, 3.0], dtype=D)}) > 0.1


def test_layer_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    A = rand_adj(7, 0.5, 4)
    X = torch.as_tensor(rng.standard_normal((7, 3)))
    gcn = init_linear(3, 4, rng)
    gat = [init_gat(3, 4, rng), init_gat(4, 2, rng)]
    head = init_mlp([4, 5, 1], rng)
    A_norm = normalize_adjacency(A)
    assert grad_check(lambda p: gcn_layer(A_norm, X, p, "tanh").pow(2).sum(), gcn) <= 1e-4
    assert grad_check(lambda p: gat_encoder(A, X, p, "elu").pow(2).sum(), gat) <= 1e-4
    assert grad_check(lambda p: mlp(X @ torch.ones(3, 4, dtype=D), p, "tanh").sum(), head) <= 1e-4
    composite = {"gcn": gcn, "mlp": head}
    assert grad_check(lambda p: mlp(gcn_layer(A_norm, X, p["gcn"], "tanh"), p["mlp"], "tanh").pow(2).mean(),
                      composite) <= 1e-4


def test_param_tree_names_are_stable():
    tree = {"b": [torch.zeros(1)], "a": {"y": torch.ones(2), "x": torch.ones(1)}}
    assert [n for n, _ in iter_leaves(tree)] == ["a.x", "a.y", "b.0"]
    rebuilt = replace_leaves(tree, {"a.x": torch.tensor([5.0]), "a.y": torch.ones(2), "b.0": torch.zeros(1)})
    assert rebuilt["a"]["x"].item() == 5.0
