import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from currigraph.backbone import grad_check, identity_mlp, init_linear
from currigraph.coder import (CoderConfigError, Hierarchy, LevelSizeError, build_hierarchy,
                              coarsen, compute_assignment, decode, encode, init_coder_params,
                              reconstruction_loss, translate)
from currigraph.graph import generate_sbm_pair

D = torch.float64


def rand_graph(n, d, seed, p=0.3):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < p, 1)
    return torch.as_tensor((upper | upper.T).astype(float)), torch.as_tensor(rng.standard_normal((n, d)))


def test_equal_logits_give_uniform_rows():
    A, X = rand_graph(6, 3, 0)
    zero = {"weight": torch.zeros(3, 4, dtype=D), "bias": torch.zeros(4, dtype=D)}
    assert torch.allclose(compute_assignment(A, X, zero, 4), torch.full((6, 4), 0.25, dtype=D))


@settings(max_examples=40)
@given(n=st.integers(3, 20), seed=st.integers(0, 10_000))
def test_assignment_rows_are_simplex(n, seed):
    A, X = rand_graph(n, 4, seed)
    P = compute_assignment(A, X, init_linear(4, n - 1, np.random.default_rng(seed)), n - 1)
    assert bool((P >= 0).all())
    assert torch.allclose(P.sum(1), torch.ones(n, dtype=D), atol=1e-6)


def test_assignment_rejects_non_shrinking_level():
    A, X = rand_graph(4, 2, 0)
    with pytest.raises(LevelSizeError):
        compute_assignment(A, X, init_linear(2, 4, np.random.default_rng(0)), 4)


def test_assignment_gradient_matches_finite_differences():
    A, X = rand_graph(7, 3, 1)
    target = torch.randn(7, 3, dtype=D)
    params = init_linear(3, 3, np.random.default_rng(1))
    assert grad_check(lambda p: (compute_assignment(A, X, p, 3) * target).sum(), params) <= 1e-4


def test_coarsen_identity_and_total_aggregation():
    A, X = rand_graph(5, 3, 2)
    A2, X2 = coarsen(A, X, torch.eye(5, dtype=D))
    assert torch.equal(A2, A) and torch.equal(X2, X)
    A1, X1 = coarsen(A, X, torch.ones(5, 1, dtype=D))
    assert torch.allclose(A1, A.sum().reshape(1, 1))
    assert torch.allclose(X1, X.sum(0, keepdim=True))
    with pytest.raises(ValueError):
        coarsen(A, X, torch.full((5, 2), 0.6, dtype=D))


def test_coarsen_block_indicator_counts_cross_block_mass():
    src, _ = generate_sbm_pair([6, 6], [5, 5], 0.6, 0.2, 0.0, seed=4)
    A = torch.as_tensor(src.dense_adjacency())
    labels = np.asarray(src.labels)
    P = torch.as_tensor(np.eye(2)[labels])
    A2, _ = coarsen(A, torch.zeros(12, 1, dtype=D), P)
    cross = sum(1 for u, v in src.edge_set() if labels[u] != labels[v])
    assert A2[0, 1].item() == pytest.approx(cross)
    assert torch.allclose(A2, A2.T) and bool((A2 >= 0).all())


def test_encode_sizes_chain_and_single_supernode():
    A, X = rand_graph(30, 4, 3)
    params = init_coder_params(4, 4, [10, 3], np.random.default_rng(0))
    hier = encode((A, X), params, [10, 3])
    assert hier.sizes == [30, 10, 3]
    for l, P in enumerate(hier.assigns):
        assert torch.allclose(hier.features(l + 1), P.T @ hier.features(l))
        assert torch.allclose(hier.adjacency(l + 1), P.T @ hier.adjacency(l) @ P)
    one = encode((A, X), init_coder_params(4, 4, [1], np.random.default_rng(0)), [1])
    assert one.sizes == [30, 1]
    assert torch.allclose(one.features(1), X.sum(0, keepdim=True))
    with pytest.raises(LevelSizeError):
        encode((A, X), params, [10, 10])
    with pytest.raises(CoderConfigError):
        build_hierarchy(A, X, params.pool_surrogates, [10])


def test_encode_is_deterministic():
    A, X = rand_graph(20, 3, 5)
    params = init_coder_params(3, 3, [6, 2], np.random.default_rng(9))
    h1, h2 = encode((A, X), params, [6, 2]), encode((A, X), params, [6, 2])
    assert all(torch.equal(a, b) for a, b in zip(h1.assigns, h2.assigns))


def test_translate_identity_rows_and_size_check():
    params = init_coder_params(3, 3, [2], np.random.default_rng(0))
    params.translator = identity_mlp(3)
    X = torch.randn(4, 3, dtype=D)
    assert torch.allclose(translate(X, params), X)
    params = init_coder_params(3, 5, [2], np.random.default_rng(1))
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(translate(X[perm], params), translate(X, params)[perm])
    assert translate(X, params).shape == (4, 5)
    with pytest.raises(CoderConfigError, match="4 vs target 2"):
        translate(X, params, target_size=2)
    assert grad_check(lambda p: translate(X, params.__class__([], [], p)).pow(2).sum(),
                      params.translator) <= 1e-4


def test_decode_identity_and_single_supernode():
    Xc = torch.randn(3, 2, dtype=D)
    eye = Hierarchy([(torch.zeros(3, 3, dtype=D), Xc)] * 3, [torch.eye(3, dtype=D)] * 2)
    assert all(torch.equal(R, Xc) for R in decode(Xc, eye))
    U = torch.tensor([[1.0], [1.0], [1.0]], dtype=D)
    hier = Hierarchy([(torch.zeros(3, 3, dtype=D), torch.zeros(3, 2, dtype=D)),
                      (torch.zeros(1, 1, dtype=D), torch.zeros(1, 2, dtype=D))], [U])
    coarse = torch.tensor([[2.0, -1.0]], dtype=D)
    out = decode(coarse, hier)
    assert torch.allclose(out[0], U * coarse) and [r.shape[0] for r in out] == [3, 1]
    params = init_coder_params(2, 2, [2, 1], np.random.default_rng(0))
    with pytest.raises(CoderConfigError):
        decode(coarse, hier, params)


def test_reconstruction_loss_cases():
    A, X = rand_graph(5, 3, 6)
    hier = encode((A, X), init_coder_params(3, 3, [2], np.random.default_rng(0)), [2])
    feats = [hier.features(l) for l in range(2)]
    assert reconstruction_loss(feats, hier).item() == 0.0
    assert reconstruction_loss([f + 0.3 for f in feats], hier).item() == pytest.approx(0.09)
    rng = np.random.default_rng(1)
    rec = [torch.as_tensor(rng.standard_normal(f.shape)) for f in feats]
    brute = 0.0
    for R, F in zip(rec, feats):
        total = 0.0
        for i in range(F.shape[0]):
            for j in range(F.shape[1]):
                total += (R[i, j].item() - F[i, j].item()) ** 2
        brute += total / F.numel()
    assert reconstruction_loss(rec, hier).item() == pytest.approx(brute / 2, rel=1e-12)
    with pytest.raises(ValueError):
        reconstruction_loss([feats[0]], hier)
    with pytest.raises(ValueError):
        reconstruction_loss([feats[0], feats[0]], hier)
