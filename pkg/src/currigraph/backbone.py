"""Differentiable building blocks: adjacency normalization, GCN/GAT layers, MLPs.

Layers are pure functions of ``(adjacency, features, params)``. Parameters
live in plain nested dicts/lists of tensors ("param trees"); the trainer owns
them and hands sub-trees to the layers.
"""

from __future__ import annotations

import math
from typing import Any, Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
ATTENTION_SLOPE = 0.2

ParamTree = Any  # nested dict / list with torch.Tensor leaves


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


# -- param trees -------------------------------------------------------------

def iter_leaves(tree: ParamTree, prefix: str = "") -> Iterator[tuple[str, torch.Tensor]]:
    """Yield ``(dotted_name, tensor)`` pairs in a deterministic order."""
    if isinstance(tree, torch.Tensor):
        yield prefix, tree
    elif isinstance(tree, dict):
        for key in sorted(tree):
            yield from iter_leaves(tree[key], f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(tree, (list, tuple)):
        for i, sub in enumerate(tree):
            yield from iter_leaves(sub, f"{prefix}.{i}" if prefix else str(i))
    elif tree is not None:
        raise TypeError(f"unsupported param tree node at {prefix!r}: {type(tree).__name__}")


def flatten_params(tree: ParamTree) -> dict[str, torch.Tensor]:
    return dict(iter_leaves(tree))


def map_leaves(fn: Callable[[torch.Tensor], torch.Tensor], tree: ParamTree) -> ParamTree:
    if isinstance(tree, torch.Tensor):
        return fn(tree)
    if isinstance(tree, dict):
        return {k: map_leaves(fn, v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [map_leaves(fn, v) for v in tree]
    if isinstance(tree, tuple):
        return tuple(map_leaves(fn, v) for v in tree)
    return tree


def replace_leaves(tree: ParamTree, values: dict[str, torch.Tensor], prefix: str = "") -> ParamTree:
    """Rebuild ``tree`` taking each leaf from ``values`` by dotted name."""
    if isinstance(tree, torch.Tensor):
        return values[prefix]
    if isinstance(tree, dict):
        return {k: replace_leaves(v, values, f"{prefix}.{k}" if prefix else str(k))
                for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        out = [replace_leaves(v, values, f"{prefix}.{i}" if prefix else str(i))
               for i, v in enumerate(tree)]
        return out if isinstance(tree, list) else tuple(out)
    return tree


def clone_params(tree: ParamTree, requires_grad: bool = True) -> ParamTree:
    return map_leaves(lambda t: t.detach().clone().requires_grad_(requires_grad), tree)


def all_finite(tree: ParamTree) -> bool:
    return all(bool(torch.isfinite(t).all()) for _, t in iter_leaves(tree))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 dtype: torch.dtype) -> torch.Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return torch.as_tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def init_linear(in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                dtype: torch.dtype = DTYPE) -> dict[str, torch.Tensor]:
    params = {"weight": uniform_init(rng, (in_dim, out_dim), in_dim, dtype)}
    if bias:
        params["bias"] = uniform_init(rng, (out_dim,), in_dim, dtype)
    return params


def init_gat(in_dim: int, out_dim: int, rng: np.random.Generator,
             dtype: torch.dtype = DTYPE) -> dict[str, torch.Tensor]:
    params = init_linear(in_dim, out_dim, rng, dtype=dtype)
    params["att_src"] = uniform_init(rng, (out_dim,), out_dim, dtype)
    params["att_dst"] = uniform_init(rng, (out_dim,), out_dim, dtype)
    return params


def init_mlp(widths: list[int], rng: np.random.Generator,
             dtype: torch.dtype = DTYPE) -> dict[str, list]:
    """``widths = [in, hidden..., out]``; ``len(widths) - 1`` affine layers."""
    if len(widths) < 2:
        raise ValueError("an MLP needs at least input and output widths")
    return {"layers": [init_linear(a, b, rng, dtype=dtype) for a, b in zip(widths, widths[1:])]}


def identity_mlp(dim: int, depth: int = 1, dtype: torch.dtype = DTYPE) -> dict[str, list]:
    layers = [{"weight": torch.eye(dim, dtype=dtype), "bias": torch.zeros(dim, dtype=dtype)}
              for _ in range(depth)]
    return {"layers": layers}


# -- activations -------------------------------------------------------------

_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": F.relu,
    "leaky_relu": lambda x: F.leaky_relu(x, ATTENTION_SLOPE),
    "elu": F.elu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


def activation_fn(name: str | None) -> Callable[[torch.Tensor], torch.Tensor]:
    if name is None:
        return _ACTIVATIONS["identity"]
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}") from None


# -- adjacency ---------------------------------------------------------------

def edges_to_adjacency(edges: np.ndarray, n: int, sparse: bool = False,
                       dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Symmetric 0/1 adjacency from canonical (src < dst) pairs."""
    e = torch.as_tensor(np.asarray(edges, dtype=np.int64).reshape(-1, 2))
    idx = torch.cat([e, e.flip(1)], dim=0).T
    vals = torch.ones(idx.shape[1], dtype=dtype)
    adj = torch.sparse_coo_tensor(idx, vals, (n, n)).coalesce()
    return adj if sparse else adj.to_dense()


def normalize_adjacency(A: torch.Tensor, add_self_loops: bool = True) -> torch.Tensor:
    """Symmetric normalization ``D^-1/2 (A + I) D^-1/2``; sparse input stays sparse."""
    if A.dim() != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got {tuple(A.shape)}")
    n = A.shape[0]
    if A.is_sparse:
        A = A.coalesce()
        idx, vals = A.indices(), A.values()
        if bool((vals < 0).any()):
            raise ValueError("adjacency has negative entries")
        if add_self_loops:
            loops = torch.arange(n).repeat(2, 1)
            idx = torch.cat([idx, loops], dim=1)
            vals = torch.cat([vals, torch.ones(n, dtype=vals.dtype)])
            A = torch.sparse_coo_tensor(idx, vals, (n, n)).coalesce()
            idx, vals = A.indices(), A.values()
        deg = torch.zeros(n, dtype=vals.dtype).index_add_(0, idx[0], vals)
        inv = torch.where(deg > 0, deg.clamp_min(1e-300).rsqrt(), torch.zeros_like(deg))
        return torch.sparse_coo_tensor(idx, inv[idx[0]] * vals * inv[idx[1]], (n, n)).coalesce()
    if bool((A < 0).any()):
        raise ValueError("adjacency has negative entries")
    if add_self_loops:
        A = A + torch.eye(n, dtype=A.dtype)
    deg = A.sum(dim=1)
    inv = torch.where(deg > 0, deg.clamp_min(1e-300).rsqrt(), torch.zeros_like(deg))
    return inv[:, None] * A * inv[None, :]


def _propagate(A: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
    return torch.sparse.mm(A, H) if A.is_sparse else A @ H


def _check_rows(A: torch.Tensor, X: torch.Tensor) -> None:
    if A.shape[0] != A.shape[1] or A.shape[1] != X.shape[0]:
        raise ShapeError(f"adjacency {tuple(A.shape)} does not match {X.shape[0]} feature rows")


def _check_in_dim(X: torch.Tensor, weight: torch.Tensor, what: str) -> None:
    if X.dim() != 2 or X.shape[1] != weight.shape[0]:
        raise ShapeError(f"{what}: input feature dim {X.shape[-1]} != weight rows {weight.shape[0]}")


# -- layers ------------------------------------------------------------------

def gcn_layer(A_norm: torch.Tensor, X: torch.Tensor, params: dict,
              activation: str | None = "relu") -> torch.Tensor:
    """``act(A_norm @ X @ W + b)``."""
    _check_rows(A_norm, X)
    _check_in_dim(X, params["weight"], "gcn_layer")
    out = _propagate(A_norm, X @ params["weight"])
    if "bias" in params:
        out = out + params["bias"]
    return activation_fn(activation)(out)


def gat_attention(A: torch.Tensor, H: torch.Tensor, params: dict) -> torch.Tensor:
    """Row-stochastic attention over neighbours plus self, given projected features ``H``."""
    n = H.shape[0]
    mask = (A.to_dense() if A.is_sparse else A) > 0
    mask = mask | torch.eye(n, dtype=torch.bool)
    logits = F.leaky_relu((H @ params["att_src"])[:, None] + (H @ params["att_dst"])[None, :],
                          ATTENTION_SLOPE)
    logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=1)


def gat_layer(A: torch.Tensor, X: torch.Tensor, params: dict, activation: str | None = "relu",
              return_attention: bool = False):
    """Single-head graph attention over existing edges plus self-loops.

    Only the sparsity pattern of ``A`` is used (entries > 0 are edges).
    """
    _check_rows(A, X)
    _check_in_dim(X, params["weight"], "gat_layer")
    H = X @ params["weight"]
    att = gat_attention(A, H, params)
    out = att @ H
    if "bias" in params:
        out = out + params["bias"]
    out = activation_fn(activation)(out)
    return (out, att) if return_attention else out


def mlp(X: torch.Tensor, params: dict, activation: str | None = "relu") -> torch.Tensor:
    """Row-wise MLP; the activation is applied between layers, not after the last one."""
    layers = params["layers"]
    act = activation_fn(activation)
    H = X
    for i, layer in enumerate(layers):
        _check_in_dim(H, layer["weight"], f"mlp layer {i}")
        H = H @ layer["weight"]
        if "bias" in layer:
            H = H + layer["bias"]
        if i < len(layers) - 1:
            H = act(H)
    return H


def gat_encoder(A: torch.Tensor, X: torch.Tensor, layers: list[dict],
                activation: str | None = "relu") -> torch.Tensor:
    """Stack of GAT layers; the last layer is linear."""
    H = X
    for i, layer in enumerate(layers):
        H = gat_layer(A, H, layer, activation if i < len(layers) - 1 else None)
    return H


def gcn_encoder(A_norm: torch.Tensor, X: torch.Tensor, layers: list[dict],
                activation: str | None = "relu") -> torch.Tensor:
    H = X
    for i, layer in enumerate(layers):
        H = gcn_layer(A_norm, H, layer, activation if i < len(layers) - 1 else None)
    return H


# -- gradient checking -------------------------------------------------------

def grad_check(fn: Callable[[ParamTree], torch.Tensor], params: ParamTree,
               eps: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    For each leaf, the error is ``max|analytic - fd| / max(max|analytic|,
    max|fd|, 1e-8)``; the result is the maximum over leaves. Run in float64.
    """
    base = clone_params(params, requires_grad=False)
    names, leaves = zip(*iter_leaves(base)) if flatten_params(base) else ((), ())
    leaves = [t.detach().clone().requires_grad_(True) for t in leaves]
    value = fn(replace_leaves(base, dict(zip(names, leaves))))
    if not torch.isfinite(value).all():
        raise NumericalError(f"grad_check: function value is not finite ({value})")
    grads = torch.autograd.grad(value, leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for name, leaf, grad in zip(names, leaves, grads):
            analytic = torch.zeros_like(leaf) if grad is None else grad
            numeric = torch.zeros_like(leaf)
            flat = leaf.detach().clone().reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                vals = []
                for step in (eps, -eps):
                    flat[j] = orig + step
                    probe = dict(zip(names, [l.detach() for l in leaves]))
                    probe[name] = flat.reshape(leaf.shape)
                    v = fn(replace_leaves(base, probe))
                    if not torch.isfinite(v).all():
                        raise NumericalError(f"grad_check: non-finite value probing {name}[{j}]")
                    vals.append(float(v))
                flat[j] = orig
                numeric.reshape(-1)[j] = (vals[0] - vals[1]) / (2 * eps)
            diff = (analytic - numeric).abs().max().item() if leaf.numel() else 0.0
            scale = max(analytic.abs().max().item() if leaf.numel() else 0.0,
                        numeric.abs().max().item() if leaf.numel() else 0.0, 1e-8)
            worst = max(worst, diff / scale)
    return worst
