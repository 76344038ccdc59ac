"""Multi-scale pooling encoder, cross-graph translator and unpooling decoder.

Level 0 is the original graph and ``assigns[l]`` (n_l x n_{l+1}) maps level l
to level l+1. Coarsening uses ``X' = P^T X`` and ``A' = P^T A P``. The target
graph is pooled by its own surrogates and those assignments expand the
translated coarsest features back down: ``X_hat[l] = assigns[l] @ X_hat[l+1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .backbone import (DTYPE, ShapeError, gcn_layer, init_linear, init_mlp, mlp,
                       normalize_adjacency)
from .graph import Graph

SIMPLEX_TOL = 1e-6


class LevelSizeError(ValueError):
    """Level sizes do not shrink, or disagree between graphs."""


class CoderConfigError(ValueError):
    pass


@dataclass
class Hierarchy:
    levels: list[tuple[torch.Tensor, torch.Tensor]]
    assigns: list[torch.Tensor] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.assigns)

    @property
    def sizes(self) -> list[int]:
        return [int(X.shape[0]) for _, X in self.levels]

    def adjacency(self, level: int) -> torch.Tensor:
        return self.levels[level][0]

    def features(self, level: int) -> torch.Tensor:
        return self.levels[level][1]

    def detach(self) -> "Hierarchy":
        return Hierarchy([(A.detach(), X.detach()) for A, X in self.levels],
                         [P.detach() for P in self.assigns])


@dataclass
class CoderParams:
    pool_surrogates: list[dict]
    unpool_surrogates: list[dict]
    translator: dict
    translator_activation: str = "relu"

    def tree(self) -> dict:
        return {"pool": self.pool_surrogates, "unpool": self.unpool_surrogates,
                "translator": self.translator}


def init_coder_params(source_dim: int, target_dim: int, level_sizes: Sequence[int],
                      rng: np.random.Generator, dtype: torch.dtype = DTYPE) -> CoderParams:
    """One-layer GCN surrogates per level; translator is a 2-layer MLP source_dim -> target_dim."""
    pool = [init_linear(source_dim, k, rng, dtype=dtype) for k in level_sizes]
    unpool = [init_linear(target_dim, k, rng, dtype=dtype) for k in level_sizes]
    translator = init_mlp([source_dim, source_dim, target_dim], rng, dtype=dtype)
    return CoderParams(pool, unpool, translator)


def graph_tensors(g: Graph, dtype: torch.dtype = DTYPE) -> tuple[torch.Tensor, torch.Tensor]:
    """Dense level-0 adjacency and feature tensors for ``g``."""
    A = torch.as_tensor(g.dense_adjacency(), dtype=dtype)
    X = torch.tensor(np.array(g.features), dtype=dtype)
    return A, X


def check_level_sizes(level_sizes: Sequence[int], num_nodes: int) -> None:
    sizes = [num_nodes, *level_sizes]
    for a, b in zip(sizes, sizes[1:]):
        if b < 1 or b >= a:
            raise LevelSizeError(
                f"level sizes must strictly decrease from {num_nodes} nodes, got {list(level_sizes)}")


def check_simplex(P: torch.Tensor, tol: float = SIMPLEX_TOL) -> None:
    with torch.no_grad():
        if bool((P < -tol).any()) or bool(((P.sum(dim=1) - 1).abs() > tol).any()):
            raise ValueError("assignment rows must be non-negative and sum to 1")


def compute_assignment(A: torch.Tensor, X: torch.Tensor, surrogate: dict,
                       out_size: int) -> torch.Tensor:
    """``softmax(GCN(A, X))`` row-wise: soft assignment of nodes to ``out_size`` supernodes."""
    n = X.shape[0]
    if out_size >= n:
        raise LevelSizeError(f"cannot pool {n} nodes into {out_size} supernodes")
    width = surrogate["weight"].shape[1]
    if width != out_size:
        raise ShapeError(f"surrogate output width {width} != level size {out_size}")
    logits = gcn_layer(normalize_adjacency(A), X, surrogate, activation=None)
    return torch.softmax(logits, dim=1)


def coarsen(A: torch.Tensor, X: torch.Tensor, P: torch.Tensor,
            validate: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    if P.shape[0] != X.shape[0] or A.shape != (P.shape[0], P.shape[0]):
        raise ShapeError(f"assignment {tuple(P.shape)} incompatible with A {tuple(A.shape)}, "
                         f"X {tuple(X.shape)}")
    if validate:
        check_simplex(P)
    AP = torch.sparse.mm(A, P) if A.is_sparse else A @ P
    return P.T @ AP, P.T @ X


def build_hierarchy(A: torch.Tensor, X: torch.Tensor, surrogates: Sequence[dict],
                    level_sizes: Sequence[int]) -> Hierarchy:
    if len(surrogates) != len(level_sizes):
        raise CoderConfigError(f"{len(surrogates)} surrogates for {len(level_sizes)} levels")
    check_level_sizes(level_sizes, X.shape[0])
    levels = [(A, X)]
    assigns = []
    for surrogate, size in zip(surrogates, level_sizes):
        P = compute_assignment(A, X, surrogate, size)
        A, X = coarsen(A, X, P, validate=False)
        levels.append((A, X))
        assigns.append(P)
    return Hierarchy(levels, assigns)


def encode(graph: Graph | tuple[torch.Tensor, torch.Tensor], params: CoderParams,
           level_sizes: Sequence[int], side: str = "source") -> Hierarchy:
    """Pool ``graph`` through its surrogates (``side`` picks pool or unpool surrogates)."""
    A, X = graph_tensors(graph) if isinstance(graph, Graph) else graph
    surrogates = params.pool_surrogates if side == "source" else params.unpool_surrogates
    return build_hierarchy(A, X, surrogates, level_sizes)


def translate(X_coarsest: torch.Tensor, params: CoderParams,
              target_size: int | None = None) -> torch.Tensor:
    if target_size is not None and X_coarsest.shape[0] != target_size:
        raise CoderConfigError(
            f"coarsest sizes differ: source {X_coarsest.shape[0]} vs target {target_size}")
    return mlp(X_coarsest, params.translator, params.translator_activation)


def decode(X_hat_coarsest: torch.Tensor, target: Hierarchy,
           params: CoderParams | None = None) -> list[torch.Tensor]:
    """Expand coarsest features down the target hierarchy; index i holds level i."""
    if params is not None and len(params.unpool_surrogates) != target.depth:
        raise CoderConfigError(
            f"hierarchy has {target.depth} levels but {len(params.unpool_surrogates)} "
            "unpool surrogates are configured")
    if X_hat_coarsest.shape[0] != target.sizes[-1]:
        raise CoderConfigError(
            f"coarsest rows {X_hat_coarsest.shape[0]} != target coarsest size {target.sizes[-1]}")
    out = [X_hat_coarsest]
    for U in reversed(target.assigns):
        out.append(U @ out[-1])
    return out[::-1]


def reconstruction_loss(reconstructed: Sequence[torch.Tensor], target: Hierarchy) -> torch.Tensor:
    """Per-level mean squared error, averaged over levels."""
    if len(reconstructed) != len(target.levels):
        raise ShapeError(f"{len(reconstructed)} reconstructed levels vs {len(target.levels)}")
    losses = []
    for l, (R, (_, X)) in enumerate(zip(reconstructed, target.levels)):
        if R.shape != X.shape:
            raise ShapeError(f"level {l}: reconstructed {tuple(R.shape)} vs {tuple(X.shape)}")
        losses.append(((R - X) ** 2).mean())
    return torch.stack(losses).mean()
