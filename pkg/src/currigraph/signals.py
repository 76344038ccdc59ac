"""Maskable graph signals (node attributes and edges) at every hierarchy level.

Sampling returns a :class:`SignalBatch`: the sampled indices plus their
ground truth, detached from autograd. Masking hides those entries from the
student; predictions and per-signal losses are computed batch-wise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .backbone import DTYPE, NumericalError, gat_encoder, init_linear, uniform_init
from .coder import Hierarchy

PROB_CLAMP = 1e-7


class SignalType(str, enum.Enum):
    ATTRIBUTE = "attribute"
    EDGE = "edge"


@dataclass(frozen=True)
class SignalInstance:
    signal_type: SignalType
    level: int
    index: int | tuple[int, int]
    ground_truth: np.ndarray | float
    is_negative: bool = False


@dataclass(frozen=True)
class SignalBatch:
    """Signals of one (type, level). For edges, ``indices`` is (k, 2) and
    ``targets`` holds 1.0 for positives and 0.0 for sampled non-edges."""

    signal_type: SignalType
    level: int
    indices: np.ndarray
    targets: np.ndarray
    seed: int
    clipped: bool = False
    exhausted: bool = False

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @property
    def is_negative(self) -> np.ndarray:
        if self.signal_type is SignalType.ATTRIBUTE:
            return np.zeros(len(self), dtype=bool)
        return self.targets == 0.0

    @property
    def masked(self) -> np.ndarray:
        """Entries hidden from the student: node rows, or positive edge pairs."""
        if self.signal_type is SignalType.ATTRIBUTE:
            return self.indices
        return self.indices[~self.is_negative]

    @property
    def instances(self) -> list[SignalInstance]:
        out = []
        for i in range(len(self)):
            if self.signal_type is SignalType.ATTRIBUTE:
                index: int | tuple[int, int] = int(self.indices[i])
                truth: np.ndarray | float = self.targets[i]
            else:
                index = (int(self.indices[i, 0]), int(self.indices[i, 1]))
                truth = float(self.targets[i])
            out.append(SignalInstance(self.signal_type, self.level, index, truth,
                                      bool(self.is_negative[i])))
        return out

    @classmethod
    def empty(cls, signal_type: SignalType, level: int, feature_dim: int = 0) -> "SignalBatch":
        if signal_type is SignalType.ATTRIBUTE:
            return cls(signal_type, level, np.zeros(0, dtype=np.int64),
                       np.zeros((0, feature_dim)), seed=0)
        return cls(signal_type, level, np.zeros((0, 2), dtype=np.int64), np.zeros(0), seed=0)


def level_edges(A: torch.Tensor, level: int) -> np.ndarray:
    """Positive edge pairs (i < j) of a level.

    Level 0 uses the 0/1 adjacency directly. Pooled levels are soft, so an
    entry counts as an edge when its mass exceeds the mean positive mass.
    """
    dense = A.detach().to_dense() if A.is_sparse else A.detach()
    upper = torch.triu(dense, diagonal=1)
    if level == 0:
        keep = upper > 0
    else:
        positive = upper[upper > 0]
        if positive.numel() == 0:
            return np.zeros((0, 2), dtype=np.int64)
        keep = upper > positive.mean()
    return torch.nonzero(keep).numpy().astype(np.int64)


def _sample_non_edges(n: int, positives: np.ndarray, count: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    total = n * (n - 1) // 2 - positives.shape[0]
    if count <= 0:
        return np.zeros((0, 2), dtype=np.int64), False
    if total <= 0:
        return np.zeros((0, 2), dtype=np.int64), True
    pos_keys = set((positives[:, 0] * n + positives[:, 1]).tolist())
    if total <= 4 * count or n <= 64:
        rows, cols = np.triu_indices(n, k=1)
        keys = rows * n + cols
        free = np.flatnonzero(~np.isin(keys, np.fromiter(pos_keys, dtype=np.int64,
                                                           count=len(pos_keys))))
        take = min(count, free.size)
        chosen = np.sort(rng.choice(free.size, size=take, replace=False))
        sel = free[chosen]
        return np.stack([rows[sel], cols[sel]], axis=1), take < count
    picked: dict[int, None] = {}
    while len(picked) < count:
        a = rng.integers(0, n, size=2 * count)
        b = rng.integers(0, n, size=2 * count)
        for i, j in zip(np.minimum(a, b).tolist(), np.maximum(a, b).tolist()):
            key = i * n + j
            if i != j and key not in pos_keys and key not in picked:
                picked[key] = None
                if len(picked) == count:
                    break
    keys = np.fromiter(picked, dtype=np.int64, count=count)
    return np.stack([keys // n, keys % n], axis=1), False


def sample_signals(hier: Hierarchy, signal_type: SignalType | str, level: int,
                   batch_size: int, neg_ratio: float = 1.0, seed: int = 0) -> SignalBatch:
    signal_type = SignalType(signal_type)
    if not 0 <= level < len(hier.levels):
        raise ValueError(f"level {level} outside hierarchy with {len(hier.levels)} levels")
    if neg_ratio < 0:
        raise ValueError("neg_ratio must be >= 0")
    rng = np.random.default_rng(seed)
    A, X = hier.levels[level]
    n = X.shape[0]
    if signal_type is SignalType.ATTRIBUTE:
        take = min(batch_size, n)
        idx = np.sort(rng.choice(n, size=take, replace=False))
        truth = X.detach().numpy()[idx].copy()
        return SignalBatch(signal_type, level, idx.astype(np.int64), truth, seed,
                           clipped=batch_size > n)

    edges = level_edges(A, level)
    take = min(batch_size, edges.shape[0])
    chosen = np.sort(rng.choice(edges.shape[0], size=take, replace=False))
    pos = edges[chosen]
    neg, exhausted = _sample_non_edges(n, edges, math.ceil(neg_ratio * take), rng)
    indices = np.concatenate([pos, neg]).astype(np.int64)
    targets = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    return SignalBatch(signal_type, level, indices, targets, seed,
                       clipped=batch_size > edges.shape[0], exhausted=exhausted)


def apply_mask(hier: Hierarchy, batch: SignalBatch) -> Hierarchy:
    """Return a new hierarchy with the batch's signals hidden at its level."""
    if len(batch) == 0:
        return Hierarchy(list(hier.levels), list(hier.assigns))
    levels = list(hier.levels)
    A, X = levels[batch.level]
    if batch.signal_type is SignalType.ATTRIBUTE:
        keep = torch.ones(X.shape[0], 1, dtype=X.dtype)
        keep[torch.as_tensor(batch.masked)] = 0.0
        X = X * keep
    else:
        pairs = torch.as_tensor(batch.masked)
        if pairs.numel():
            keep = torch.ones(A.shape, dtype=A.dtype)
            keep[pairs[:, 0], pairs[:, 1]] = 0.0
            keep[pairs[:, 1], pairs[:, 0]] = 0.0
            A = (A.to_dense() if A.is_sparse else A) * keep
    levels[batch.level] = (A, X)
    return Hierarchy(levels, list(hier.assigns))


# -- student predictions -----------------------------------------------------

def student_input(hier: Hierarchy, reconstructed: Sequence[torch.Tensor], level: int) -> torch.Tensor:
    if level >= len(reconstructed) or reconstructed[level] is None:
        raise ValueError(f"no reconstruction available at level {level}")
    return torch.cat([hier.features(level), reconstructed[level]], dim=1)


def embed_level(hier: Hierarchy, reconstructed: Sequence[torch.Tensor], level: int,
                student: list[dict], activation: str = "relu") -> torch.Tensor:
    """Student GAT on the (masked) level graph with reconstructed features appended."""
    return gat_encoder(hier.adjacency(level), student_input(hier, reconstructed, level),
                       student, activation)


def predict_batch(Z: torch.Tensor, batch: SignalBatch, head: dict) -> torch.Tensor:
    if batch.signal_type is SignalType.ATTRIBUTE:
        H = Z[torch.as_tensor(batch.indices)]
        out = H @ head["weight"]
        return out + head["bias"] if "bias" in head else out
    idx = torch.as_tensor(batch.indices).reshape(-1, 2)
    left, right = Z[idx[:, 0]], Z[idx[:, 1]]
    return torch.sigmoid(((left @ head["weight"]) * right).sum(dim=1))


def predict_from_embeddings(Z: torch.Tensor, inst: SignalInstance, head: dict) -> torch.Tensor:
    batch = _single_batch(inst)
    return predict_batch(Z, batch, head)[0]


def predict_signal(hier_masked: Hierarchy, reconstructed: Sequence[torch.Tensor],
                   inst: SignalInstance, head_params: dict, student: list[dict],
                   activation: str = "relu") -> torch.Tensor:
    Z = embed_level(hier_masked, reconstructed, inst.level, student, activation)
    return predict_from_embeddings(Z, inst, head_params)


def _single_batch(inst: SignalInstance) -> SignalBatch:
    kind = SignalType(inst.signal_type)
    if kind is SignalType.ATTRIBUTE:
        truth = np.atleast_2d(np.asarray(inst.ground_truth, dtype=np.float64))
        return SignalBatch(kind, inst.level, np.array([inst.index], dtype=np.int64), truth, 0)
    return SignalBatch(kind, inst.level, np.array([inst.index], dtype=np.int64).reshape(1, 2),
                       np.array([float(inst.ground_truth)]), 0)


def signal_losses(pred: torch.Tensor, batch: SignalBatch) -> torch.Tensor:
    """Per-signal losses: row MSE for attributes, clamped BCE for edges."""
    if not bool(torch.isfinite(pred).all()):
        bad = torch.nonzero(~torch.isfinite(pred.reshape(len(batch), -1)).all(dim=1)).flatten()
        ids = [batch.instances[i].index for i in bad.tolist()]
        raise NumericalError(
            f"non-finite {batch.signal_type.value} prediction at level {batch.level}, "
            f"signals {ids}")
    truth = torch.as_tensor(batch.targets, dtype=pred.dtype)
    if batch.signal_type is SignalType.ATTRIBUTE:
        return ((pred - truth) ** 2).mean(dim=1)
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(truth * torch.log(p) + (1 - truth) * torch.log1p(-p))


def signal_loss(pred: torch.Tensor, inst: SignalInstance) -> torch.Tensor:
    batch = _single_batch(inst)
    kind = SignalType(inst.signal_type)
    pred = pred.reshape(1, -1) if kind is SignalType.ATTRIBUTE else pred.reshape(1)
    if kind is SignalType.ATTRIBUTE and pred.shape[1] != batch.targets.shape[1]:
        raise ValueError(f"prediction width {pred.shape[1]} != ground truth {batch.targets.shape[1]}")
    return signal_losses(pred, batch)[0]


def init_heads(levels: int, emb_dim: int, feature_dim: int, rng: np.random.Generator,
               signal_types: Sequence[SignalType] = (SignalType.ATTRIBUTE, SignalType.EDGE),
               dtype: torch.dtype = DTYPE) -> dict[str, dict]:
    """Prediction heads keyed ``"<type>@<level>"``: linear for attributes, bilinear for edges."""
    heads = {}
    for level in range(levels):
        for kind in signal_types:
            kind = SignalType(kind)
            key = head_key(kind, level)
            if kind is SignalType.ATTRIBUTE:
                heads[key] = init_linear(emb_dim, feature_dim, rng, dtype=dtype)
            else:
                heads[key] = {"weight": uniform_init(rng, (emb_dim, emb_dim), emb_dim, dtype)}
    return heads


def head_key(kind: SignalType | str, level: int) -> str:
    return f"{SignalType(kind).value}@{level}"
