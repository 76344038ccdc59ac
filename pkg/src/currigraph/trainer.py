"""Alternating teacher/student pre-training over (source, target) graph pairs.

Each episode samples attribute and edge signals at every level of the
target hierarchy, weights them with the closed-form curriculum (teacher),
then takes one Adam step on the weighted signal loss plus the decoder's
reconstruction loss (student). Thresholds grow by ``xi`` once per pass over
the signal populations.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import (NumericalError, all_finite, flatten_params, gat_encoder, init_gat,
                       iter_leaves, map_leaves, mlp, replace_leaves)
from .coder import (CoderConfigError, Hierarchy, build_hierarchy, check_level_sizes, decode,
                    graph_tensors, init_coder_params, reconstruction_loss)
from .curriculum import CurriculumState, schedule_step, weight_batch
from .graph import Graph
from .signals import (SignalBatch, SignalType, apply_mask, embed_level, head_key, init_heads,
                      level_edges, predict_batch, sample_signals, signal_losses)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
METRIC_FIELDS = ("episode", "weighted_loss", "recon_loss", "mean_weight", "active_fraction",
                 "lambda1", "lambda2", "mean_signal_loss", "attribute_signals", "edge_signals")

# run-length fields do not change what a checkpoint means
_UNHASHED_FIELDS = ("episodes_max",)


class TrainingAborted(NumericalError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    level_sizes: list[int] = field(default_factory=lambda: [500, 100])
    episodes_max: int = 2000
    learning_rate: float = 0.005
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    lambda1: float = 0.2
    lambda2: float = 1.0
    xi: float = 1.1
    attribute_batch: int = 64
    edge_batch: int = 64
    neg_ratio: float = 1.0
    seed: int = 0
    student_widths: list[int] = field(default_factory=lambda: [50, 50])
    student_activation: str = "relu"
    translator_activation: str = "relu"
    teacher_period: int = 1
    student_period: int = 1
    lambda_period: int | None = None
    patience: int | None = 100
    min_rel_improvement: float = 1e-5
    signal_types: list[str] = field(default_factory=lambda: ["attribute", "edge"])
    use_curriculum: bool = True
    recon_weight: float = 1.0
    detach_recon_targets: bool = True
    max_loss: float = 1e6
    shared_encoder: bool = False
    dtype: str = "float64"

    def __post_init__(self) -> None:
        self.level_sizes = [int(k) for k in self.level_sizes]
        self.student_widths = [int(k) for k in self.student_widths]
        self.adam_betas = tuple(float(b) for b in self.adam_betas)  # type: ignore[assignment]
        self.signal_types = [SignalType(s).value for s in self.signal_types]
        problems = self.problems()
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.episodes_max < 1:
            out.append("episodes_max must be >= 1")
        if not self.learning_rate > 0:
            out.append("learning_rate must be > 0")
        if not self.level_sizes:
            out.append("level_sizes must be non-empty")
        if any(b >= a for a, b in zip(self.level_sizes, self.level_sizes[1:])) or \
                any(k < 1 for k in self.level_sizes):
            out.append(f"level_sizes must be positive and strictly decreasing, got {self.level_sizes}")
        if not self.student_widths:
            out.append("student_widths must be non-empty")
        if not self.signal_types:
            out.append("at least one signal type is required")
        if self.teacher_period < 1 or self.student_period < 1:
            out.append("teacher_period and student_period must be >= 1")
        if self.lambda_period is not None and self.lambda_period < 1:
            out.append("lambda_period must be >= 1")
        if self.dtype not in ("float64", "float32"):
            out.append("dtype must be float64 or float32")
        try:
            CurriculumState(self.lambda1, self.lambda2, self.xi)
        except ValueError as exc:
            out.append(str(exc))
        return out

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainingData:
    """Graph tensors for the (source, target) pairs; not persisted in checkpoints."""

    sources: list[Graph]
    targets: list[Graph]
    pairs: list[tuple[int, int]]
    source_tensors: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    target_tensors: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)

    @classmethod
    def build(cls, sources: Sequence[Graph], targets: Sequence[Graph],
              pairs: Sequence[tuple[int, int]], dtype: torch.dtype) -> "TrainingData":
        return cls(list(sources), list(targets), list(pairs),
                   [graph_tensors(g, dtype) for g in sources],
                   [graph_tensors(g, dtype) for g in targets])


@dataclass
class TrainState:
    cfg: TrainConfig
    params: dict
    optimizer: torch.optim.Optimizer
    curriculum: CurriculumState
    rng: np.random.Generator
    layout: dict
    episode: int = 0
    lambda_period: int | None = None
    history: list[dict] = field(default_factory=list)
    data: TrainingData | None = None

    def leaves(self) -> list[torch.Tensor]:
        return [t for _, t in iter_leaves(self.params)]

    def encoder_for(self, pair_index: int) -> dict:
        src = self.data.pairs[pair_index][0] if self.data else pair_index
        return self.params["encoders"][0 if self.cfg.shared_encoder else src]

    def param_manifest(self) -> dict[str, list[int]]:
        return {name: list(t.shape) for name, t in iter_leaves(self.params)}


# -- initialization ----------------------------------------------------------

def _init_params(layout: dict, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    dtype = cfg.torch_dtype
    target_dim = layout["target_dim"]
    encoders = []
    for source_dim in layout["encoder_dims"]:
        coder = init_coder_params(source_dim, target_dim, cfg.level_sizes, rng, dtype)
        encoders.append({"pool": coder.pool_surrogates, "translator": coder.translator})
    unpool = init_coder_params(target_dim, target_dim, cfg.level_sizes, rng, dtype).unpool_surrogates
    widths = [2 * target_dim, *cfg.student_widths]
    student = [init_gat(a, b, rng, dtype) for a, b in zip(widths, widths[1:])]
    heads = init_heads(cfg.depth + 1, cfg.student_widths[-1], target_dim, rng,
                       [SignalType(s) for s in cfg.signal_types], dtype)
    return {"encoders": encoders, "unpool": unpool, "student": student, "heads": heads}


def _make_optimizer(params: dict, cfg: TrainConfig) -> torch.optim.Optimizer:
    leaves = [t for _, t in iter_leaves(params)]
    return torch.optim.Adam(leaves, lr=cfg.learning_rate, betas=cfg.adam_betas,
                            eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, sample_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(sample_ss)


def _layout(sources: Sequence[Graph], targets: Sequence[Graph], cfg: TrainConfig) -> dict:
    target_dims = {g.feature_dim for g in targets}
    if len(target_dims) != 1:
        raise CoderConfigError(f"all targets must share a feature dim, got {sorted(target_dims)}")
    if cfg.shared_encoder:
        dims = {g.feature_dim for g in sources}
        if len(dims) != 1:
            raise CoderConfigError("a shared encoder needs sources with equal feature dims")
        encoder_dims = [sources[0].feature_dim]
    else:
        encoder_dims = [g.feature_dim for g in sources]
    return {"encoder_dims": encoder_dims, "target_dim": target_dims.pop(),
            "sources": [g.name for g in sources], "targets": [g.name for g in targets]}


def init_state_pairs(sources: Sequence[Graph], targets: Sequence[Graph],
                     pairs: Sequence[tuple[int, int]], cfg: TrainConfig) -> TrainState:
    """State for arbitrary (source index, target index) pairs."""
    if not sources or not targets or not pairs:
        raise ValueError("need at least one source, one target and one pair")
    for g in [*sources, *targets]:
        try:
            check_level_sizes(cfg.level_sizes, g.num_nodes)
        except ValueError as exc:
            raise CoderConfigError(f"graph {g.name!r}: {exc}") from exc
    layout = _layout(sources, targets, cfg)
    init_rng, sample_rng = _streams(cfg.seed)
    params = _init_params(layout, cfg, init_rng)
    params = map_leaves(lambda t: t.requires_grad_(True), params)
    data = TrainingData.build(sources, targets, pairs, cfg.torch_dtype)
    return TrainState(cfg, params, _make_optimizer(params, cfg),
                      CurriculumState(cfg.lambda1, cfg.lambda2, cfg.xi), sample_rng, layout,
                      lambda_period=cfg.lambda_period, data=data)


def init_state(sources: Graph | Sequence[Graph], target: Graph, cfg: TrainConfig) -> TrainState:
    """One encoder/translator per source; decoder, student and heads are shared."""
    sources = [sources] if isinstance(sources, Graph) else list(sources)
    return init_state_pairs(sources, [target], [(i, 0) for i in range(len(sources))], cfg)


# -- forward pieces ----------------------------------------------------------

@dataclass
class PairForward:
    source: Hierarchy
    target: Hierarchy
    reconstructed: list[torch.Tensor]
    recon_loss: torch.Tensor


def forward_pair(state: TrainState, pair_index: int) -> PairForward:
    """Encode source and target, translate at the coarsest level, decode down the target."""
    src_idx, tgt_idx = state.data.pairs[pair_index]
    enc = state.encoder_for(pair_index)
    hs = build_hierarchy(*state.data.source_tensors[src_idx], enc["pool"], state.cfg.level_sizes)
    ht = build_hierarchy(*state.data.target_tensors[tgt_idx], state.params["unpool"],
                         state.cfg.level_sizes)
    x_hat = mlp(hs.features(-1), enc["translator"], state.cfg.translator_activation)
    recon = decode(x_hat, ht)
    # detached targets keep the decoder from "solving" reconstruction by collapsing
    # the target hierarchy it is compared against
    truth = ht.detach() if state.cfg.detach_recon_targets else ht
    return PairForward(hs, ht, recon, reconstruction_loss(recon, truth))


Batches = dict[tuple[str, int], SignalBatch]


def sample_batches(state: TrainState, target: Hierarchy) -> Batches:
    cfg = state.cfg
    batches: Batches = {}
    for level in range(len(target.levels)):
        for kind in cfg.signal_types:
            size = cfg.attribute_batch if kind == "attribute" else cfg.edge_batch
            seed = int(state.rng.integers(0, 2 ** 63 - 1))
            batches[(kind, level)] = sample_signals(target, kind, level, size, cfg.neg_ratio, seed)
    return batches


def batch_losses(state: TrainState, fwd: PairForward, batches: Batches) -> dict[tuple[str, int], torch.Tensor]:
    """Per-signal losses of the student on the masked target hierarchy."""
    losses = {}
    student = state.params["student"]
    for level in range(len(fwd.target.levels)):
        level_batches = [(key, b) for key, b in batches.items() if key[1] == level and len(b)]
        if not level_batches:
            continue
        masked = fwd.target
        for _, b in level_batches:
            masked = apply_mask(masked, b)
        Z = embed_level(masked, fwd.reconstructed, level, student, state.cfg.student_activation)
        for key, b in level_batches:
            pred = predict_batch(Z, b, state.params["heads"][head_key(*key)])
            losses[key] = signal_losses(pred, b)
    return losses


def curriculum_weights(state: TrainState, losses: dict) -> dict[tuple[str, int], np.ndarray]:
    out = {}
    for key, l in losses.items():
        values = l.detach().cpu().numpy().astype(np.float64)
        if state.cfg.use_curriculum:
            out[key] = weight_batch(values, state.curriculum)
        else:
            out[key] = np.ones_like(values)
    return out


def _summarize(losses: dict, weights: dict, recon: float, state: TrainState) -> dict:
    all_l = np.concatenate([l.detach().cpu().numpy() for l in losses.values()]) if losses else np.zeros(0)
    all_w = np.concatenate([weights[k] for k in losses]) if losses else np.zeros(0)
    counts = {"attribute": 0, "edge": 0}
    for (kind, _), l in losses.items():
        counts[kind] += int(l.shape[0])
    return {
        "weighted_loss": float(np.dot(all_w, all_l)),
        "recon_loss": float(recon),
        "mean_weight": float(all_w.mean()) if all_w.size else 0.0,
        "active_fraction": float((all_w > 0).mean()) if all_w.size else 0.0,
        "mean_signal_loss": float(all_l.mean()) if all_l.size else 0.0,
        "attribute_signals": counts["attribute"],
        "edge_signals": counts["edge"],
    }


# -- teacher / student -------------------------------------------------------

def teacher_step(state: TrainState, batches: Batches, pair_index: int = 0) -> dict:
    """Closed-form weights for the measured per-signal losses; parameters stay frozen."""
    with torch.no_grad():
        fwd = forward_pair(state, pair_index)
        losses = batch_losses(state, fwd, batches)
    return curriculum_weights(state, losses)


def _objective(losses: dict, weights: dict, recon: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    total = cfg.recon_weight * recon
    for key, l in losses.items():
        w = torch.as_tensor(weights[key], dtype=l.dtype)
        total = total + (w * l).sum()
    return total


def _apply_gradients(state: TrainState, objective: torch.Tensor) -> None:
    value = float(objective.detach())
    if not math.isfinite(value) or abs(value) > state.cfg.max_loss:
        raise TrainingAborted(f"episode {state.episode}: objective {value!r} exploded "
                              f"(limit {state.cfg.max_loss})")
    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    for name, leaf in iter_leaves(state.params):
        if leaf.grad is not None and not bool(torch.isfinite(leaf.grad).all()):
            raise TrainingAborted(f"episode {state.episode}: non-finite gradient in {name}")
    state.optimizer.step()
    for name, leaf in iter_leaves(state.params):
        if not bool(torch.isfinite(leaf).all()):
            raise TrainingAborted(f"episode {state.episode}: parameter {name} became non-finite")


def student_step(state: TrainState, batches: Batches, weights: dict,
                 pair_index: int = 0) -> TrainState:
    """One optimizer step on the weighted signal loss plus reconstruction; returns ``state``."""
    fwd = forward_pair(state, pair_index)
    losses = batch_losses(state, fwd, batches)
    missing = [k for k in losses if k not in weights]
    if missing:
        raise ValueError(f"no weights for batches {missing}")
    _apply_gradients(state, _objective(losses, weights, fwd.recon_loss, state.cfg))
    return state


def weighted_objective(state: TrainState, batches: Batches, weights: dict,
                       pair_index: int = 0) -> torch.Tensor:
    """The student's objective at the current parameters (differentiable)."""
    fwd = forward_pair(state, pair_index)
    return _objective(batch_losses(state, fwd, batches), weights, fwd.recon_loss, state.cfg)


# -- loop --------------------------------------------------------------------

def stopping_criterion(history: Sequence[dict] | Sequence[float], cfg: TrainConfig) -> bool:
    """Stop at ``episodes_max``, or when the weighted loss has not improved by
    ``min_rel_improvement`` (relative) within the last ``patience`` episodes."""
    if len(history) >= cfg.episodes_max:
        return True
    if cfg.patience is None or len(history) <= cfg.patience:
        return False
    values = [h["weighted_loss"] if isinstance(h, dict) else float(h) for h in history]
    best_before = min(values[: -cfg.patience])
    recent = min(values[-cfg.patience:])
    return recent > best_before - cfg.min_rel_improvement * abs(best_before)


def _auto_lambda_period(state: TrainState, target: Hierarchy, batches: Batches) -> int:
    period = 1
    for (kind, level), b in batches.items():
        if kind == "attribute":
            population, size = target.sizes[level], state.cfg.attribute_batch
        else:
            population, size = level_edges(target.adjacency(level), level).shape[0], state.cfg.edge_batch
        if population:
            period = max(period, math.ceil(population / max(size, 1)))
    return period


def run_episode(state: TrainState) -> dict:
    """One pass of the loop: sample, teacher, student, threshold growth."""
    cfg = state.cfg
    pair_index = state.episode % len(state.data.pairs)
    update_teacher = state.episode % cfg.teacher_period == 0
    update_student = state.episode % cfg.student_period == 0

    fwd = forward_pair(state, pair_index)
    cache = getattr(state, "_cached", None)
    if update_teacher or cache is None:
        batches = sample_batches(state, fwd.target.detach())
        if state.lambda_period is None:
            state.lambda_period = _auto_lambda_period(state, fwd.target.detach(), batches)
    else:
        batches = cache[0]

    losses = batch_losses(state, fwd, batches)
    if update_teacher or cache is None:
        # identical to teacher_step at these parameters, without a second forward pass
        weights = curriculum_weights(state, losses)
    else:
        weights = cache[1]
    state._cached = (batches, weights)  # type: ignore[attr-defined]

    row = _summarize(losses, weights, float(fwd.recon_loss.detach()), state)
    row.update(episode=state.episode, lambda1=state.curriculum.lambda1,
               lambda2=state.curriculum.lambda2)
    if update_student:
        _apply_gradients(state, _objective(losses, weights, fwd.recon_loss, cfg))
    if (state.episode + 1) % state.lambda_period == 0:
        state.curriculum = schedule_step(state.curriculum)
    state.history.append(row)
    state.episode += 1
    return row


def pretrain_state(state: TrainState, checkpoint_dir: str | os.PathLike | None = None,
                   episodes: int | None = None) -> TrainState:
    """Continue training ``state`` until the stopping rule fires (or ``episodes`` more)."""
    stop_at = None if episodes is None else state.episode + episodes
    while not stopping_criterion(state.history, state.cfg):
        if stop_at is not None and state.episode >= stop_at:
            break
        try:
            run_episode(state)
        except NumericalError:
            if checkpoint_dir is not None:
                save_checkpoint(state, checkpoint_dir)
                logger.error("numerical failure; checkpoint written to %s", checkpoint_dir)
            raise
    return state


def pretrain(sources: Graph | Sequence[Graph], target: Graph, cfg: TrainConfig,
             checkpoint_dir: str | os.PathLike | None = None) -> tuple[TrainState, list[dict]]:
    state = init_state(sources, target, cfg)
    pretrain_state(state, checkpoint_dir)
    return state, state.history


def write_metrics(history: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_FIELDS])


def evaluation_loss(state: TrainState, level: int = 0, seeds: Sequence[int] = range(8),
                    pair_index: int = 0) -> dict[str, float]:
    """Mean per-signal loss over fixed training-sized batches at ``level``.

    Level 0 has fixed ground truth, so values are comparable across training;
    coarse levels move with the learned assignments.
    """
    cfg = state.cfg
    sums: dict[str, list[float]] = {k: [] for k in cfg.signal_types}
    with torch.no_grad():
        fwd = forward_pair(state, pair_index)
        target = fwd.target.detach()
        for seed in seeds:
            for kind in cfg.signal_types:
                size = cfg.attribute_batch if kind == "attribute" else cfg.edge_batch
                batch = sample_signals(target, kind, level, size, cfg.neg_ratio, int(seed))
                if len(batch):
                    losses = batch_losses(state, fwd, {(kind, level): batch})
                    sums[kind].extend(losses[(kind, level)].tolist())
    return {k: float(np.mean(v)) for k, v in sums.items() if v}


# -- target reconstruction for downstream use ---------------------------------

def reconstruct_target(state: TrainState, target_index: int = 0,
                       target: Graph | None = None) -> torch.Tensor:
    """Level-0 decoded features for a target, averaged over the pairs that feed it."""
    data = state.data
    pairs = [i for i, (_, t) in enumerate(data.pairs) if t == target_index]
    outs = []
    with torch.no_grad():
        for i in pairs:
            src_idx, _ = data.pairs[i]
            enc = state.encoder_for(i)
            hs = build_hierarchy(*data.source_tensors[src_idx], enc["pool"], state.cfg.level_sizes)
            tensors = data.target_tensors[target_index] if target is None else \
                graph_tensors(target, state.cfg.torch_dtype)
            ht = build_hierarchy(*tensors, state.params["unpool"], state.cfg.level_sizes)
            x_hat = mlp(hs.features(-1), enc["translator"], state.cfg.translator_activation)
            outs.append(decode(x_hat, ht)[0])
    return torch.stack(outs).mean(dim=0)


def student_embeddings(state: TrainState, A: torch.Tensor, X: torch.Tensor,
                       x_hat: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return gat_encoder(A, torch.cat([X, x_hat], dim=1), state.params["student"],
                           state.cfg.student_activation)


# -- checkpoints -------------------------------------------------------------

def _tensor_file(name: str) -> str:
    return name.replace("/", "_") + ".npy"


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name, t in iter_leaves(params):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    root = Path(path)
    tdir = root / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, t in iter_leaves(state.params):
        fname = _tensor_file("param." + name)
        np.save(tdir / fname, t.detach().cpu().numpy())
        tensors.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype), "file": fname})
    opt = state.optimizer.state_dict()
    opt_tensors = []
    for idx, entry in opt["state"].items():
        for key, value in entry.items():
            fname = _tensor_file(f"opt.{idx}.{key}")
            np.save(tdir / fname, torch.as_tensor(value).cpu().numpy())
            opt_tensors.append({"index": int(idx), "key": key, "file": fname,
                                "dtype": str(torch.as_tensor(value).dtype)})
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
              for g in opt["param_groups"]]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.config_hash(),
        "params_hash": params_hash(state.params),
        "layout": state.layout,
        "episode": state.episode,
        "lambda_period": state.lambda_period,
        "curriculum": dataclasses.asdict(state.curriculum),
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
        "tensors": tensors,
        "optimizer": {"param_groups": groups, "state": opt_tensors},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_checkpoint(path: str | os.PathLike, cfg: TrainConfig | None = None,
                    data: TrainingData | None = None) -> TrainState:
    """Restore a state; refuses when ``cfg`` hashes differently from the saved config."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"unsupported checkpoint format {manifest.get('format')}")
    saved_cfg = TrainConfig.from_dict(manifest["config"])
    if saved_cfg.config_hash() != manifest["config_hash"]:
        raise CheckpointMismatch("checkpoint manifest hash does not match its own config")
    if cfg is not None and cfg.config_hash() != manifest["config_hash"]:
        raise CheckpointMismatch(
            f"config hash {cfg.config_hash()} does not match checkpoint {manifest['config_hash']}")
    run_cfg = cfg or saved_cfg
    tdir = root / "tensors"
    skeleton = _init_params(manifest["layout"], run_cfg, np.random.default_rng(0))
    values = {}
    for entry in manifest["tensors"]:
        values[entry["name"]] = torch.from_numpy(np.load(tdir / entry["file"])).requires_grad_(True)
    missing = set(flatten_params(skeleton)) - set(values)
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks parameters {sorted(missing)}")
    params = replace_leaves(skeleton, values)
    if params_hash(params) != manifest["params_hash"]:
        raise CheckpointMismatch("parameter tensors do not match the manifest hash")

    optimizer = _make_optimizer(params, run_cfg)
    opt_state: dict[int, dict] = {}
    for entry in manifest["optimizer"]["state"]:
        opt_state.setdefault(entry["index"], {})[entry["key"]] = torch.from_numpy(
            np.load(tdir / entry["file"]))
    groups = []
    for g in manifest["optimizer"]["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    optimizer.load_state_dict({"state": opt_state, "param_groups": groups})

    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    return TrainState(run_cfg, params, optimizer, CurriculumState(**manifest["curriculum"]), rng,
                      manifest["layout"], episode=manifest["episode"],
                      lambda_period=manifest["lambda_period"], history=manifest["history"],
                      data=data)


def attach_data(state: TrainState, sources: Sequence[Graph], targets: Sequence[Graph],
                pairs: Sequence[tuple[int, int]] | None = None) -> TrainState:
    """Re-attach graphs to a loaded state, checking names and dims against its layout."""
    if [g.name for g in sources] != state.layout["sources"] or \
            [g.name for g in targets] != state.layout["targets"]:
        raise CheckpointMismatch(
            f"graphs {[g.name for g in sources]} -> {[g.name for g in targets]} do not match "
            f"checkpoint {state.layout['sources']} -> {state.layout['targets']}")
    if pairs is None:
        pairs = [(i, 0) for i in range(len(sources))]
    state.data = TrainingData.build(sources, targets, pairs, state.cfg.torch_dtype)
    return state


def finite_params(state: TrainState) -> bool:
    return all_finite(state.params)
