"""Downstream evaluation: fine-tuning, repeated experiments, sweeps, scaling runs,
temporal snapshot pairs, discrepancy estimates and report files."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (clone_params, gat_encoder, gcn_encoder, init_gat, init_linear,
                       iter_leaves, mlp, normalize_adjacency)
from .coder import build_hierarchy, decode, graph_tensors
from .graph import Graph, Split, generate_er, make_split
from .trainer import (TrainConfig, TrainState, forward_pair, init_state, init_state_pairs,
                      pretrain_state, reconstruct_target)

logger = logging.getLogger(__name__)

VARIANTS = ("full", "attributes_only", "no_curriculum", "no_pretrain", "no_pretrain_gcn")


class ExperimentFailed(RuntimeError):
    def __init__(self, message: str, partial: dict):
        super().__init__(message)
        self.partial = partial


# -- fine-tuning -------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 200
    learning_rate: float = 0.005
    weight_decay: float = 5e-4
    freeze_backbone: bool = False
    seed: int = 0
    baseline_widths: list[int] = field(default_factory=lambda: [50, 50])
    baseline_kind: str = "gat"
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.baseline_kind not in ("gat", "gcn"):
            raise ValueError("baseline_kind must be 'gat' or 'gcn'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Classifier:
    """A backbone plus a softmax head, bound to one graph's inputs."""

    kind: str
    adjacency: torch.Tensor
    inputs: torch.Tensor
    backbone: list[dict]
    head: dict
    activation: str = "relu"

    def logits(self) -> torch.Tensor:
        if self.kind == "gat":
            Z = gat_encoder(self.adjacency, self.inputs, self.backbone, self.activation)
        else:
            Z = gcn_encoder(self.adjacency, self.inputs, self.backbone, self.activation)
        return Z @ self.head["weight"] + self.head["bias"]

    def predict(self) -> np.ndarray:
        with torch.no_grad():
            return self.logits().argmax(dim=1).numpy()

    def params(self) -> dict:
        return {"backbone": self.backbone, "head": self.head}


@dataclass
class FinetuneResult:
    classifier: Classifier
    curve: list[dict]
    best_epoch: int


def _accuracy(pred: np.ndarray, labels: np.ndarray, ids: np.ndarray) -> float:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot compute accuracy over an empty id list")
    if bool((labels[ids] < 0).any()):
        raise ValueError("accuracy ids include unlabeled nodes")
    return float((pred[ids] == labels[ids]).mean())


def evaluate_accuracy(classifier: Classifier, target: Graph, ids: Sequence[int]) -> float:
    return _accuracy(classifier.predict(), target.labels, np.asarray(ids))


def pretrained_inputs(state: TrainState, target: Graph) -> torch.Tensor:
    """Target features with the decoded source knowledge appended."""
    x_hat = reconstruct_target(state, 0, target)
    X = torch.as_tensor(np.array(target.features), dtype=x_hat.dtype)
    return torch.cat([X, x_hat], dim=1)


def build_classifier(pretrained: TrainState | None, target: Graph, cfg: FinetuneConfig,
                     inputs: torch.Tensor | None = None) -> Classifier:
    rng = np.random.default_rng(cfg.seed)
    if pretrained is not None:
        dtype = pretrained.cfg.torch_dtype
        if pretrained.layout["target_dim"] != target.feature_dim:
            raise ValueError(f"pretrained model expects {pretrained.layout['target_dim']}-dim "
                             f"target features, got {target.feature_dim}")
        X = pretrained_inputs(pretrained, target) if inputs is None else inputs
        A = graph_tensors(target, dtype)[0]
        backbone = clone_params(pretrained.params["student"], requires_grad=not cfg.freeze_backbone)
        emb = pretrained.cfg.student_widths[-1]
        kind, activation = "gat", pretrained.cfg.student_activation
    else:
        dtype = torch.float64
        A, X = graph_tensors(target, dtype)
        if inputs is not None:
            X = inputs
        widths = [X.shape[1], *cfg.baseline_widths]
        if cfg.baseline_kind == "gat":
            backbone = [init_gat(a, b, rng, dtype) for a, b in zip(widths, widths[1:])]
        else:
            backbone = [init_linear(a, b, rng, dtype=dtype) for a, b in zip(widths, widths[1:])]
            A = normalize_adjacency(A)
        backbone = clone_params(backbone, requires_grad=not cfg.freeze_backbone)
        emb = widths[-1]
        kind, activation = cfg.baseline_kind, cfg.activation
    head = clone_params(init_linear(emb, max(target.num_classes, 1), rng, dtype=dtype))
    return Classifier(kind, A, X.detach(), backbone, head, activation)


def finetune(pretrained: TrainState | None, target: Graph, split: Split,
             cfg: FinetuneConfig | None = None, inputs: torch.Tensor | None = None) -> FinetuneResult:
    """Train a softmax head (and the backbone unless frozen) on ``split.train``.

    The returned classifier is the epoch with the highest validation accuracy,
    ties broken by lower validation loss (then earliest); epoch 0 is the untrained initialization. Passing
    ``pretrained=None`` gives the no-pretraining baseline on raw features.
    """
    cfg = cfg or FinetuneConfig()
    train = np.asarray(split.train, dtype=np.int64)
    val = np.asarray(split.val, dtype=np.int64)
    if train.size == 0:
        raise ValueError("fine-tuning needs a non-empty train split")
    clf = build_classifier(pretrained, target, cfg, inputs)
    torch.manual_seed(cfg.seed)
    labels = torch.as_tensor(np.array(target.labels))
    train_t = torch.as_tensor(train)
    trainable = [t for _, t in iter_leaves(clf.params()) if t.requires_grad]
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    val_t = torch.as_tensor(val)

    def snapshot(epoch: int, loss: float) -> dict:
        with torch.no_grad():
            logits = clf.logits()
        pred = logits.argmax(dim=1).numpy()
        row = {"epoch": epoch, "train_loss": loss, "train_acc": _accuracy(pred, target.labels, train),
               "val_acc": float("nan"), "val_loss": float("nan")}
        if val.size:
            row["val_acc"] = _accuracy(pred, target.labels, val)
            row["val_loss"] = float(F.cross_entropy(logits[val_t], labels[val_t]))
        return row

    def score(row: dict) -> tuple[float, float]:
        # highest validation accuracy; ties go to the lower validation loss
        if val.size:
            return row["val_acc"], -row["val_loss"]
        return -row["train_loss"], 0.0

    with torch.no_grad():
        loss0 = float(F.cross_entropy(clf.logits()[train_t], labels[train_t]))
    curve = [snapshot(0, loss0)]
    best_epoch, best_score = 0, score(curve[0])
    best = copy.deepcopy(clf.params())
    for epoch in range(1, cfg.epochs + 1):
        opt.zero_grad(set_to_none=True)
        loss = F.cross_entropy(clf.logits()[train_t], labels[train_t])
        loss.backward()
        opt.step()
        row = snapshot(epoch, float(loss.detach()))
        curve.append(row)
        if score(row) > best_score:
            best_epoch, best_score = epoch, score(row)
            best = copy.deepcopy(clf.params())
    clf.backbone, clf.head = best["backbone"], best["head"]
    return FinetuneResult(clf, curve, best_epoch)


# -- experiments -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    ratios: tuple[float, float, float] = (0.04, 0.16, 0.80)
    variants: list[str] = field(default_factory=lambda: ["full"])
    n_runs: int = 5

    def __post_init__(self) -> None:
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "finetune": self.finetune.to_dict(),
                "ratios": list(self.ratios), "variants": list(self.variants), "n_runs": self.n_runs}


@dataclass
class ExperimentResult:
    variant: str
    seeds: list[int]
    accuracies: list[float]
    wall_times: list[float]
    config: dict
    extras: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def n_runs(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float | None:
        """Sample standard deviation; ``None`` (not applicable) for a single run."""
        if self.n_runs < 2:
            return None
        return float(np.std(self.accuracies, ddof=1))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "n_runs": self.n_runs, "mean": self.mean, "std": self.std,
                "seeds": self.seeds, "accuracies": self.accuracies, "wall_times": self.wall_times,
                "config": self.config, "extras": self.extras}


def variant_train_config(cfg: TrainConfig, variant: str, seed: int) -> TrainConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    if variant == "attributes_only":
        d["signal_types"] = ["attribute"]
    elif variant == "no_curriculum":
        d["use_curriculum"] = False
    return TrainConfig.from_dict(d)


def run_single(sources: Sequence[Graph], target: Graph, cfg: ExperimentConfig, variant: str,
               seed: int) -> dict:
    """One seed of one variant: split, (pre-train), fine-tune, test accuracy."""
    start = time.perf_counter()
    split = make_split(target, cfg.ratios, seed)
    ft = dataclasses.replace(cfg.finetune, seed=seed)
    extra: dict = {}
    if variant.startswith("no_pretrain"):
        if variant == "no_pretrain_gcn":
            ft = dataclasses.replace(ft, baseline_kind="gcn")
        result = finetune(None, target, split, ft)
    else:
        tcfg = variant_train_config(cfg.train, variant, seed)
        state = init_state(list(sources), target, tcfg)
        pretrain_state(state)
        result = finetune(state, target, split, ft)
        hist = state.history
        extra = {"episodes": len(hist), "initial_signal_loss": hist[0]["mean_signal_loss"],
                 "final_signal_loss": hist[-1]["mean_signal_loss"],
                 "mean_weights": [h["mean_weight"] for h in hist],
                 "edge_signals": int(sum(h["edge_signals"] for h in hist)),
                 "initial_active_fraction": hist[0]["active_fraction"]}
    extra["train_acc"] = evaluate_accuracy(result.classifier, target, split.train)
    extra["best_epoch"] = result.best_epoch
    acc = evaluate_accuracy(result.classifier, target, split.test)
    return {"variant": variant, "seed": seed, "accuracy": acc,
            "seconds": time.perf_counter() - start, "extra": extra}


def _run_single_job(args) -> dict:
    torch.set_num_threads(1)
    return run_single(*args)


def run_experiment(sources: Graph | Sequence[Graph], target: Graph, cfg: ExperimentConfig,
                   n_runs: int | None = None, seeds: Sequence[int] | None = None, jobs: int = 1,
                   partial_path: str | os.PathLike | None = None) -> dict[str, ExperimentResult]:
    """Repeat every configured variant over ``n_runs`` seeds (0..n_runs-1 by default).

    Each seed uses the same split across variants. A failing run aborts the
    experiment; finished runs are written to ``partial_path`` first.
    """
    sources = [sources] if isinstance(sources, Graph) else list(sources)
    seeds = list(range(n_runs or cfg.n_runs)) if seeds is None else list(seeds)
    if not seeds:
        raise ValueError("n_runs must be >= 1")
    tasks = [(sources, target, cfg, v, s) for v in cfg.variants for s in seeds]
    done: list[dict] = []
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for row in pool.map(_run_single_job, tasks):
                    done.append(row)
        else:
            for task in tasks:
                done.append(run_single(*task))
    except Exception as exc:
        if partial_path is not None:
            Path(partial_path).parent.mkdir(parents=True, exist_ok=True)
            Path(partial_path).write_text(json.dumps(done, indent=1))
        raise ExperimentFailed(f"experiment aborted after {len(done)} runs: {exc}",
                               _collect(done, cfg)) from exc
    return _collect(done, cfg)


def _collect(rows: list[dict], cfg: ExperimentConfig) -> dict[str, ExperimentResult]:
    out = {}
    for variant in cfg.variants:
        mine = [r for r in rows if r["variant"] == variant]
        if mine:
            out[variant] = ExperimentResult(variant, [r["seed"] for r in mine],
                                            [r["accuracy"] for r in mine],
                                            [r["seconds"] for r in mine], cfg.to_dict(),
                                            [r["extra"] for r in mine])
    return out


# -- threshold sweep ---------------------------------------------------------

SWEEP_FIELDS = ("lambda1", "lambda2", "train_acc", "test_acc", "active_fraction")


def lambda_sweep(lambda1s: Sequence[float], lambda2s: Sequence[float], sources, target: Graph,
                 cfg: ExperimentConfig, n_runs: int = 1) -> list[dict]:
    """One experiment per (lambda1, lambda2) cell; ``active_fraction`` is measured
    on episode-0 losses, which do not depend on the thresholds."""
    if not lambda1s or not lambda2s:
        raise ValueError("the sweep grid must be non-empty")
    rows = []
    for l1 in lambda1s:
        for l2 in lambda2s:
            d = cfg.train.to_dict()
            d.update(lambda1=float(l1), lambda2=float(l2))
            cell = dataclasses.replace(cfg, train=TrainConfig.from_dict(d), variants=["full"])
            res = run_experiment(sources, target, cell, n_runs)["full"]
            rows.append({"lambda1": float(l1), "lambda2": float(l2),
                         "train_acc": float(np.mean([e["train_acc"] for e in res.extras])),
                         "test_acc": res.mean,
                         "active_fraction": float(np.mean(
                             [e["initial_active_fraction"] for e in res.extras]))})
    return rows


# -- scalability -------------------------------------------------------------

@dataclass
class ScaleResult:
    rows: list[dict]
    slopes: dict[int, float | None]

    def slope_change(self, low: int, high: int) -> float | None:
        a, b = self.slopes.get(low), self.slopes.get(high)
        return None if a is None or b is None else b - a


def loglog_slope(sizes: Sequence[float], seconds: Sequence[float]) -> float | None:
    pts = [(n, s) for n, s in zip(sizes, seconds) if s is not None and s > 0]
    if len({n for n, _ in pts}) < 2:
        return None
    x, y = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def scale_level_sizes(depth: int, base: int = 64) -> list[int]:
    return [max(base >> i, 1) for i in range(depth)]


def scalability_run(source: Graph, target_sizes: Sequence[int], p: float | None = None,
                    depths: Sequence[int] = (3,), episodes: int = 100, seed: int = 0,
                    p_scale: float = 10.0, train: TrainConfig | None = None,
                    level_base: int = 64, repeats: int = 1) -> ScaleResult:
    """Wall time of ``episodes`` training episodes per (depth, target size).

    Targets are ER graphs with edge probability ``p`` (or ``p_scale / n``).
    Graph generation is excluded from the timing. A failing cell (e.g. out of
    memory) is recorded with status ``failed`` instead of aborting.
    """
    if list(target_sizes) != sorted(target_sizes):
        raise ValueError("target sizes must be ascending")
    base = train.to_dict() if train else TrainConfig().to_dict()
    rows = []
    for depth in depths:
        sizes = scale_level_sizes(depth, level_base)
        for n in target_sizes:
            prob = p if p is not None else min(1.0, p_scale / n)
            target = generate_er(n, prob, seed + n, feature_dim=source.feature_dim)
            d = dict(base, level_sizes=sizes, episodes_max=episodes, patience=None, seed=seed)
            cfg = TrainConfig.from_dict(d)
            times = []
            status = "ok"
            for _ in range(repeats):
                try:
                    state = init_state(source, target, cfg)
                    start = time.perf_counter()
                    pretrain_state(state)
                    times.append(time.perf_counter() - start)
                except (MemoryError, RuntimeError) as exc:
                    status = f"failed: {type(exc).__name__}: {exc}"[:200]
                    logger.warning("scale cell depth=%d n=%d failed: %s", depth, n, exc)
                    break
            rows.append({"depth": depth, "n": n, "p": prob, "episodes": episodes,
                         "seconds": float(np.median(times)) if times and status == "ok" else None,
                         "status": status})
    slopes = {}
    for depth in depths:
        mine = [r for r in rows if r["depth"] == depth and r["seconds"] is not None]
        slopes[depth] = loglog_slope([r["n"] for r in mine], [r["seconds"] for r in mine])
    return ScaleResult(rows, slopes)


# -- temporal snapshots ------------------------------------------------------

@dataclass
class TemporalPairs:
    train: list[tuple[Graph, Graph]]
    test: tuple[Graph, Graph]

    @property
    def train_empty(self) -> bool:
        return not self.train


def temporal_pairs(snapshots: Sequence[Graph]) -> TemporalPairs:
    """Consecutive (G_i, G_i+1) pairs in order; the last pair is held out."""
    if len(snapshots) < 2:
        raise ValueError(f"need at least 2 snapshots, got {len(snapshots)}")
    pairs = list(zip(snapshots[:-1], snapshots[1:]))
    return TemporalPairs(pairs[:-1], pairs[-1])


def reconstruct_pair(state: TrainState, source: Graph, target: Graph,
                     encoder_index: int = 0) -> torch.Tensor:
    """Level-0 decoded features of ``target`` from ``source`` with a trained state."""
    cfg = state.cfg
    enc = state.params["encoders"][encoder_index]
    with torch.no_grad():
        hs = build_hierarchy(*graph_tensors(source, cfg.torch_dtype), enc["pool"], cfg.level_sizes)
        ht = build_hierarchy(*graph_tensors(target, cfg.torch_dtype), state.params["unpool"],
                             cfg.level_sizes)
        return decode(mlp(hs.features(-1), enc["translator"], cfg.translator_activation), ht)[0]


def pca_2d(reference: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    """Project onto the top-2 principal axes of ``reference``; signs fixed so the
    largest-magnitude loading of each axis is positive."""
    mean = reference.mean(axis=0)
    _, _, vt = np.linalg.svd(reference - mean, full_matrices=False)
    axes = vt[:2]
    flip = np.sign(axes[np.arange(axes.shape[0]), np.abs(axes).argmax(axis=1)])
    axes = axes * flip[:, None]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], reference.shape[1]))])
    return [(m - mean) @ axes.T for m in (reference, *others)]


@dataclass
class TemporalResult:
    pairs: TemporalPairs
    portions: list[dict]
    projections: list[dict]
    files: list[Path] = field(default_factory=list)


def run_temporal(snapshots: Sequence[Graph], cfg: TrainConfig,
                 outdir: str | os.PathLike | None = None) -> TemporalResult:
    """Train on growing prefixes of the training pairs (shared encoder) and
    reconstruct the held-out final snapshot from its predecessor each time."""
    pairs = temporal_pairs(snapshots)
    if pairs.train_empty:
        logger.warning("temporal run has no training pairs; only the held-out pair exists")
    held_source, held_target = pairs.test
    cfg = TrainConfig.from_dict(dict(cfg.to_dict(), shared_encoder=True))
    portions, projections = [], []
    truth = np.array(held_target.features)
    for k in range(1, len(pairs.train) + 1):
        used = pairs.train[:k]
        graphs = [used[0][0], *[t for _, t in used]]
        state = init_state_pairs(graphs[:-1], graphs[1:], [(i, i) for i in range(k)], cfg)
        pretrain_state(state)
        generated = reconstruct_pair(state, held_source, held_target).numpy()
        mse = float(((generated - truth) ** 2).mean())
        portions.append({"portion": k, "pairs": [f"{s.name}->{t.name}" for s, t in used],
                         "episodes": len(state.history), "mse": mse})
        truth_2d, gen_2d = pca_2d(truth, generated)
        for kind, pts in (("ground_truth", truth_2d), ("generated", gen_2d)):
            for node in range(pts.shape[0]):
                projections.append({"portion": k, "kind": kind, "node": node,
                                    "x": float(pts[node, 0]), "y": float(pts[node, 1]),
                                    "label": int(held_target.labels[node])})
    result = TemporalResult(pairs, portions, projections)
    if outdir is not None:
        result.files = emit_report([], outdir, projections=projections, temporal=portions)
    return result


# -- discrepancy and bound ---------------------------------------------------

def proxy_discrepancy(X_a, X_b, seed: int = 0, folds: int = 5) -> float:
    """Proxy distance ``2 (1 - 2 err)`` of a cross-validated linear domain classifier,
    clamped to [0, 2]."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedKFold, cross_val_predict
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    a = np.asarray(X_a.detach() if isinstance(X_a, torch.Tensor) else X_a, dtype=np.float64)
    b = np.asarray(X_b.detach() if isinstance(X_b, torch.Tensor) else X_b, dtype=np.float64)
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each sample set needs at least 2 points")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding widths differ: {a.shape[1]} vs {b.shape[1]}")
    X = np.vstack([a, b])
    y = np.r_[np.zeros(a.shape[0]), np.ones(b.shape[0])]
    k = max(2, min(folds, a.shape[0], b.shape[0]))
    cv = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000))
    pred = cross_val_predict(model, X, y, cv=cv)
    err = float((pred != y).mean())
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


@dataclass
class BoundReport:
    groups: list[str]
    discrepancies: list[float]
    weights: list[float]
    weighted_term: float
    worst_term: float

    @property
    def holds(self) -> bool:
        return self.weighted_term <= self.worst_term


def bound_check(weights: Sequence[float], discrepancies: Sequence[float],
                groups: Sequence[str] | None = None) -> BoundReport:
    """Compare the weight-averaged discrepancy with the worst one.

    The weighted term is evaluated as ``worst - sum w_i (worst - d_i)``: every
    subtracted term is non-negative, so rounding cannot push it above ``worst``.
    """
    w = np.asarray(weights, dtype=np.float64)
    d = np.asarray(discrepancies, dtype=np.float64)
    if w.shape != d.shape or w.ndim != 1 or w.size == 0:
        raise ValueError("weights and discrepancies must be aligned non-empty vectors")
    if bool((w < 0).any()) or not bool(np.isfinite(w).all()) or not bool(np.isfinite(d).all()):
        raise ValueError("weights must be finite and non-negative; discrepancies finite")
    if w.sum() == 0:
        raise ValueError("all group weights are zero")
    w = w / w.sum()
    worst = float(d.max())
    gaps = np.where(w > 0, w * (worst - d), 0.0)
    weighted = worst - float(gaps.sum())
    names = list(groups) if groups is not None else [str(i) for i in range(w.size)]
    return BoundReport(names, d.tolist(), w.tolist(), weighted, worst)


def bound_report_from_state(state: TrainState, pair_index: int = 0, seed: int = 0) -> BoundReport:
    """Group weights are mean curriculum weights of the last teacher update per
    (type, level); group discrepancy compares decoded and actual target rows at that level."""
    cached = getattr(state, "_cached", None)
    if cached is None:
        raise ValueError("state has no teacher weights yet; train at least one episode")
    _, weights = cached
    with torch.no_grad():
        fwd = forward_pair(state, pair_index)
    groups, ws, ds = [], [], []
    disc_cache: dict[int, float] = {}
    for (kind, level), w in sorted(weights.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        if w.size == 0:
            continue
        if level not in disc_cache:
            disc_cache[level] = proxy_discrepancy(fwd.reconstructed[level].numpy(),
                                                  fwd.target.features(level).numpy(), seed)
        groups.append(f"{kind}@{level}")
        ws.append(float(w.mean()))
        ds.append(disc_cache[level])
    return bound_check(ws, ds, groups)


# -- reports -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path: Path, fields: Sequence[str], rows: Iterable[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in fields])
    return path


ACCURACY_FIELDS = ("variant", "n_runs", "mean", "std", "accuracies", "seeds")


def emit_report(results: Sequence[ExperimentResult] | dict, outdir: str | os.PathLike,
                sweep: Sequence[dict] | None = None, scale: ScaleResult | None = None,
                metrics: Sequence[dict] | None = None, projections: Sequence[dict] | None = None,
                temporal: Sequence[dict] | None = None,
                bound: BoundReport | None = None) -> list[Path]:
    """Write CSV tables and PNG plots; each plot has a sibling CSV with its data.

    The accuracy table is always written (header only when ``results`` is empty).
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    results = list(results.values()) if isinstance(results, dict) else list(results)

    def save(fig, name: str) -> None:
        path = out / name
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        files.append(path)

    rows = [r.to_dict() for r in results]
    files.append(write_csv(out / "accuracy.csv", ACCURACY_FIELDS, rows))
    if rows:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar([r["variant"] for r in rows], [r["mean"] for r in rows],
               yerr=[r["std"] or 0.0 for r in rows], capsize=4, color="tab:blue")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1)
        fig.tight_layout()
        save(fig, "accuracy.png")

    if sweep:
        files.append(write_csv(out / "grid.csv", SWEEP_FIELDS, sweep))
        l1s = sorted({r["lambda1"] for r in sweep})
        l2s = sorted({r["lambda2"] for r in sweep})
        for col in ("test_acc", "train_acc"):
            grid = np.full((len(l1s), len(l2s)), np.nan)
            for r in sweep:
                grid[l1s.index(r["lambda1"]), l2s.index(r["lambda2"])] = r[col]
            fig, ax = plt.subplots(figsize=(4.5, 3.8))
            im = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto")
            ax.set_xticks(range(len(l2s)), [f"{v:g}" for v in l2s])
            ax.set_yticks(range(len(l1s)), [f"{v:g}" for v in l1s])
            ax.set_xlabel("lambda2")
            ax.set_ylabel("lambda1")
            ax.set_title(col)
            fig.colorbar(im)
            fig.tight_layout()
            save(fig, f"grid_{col}.png")

    if scale is not None:
        files.append(write_csv(out / "scale.csv", ("depth", "n", "p", "episodes", "seconds", "status"),
                               scale.rows))
        files.append(write_csv(out / "scale_slopes.csv", ("depth", "slope"),
                               [{"depth": k, "slope": v} for k, v in sorted(scale.slopes.items())]))
        fig, ax = plt.subplots(figsize=(5, 3.8))
        for depth in sorted(scale.slopes):
            pts = [r for r in scale.rows if r["depth"] == depth and r["seconds"]]
            if pts:
                ax.loglog([r["n"] for r in pts], [r["seconds"] for r in pts], "o-",
                          label=f"L={depth} (slope {scale.slopes[depth] or float('nan'):.2f})")
        ax.set_xlabel("target nodes")
        ax.set_ylabel("seconds")
        ax.legend()
        fig.tight_layout()
        save(fig, "scale.png")

    if metrics:
        from .trainer import METRIC_FIELDS
        files.append(write_csv(out / "weights.csv", METRIC_FIELDS, metrics))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ep = [m["episode"] for m in metrics]
        ax.plot(ep, [m["mean_weight"] for m in metrics], label="mean weight")
        ax.plot(ep, [m["active_fraction"] for m in metrics], label="active fraction")
        ax.set_xlabel("episode")
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        save(fig, "weights.png")

    if temporal:
        files.append(write_csv(out / "temporal.csv", ("portion", "pairs", "episodes", "mse"), temporal))
    if projections:
        files.append(write_csv(out / "projection.csv", ("portion", "kind", "node", "x", "y", "label"),
                               projections))
        portions = sorted({p["portion"] for p in projections})
        fig, axes = plt.subplots(1, len(portions) + 1, figsize=(3.2 * (len(portions) + 1), 3.2),
                                 squeeze=False)
        panels = [("ground_truth", portions[-1], "ground truth")] + \
            [("generated", k, f"generated ({k} pair{'s' if k > 1 else ''})") for k in portions]
        for ax, (kind, k, title) in zip(axes[0], panels):
            pts = [p for p in projections if p["kind"] == kind and p["portion"] == k]
            ax.scatter([p["x"] for p in pts], [p["y"] for p in pts],
                       c=[p["label"] for p in pts], cmap="tab10", s=8)
            ax.set_title(title, fontsize=9)
        fig.tight_layout()
        save(fig, "projection.png")

    if bound is not None:
        files.append(write_csv(out / "bound.csv", ("group", "weight", "discrepancy"),
                               [{"group": g, "weight": w, "discrepancy": d} for g, w, d in
                                zip(bound.groups, bound.weights, bound.discrepancies)]))
        (out / "bound.json").write_text(json.dumps(
            {"weighted_term": bound.weighted_term, "worst_term": bound.worst_term,
             "holds": bound.holds}, indent=1))
        files.append(out / "bound.json")
    return files
