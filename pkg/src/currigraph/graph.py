"""Graph data model, on-disk bundles, label splits and synthetic generators."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNLABELED = -1


class GraphDataError(ValueError):
    """Base class for malformed graph data."""


class BundleFormatError(GraphDataError):
    """A bundle is missing a file or a file does not follow the format."""


class BundleIntegrityError(GraphDataError):
    """Bundle files disagree with each other (shapes, counts)."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted attributed graph.

    ``edges`` is an (m, 2) int64 array of canonical pairs (src < dst), sorted
    lexicographically. Use :meth:`from_edges` to build one from arbitrary
    pair lists.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "graph"

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        for arr in (edges, features, labels):
            arr.setflags(write=False)
        self._validate()

    def _validate(self) -> None:
        n = self.num_nodes
        if n < 0:
            raise GraphDataError(f"num_nodes must be >= 0, got {n}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise BundleIntegrityError(
                f"features must have {n} rows, got shape {self.features.shape}")
        if self.labels.shape[0] != n:
            raise BundleIntegrityError(f"labels must have {n} entries, got {self.labels.shape[0]}")
        if not np.all(np.isfinite(self.features)):
            raise GraphDataError("features contain non-finite values")
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= n:
                raise GraphDataError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise GraphDataError("self-loops are not allowed")
            if np.any(e[:, 0] > e[:, 1]):
                raise GraphDataError("edges must be canonical (src < dst)")
            keys = e[:, 0] * n + e[:, 1]
            if np.any(np.diff(keys) <= 0):
                raise GraphDataError("edges must be sorted and free of duplicates")
        labeled = self.labels[self.labels != UNLABELED]
        if labeled.size and (labeled.min() < 0 or labeled.max() >= self.num_classes):
            raise GraphDataError(
                f"labels must be -1 or in [0, {self.num_classes}), got range "
                f"[{labeled.min()}, {labeled.max()}]")

    @classmethod
    def from_edges(cls, num_nodes: int, pairs, features, labels=None,
                   num_classes: int = 0, name: str = "graph") -> "Graph":
        """Canonicalize an arbitrary undirected pair list (drops self-loops and repeats)."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        pairs = np.sort(pairs, axis=1)
        pairs = np.unique(pairs, axis=0) if pairs.size else pairs
        if labels is None:
            labels = np.full(num_nodes, UNLABELED, dtype=np.int64)
        return cls(num_nodes, pairs, features, labels, num_classes, name)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}

    def labeled_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)

    def dense_adjacency(self) -> np.ndarray:
        adj = np.zeros((self.num_nodes, self.num_nodes))
        if self.num_edges:
            adj[self.edges[:, 0], self.edges[:, 1]] = 1.0
            adj[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return adj

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and self.num_classes == other.num_classes
                and self.name == other.name
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    stratified: bool = True
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(),
                "test": self.test.tolist(), "stratified": self.stratified}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        arr = lambda key: np.asarray(d[key], dtype=np.int64)  # noqa: E731
        return cls(arr("train"), arr("val"), arr("test"), bool(d.get("stratified", True)))


# -- bundles -----------------------------------------------------------------

_META_KEYS = ("num_nodes", "feature_dim", "num_classes", "feature_file", "name")


def _read_edges(path: Path, num_nodes: int) -> np.ndarray:
    seen: dict[tuple[int, int], tuple[int, bool]] = {}
    problems: list[str] = []
    symmetrized = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["src", "dst"]:
            raise BundleFormatError(f"{path}: expected header 'src,dst', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                a, b = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise BundleFormatError(f"{path}:{lineno}: bad edge row {row}") from exc
            if a == b:
                problems.append(f"line {lineno}: self-loop ({a},{b})")
                continue
            if not (0 <= a < num_nodes and 0 <= b < num_nodes):
                problems.append(f"line {lineno}: endpoint out of range ({a},{b})")
                continue
            flipped = a > b
            key = (min(a, b), max(a, b))
            if key in seen:
                first_line, first_flipped = seen[key]
                # the two directions of one directed pair merge into a single edge
                if flipped != first_flipped:
                    continue
                problems.append(f"line {lineno}: duplicate of line {first_line} {key}")
                continue
            seen[key] = (lineno, flipped)
            symmetrized += flipped
    if problems:
        raise GraphDataError(f"{path}: rejected edges: " + "; ".join(problems))
    if symmetrized:
        logger.warning("%s: symmetrized %d directed edge rows", path, symmetrized)
    if not seen:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(seen), dtype=np.int64)


def load_graph_bundle(path: str | os.PathLike) -> Graph:
    """Read a bundle directory (meta.json, edges.csv, nodes.csv, features.*)."""
    root = Path(path)
    meta_path = root / "meta.json"
    for required in ("meta.json", "edges.csv", "nodes.csv"):
        if not (root / required).is_file():
            raise BundleFormatError(f"{root}: missing {required}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{meta_path}: invalid JSON: {exc}") from exc
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise BundleFormatError(f"{meta_path}: missing keys {missing}")
    n, d = int(meta["num_nodes"]), int(meta["feature_dim"])
    feature_file = meta["feature_file"]
    if feature_file not in ("features.csv", "features.bin"):
        raise BundleFormatError(f"{meta_path}: unknown feature_file {feature_file!r}")
    fpath = root / feature_file
    if not fpath.is_file():
        raise BundleFormatError(f"{root}: missing {feature_file}")

    if feature_file == "features.bin":
        raw = fpath.read_bytes()
        if len(raw) != n * d * 4:
            raise BundleIntegrityError(
                f"{fpath}: expected {n * d * 4} bytes for {n}x{d} float32, got {len(raw)}")
        features = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    else:
        features = np.loadtxt(fpath, delimiter=",", dtype=np.float64, ndmin=2)
        if n == 0 or d == 0:
            features = features.reshape(n, d)
        if features.shape != (n, d):
            raise BundleIntegrityError(f"{fpath}: expected shape ({n}, {d}), got {features.shape}")

    labels = np.full(n, UNLABELED, dtype=np.int64)
    with open(root / "nodes.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["node_id", "label"]:
            raise BundleFormatError(f"{root / 'nodes.csv'}: expected header 'node_id,label'")
        count = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            node, label = int(row[0]), int(row[1])
            if not 0 <= node < n:
                raise BundleIntegrityError(f"nodes.csv:{lineno}: node id {node} out of range")
            labels[node] = label
            count += 1
        if count != n:
            raise BundleIntegrityError(f"nodes.csv: expected {n} rows, got {count}")

    edges = _read_edges(root / "edges.csv", n)
    return Graph(n, edges, features, labels, int(meta["num_classes"]), str(meta["name"]))


def save_graph_bundle(g: Graph, path: str | os.PathLike, feature_format: str = "csv") -> None:
    """Write ``g`` as a bundle directory. ``feature_format`` is "csv" (exact) or "bin" (float32)."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        feature_file = f"features.{feature_format}"
        meta = {"num_nodes": g.num_nodes, "feature_dim": g.feature_dim,
                "num_classes": g.num_classes, "feature_file": feature_file, "name": g.name}
        (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        with open(root / "edges.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src", "dst"])
            w.writerows(g.edges.tolist())
        with open(root / "nodes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "label"])
            w.writerows(zip(range(g.num_nodes), g.labels.tolist()))
        stale = root / ("features.bin" if feature_format == "csv" else "features.csv")
        if stale.exists():
            stale.unlink()
        if feature_format == "bin":
            (root / feature_file).write_bytes(g.features.astype("<f4").tobytes())
        elif feature_format == "csv":
            with open(root / feature_file, "w") as fh:
                for row in g.features:
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")
        else:
            raise ValueError(f"unknown feature_format {feature_format!r}")
    except OSError as exc:
        raise OSError(f"failed to write graph bundle at {root}: {exc}") from exc


# -- splits ------------------------------------------------------------------

def _part_sizes(total: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * total for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    # largest remainder; ties broken toward earlier parts
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: total - sum(sizes)]:
        sizes[i] += 1
    for i, r in enumerate(ratios):
        if r > 0 and sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            if sizes[donor] > 1:
                sizes[donor] -= 1
                sizes[i] = 1
    return sizes


def make_split(g: Graph, ratios: Sequence[float] = (0.04, 0.16, 0.80), seed: int = 0) -> Split:
    """Split the labeled nodes of ``g`` into train/val/test, stratified by class.

    Nodes are shuffled within each class and interleaved by within-class rank,
    so every contiguous cut of the ordering keeps class proportions.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    labeled = g.labeled_nodes()
    if labeled.size == 0:
        raise ValueError(f"graph {g.name!r} has no labeled nodes")
    labels = g.labels[labeled]
    parts = sum(r > 0 for r in ratios)
    classes, counts = np.unique(labels, return_counts=True)
    warnings: tuple[str, ...] = ()
    stratified = bool(counts.min() >= parts)
    if stratified:
        rank = np.empty(labeled.size)
        for c in classes:
            idx = np.flatnonzero(labels == c)
            perm = rng.permutation(idx.size)
            rank[idx[perm]] = (np.arange(idx.size) + rng.random()) / idx.size
        order = labeled[np.lexsort((rng.random(labeled.size), rank))]
    else:
        warnings = (f"class count {counts.min()} < {parts} split parts; split is unstratified",)
        logger.warning(warnings[0])
        order = labeled[rng.permutation(labeled.size)]
    sizes = _part_sizes(labeled.size, ratios)
    cuts = np.cumsum(sizes)
    train, val, test = order[: cuts[0]], order[cuts[0]: cuts[1]], order[cuts[1]:]
    return Split(np.sort(train), np.sort(val), np.sort(test), stratified, warnings)


# -- generators --------------------------------------------------------------

def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def generate_er(n: int, p: float, seed: int, feature_dim: int = 16,
                name: str | None = None) -> Graph:
    """Erdos-Renyi G(n, p) with standard-normal node features."""
    if n <= 0:
        raise GraphDataError("cannot generate an empty graph (n = 0)")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    rows, cols = _upper_pairs(n)
    keep = rng.random(rows.size) < p
    edges = np.stack([rows[keep], cols[keep]], axis=1)
    features = rng.standard_normal((n, feature_dim))
    return Graph(n, edges, features, np.full(n, UNLABELED), 0, name or f"er_n{n}_s{seed}")


def _sbm_structure(sizes: Sequence[int], p_in: float, p_out: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    blocks = np.repeat(np.arange(len(sizes)), sizes)
    rows, cols = _upper_pairs(blocks.size)
    prob = np.where(blocks[rows] == blocks[cols], p_in, p_out)
    keep = rng.random(rows.size) < prob
    return np.stack([rows[keep], cols[keep]], axis=1), blocks


def generate_sbm_pair(block_sizes_s: Sequence[int], block_sizes_t: Sequence[int],
                      p_in: float, p_out: float, feature_noise: float, seed: int,
                      feature_dim: int = 16, node_std: float = 1.0) -> tuple[Graph, Graph]:
    """Source/target SBM graphs sharing community structure and feature centroids.

    Block ``b`` has a centroid drawn once; the target copy of that centroid is
    shifted by ``feature_noise`` times a standard-normal vector. Each node gets
    its block centroid plus isotropic noise of scale ``node_std``; labels are
    block ids.
    """
    if len(block_sizes_s) != len(block_sizes_t):
        raise ValueError("source and target must have the same number of blocks")
    if min(block_sizes_s) <= 0 or min(block_sizes_t) <= 0:
        raise ValueError("block sizes must be positive")
    if not p_in > p_out:
        raise ValueError(f"p_in must exceed p_out, got {p_in} <= {p_out}")
    if not (0 <= p_out and p_in <= 1):
        raise ValueError("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    k = len(block_sizes_s)
    centroids_s = rng.standard_normal((k, feature_dim))
    centroids_t = centroids_s + feature_noise * rng.standard_normal((k, feature_dim))
    graphs = []
    for role, sizes, centroids in (("source", block_sizes_s, centroids_s),
                                   ("target", block_sizes_t, centroids_t)):
        edges, blocks = _sbm_structure(sizes, p_in, p_out, rng)
        features = centroids[blocks] + node_std * rng.standard_normal((blocks.size, feature_dim))
        graphs.append(Graph(blocks.size, edges, features, blocks, k, f"sbm_{role}_s{seed}"))
    return graphs[0], graphs[1]


def sbm_centroids(block_count: int, feature_dim: int, feature_noise: float,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Re-derive the (source, target) centroids used by :func:`generate_sbm_pair`."""
    rng = np.random.default_rng(seed)
    cs = rng.standard_normal((block_count, feature_dim))
    return cs, cs + feature_noise * rng.standard_normal((block_count, feature_dim))


def generate_snapshots(block_sizes: Sequence[int], steps: int, p_in: float, p_out: float,
                       rewire: float = 0.1, drift: float = 0.2, seed: int = 0,
                       feature_dim: int = 16, name: str = "snap") -> list[Graph]:
    """An evolving SBM: each step re-draws a ``rewire`` fraction of node pairs and
    moves the block centroids by ``drift`` times a standard-normal step.

    Node ids and labels (block ids) stay fixed across snapshots; names are
    ``<name>_1 .. <name>_<steps>`` in chronological order.
    """
    if steps < 1:
        raise ValueError("need at least one snapshot")
    if not 0.0 <= rewire <= 1.0:
        raise ValueError(f"rewire must lie in [0, 1], got {rewire}")
    if min(block_sizes) <= 0:
        raise ValueError("block sizes must be positive")
    rng = np.random.default_rng(seed)
    blocks = np.repeat(np.arange(len(block_sizes)), block_sizes)
    n = blocks.size
    rows, cols = _upper_pairs(n)
    prob = np.where(blocks[rows] == blocks[cols], p_in, p_out)
    present = rng.random(rows.size) < prob
    centroids = rng.standard_normal((len(block_sizes), feature_dim))
    out = []
    for t in range(steps):
        if t:
            redraw = rng.random(rows.size) < rewire
            present = np.where(redraw, rng.random(rows.size) < prob, present)
            centroids = centroids + drift * rng.standard_normal(centroids.shape)
        features = centroids[blocks] + rng.standard_normal((n, feature_dim))
        edges = np.stack([rows[present], cols[present]], axis=1)
        out.append(Graph(n, edges, features, blocks, len(block_sizes), f"{name}_{t + 1}"))
    return out
