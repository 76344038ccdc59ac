"""Curriculum-guided pre-training of graph neural networks across graphs.

A source graph is pooled into a small hierarchy, its coarsest features are
translated into the target's feature space and expanded down the target's
own hierarchy. A student GAT learns masked target attributes and edges at
every level while a self-paced teacher decides how much each signal counts.
"""

from .graph import Graph, Split, generate_er, generate_sbm_pair, load_graph_bundle, make_split, save_graph_bundle
from .trainer import TrainConfig, TrainState, load_checkpoint, pretrain, save_checkpoint

__all__ = [
    "Graph", "Split", "TrainConfig", "TrainState", "generate_er", "generate_sbm_pair",
    "load_graph_bundle", "load_checkpoint", "make_split", "pretrain", "save_checkpoint",
    "save_graph_bundle",
]
__version__ = "0.1.0"
