"""Fairness-aware link prediction and graph generation on small dense graphs."""

from .graph import (EdgeSplit, Graph, GroupEdgeMass, SensitivePartition, group_edge_mass, load_graph,
                    read_graph, read_split, save_graph, save_split, sbm_generate, split_edges)
from .fairness import (FairnessReport, delta_eo, delta_sp, optimal_targets, regularizer_fairwire,
                       regularizer_full)

__all__ = [
    "EdgeSplit", "Graph", "GroupEdgeMass", "SensitivePartition", "group_edge_mass", "load_graph",
    "read_graph", "read_split", "save_graph", "save_split", "sbm_generate", "split_edges",
    "FairnessReport", "delta_eo", "delta_sp", "optimal_targets", "regularizer_fairwire",
    "regularizer_full",
]
