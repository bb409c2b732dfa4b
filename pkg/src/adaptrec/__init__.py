"""Pre-trained localized collaborative filtering with a property-conditioned GNN adaptor."""

from .graph import BipartiteGraph, EdgeSplit, load_edge_list, read_manifest, split_dataset, sparsify_train
from .model import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from .props import PropertyVector, compute_properties

__version__ = "0.1.0"

__all__ = [
    "BipartiteGraph",
    "Checkpoint",
    "EdgeSplit",
    "ModelConfig",
    "PropertyVector",
    "compute_properties",
    "load_checkpoint",
    "load_edge_list",
    "read_manifest",
    "save_checkpoint",
    "sparsify_train",
    "split_dataset",
]
