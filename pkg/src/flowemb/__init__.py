"""Flow embeddings for encrypted-traffic classification by nearest-neighbor retrieval."""

from .data import ClassTable, FlowRecord, FlowSet, PacketSequence, SplitSpec
from .model import ArcFaceConfig, BackboneConfig, EmbeddingModel
from .retrieval import EmbeddingDB, Neighborhoods, rank, vote
from .train import TrainConfig, fit

__all__ = [
    "ArcFaceConfig",
    "BackboneConfig",
    "ClassTable",
    "EmbeddingDB",
    "EmbeddingModel",
    "FlowRecord",
    "FlowSet",
    "Neighborhoods",
    "PacketSequence",
    "SplitSpec",
    "TrainConfig",
    "fit",
    "rank",
    "vote",
]

__version__ = "0.1.0"
