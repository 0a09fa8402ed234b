"""Source-free universal domain adaptation: source data generation followed by
weighted adversarial model adaptation."""
from .datamodel import (
    DomainDataset, ExperimentConfig, LabelSet, UniDATask, build_unida_task,
    default_threshold, jaccard_index,
)

__version__ = "0.1.0"

__all__ = [
    "DomainDataset", "ExperimentConfig", "LabelSet", "UniDATask", "build_unida_task",
    "default_threshold", "jaccard_index",
]
