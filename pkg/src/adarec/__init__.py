"""Teacher-supervised architecture search for compact sequential recommenders."""

from .autodiff import NonFiniteError, ShapeError, Tensor
from .cost import CostTable, efficiency_loss, op_flops, op_param_count
from .data import DataError, Vocabulary, build_sequences, ingest, markov_scene, split_dataset
from .distill import LayerSet, Projection, TransportPlan, emd, hidden_loss, solve_transport
from .evaluation import RankResult, evaluate, metrics_at_n, rank_of_target
from .search_space import OPS, ArchParams, DiscreteCell, StudentModel, derive_architecture
from .teacher import TeacherConfig, TeacherModel, train_teacher
from .trainer import SearchConfig, retrain, search

__version__ = "0.1.0"

__all__ = [
    "NonFiniteError", "ShapeError", "Tensor", "CostTable", "efficiency_loss", "op_flops", "op_param_count",
    "DataError", "Vocabulary", "build_sequences", "ingest", "markov_scene", "split_dataset",
    "LayerSet", "Projection", "TransportPlan", "emd", "hidden_loss", "solve_transport",
    "RankResult", "evaluate", "metrics_at_n", "rank_of_target",
    "OPS", "ArchParams", "DiscreteCell", "StudentModel", "derive_architecture",
    "TeacherConfig", "TeacherModel", "train_teacher", "SearchConfig", "retrain", "search",
]
