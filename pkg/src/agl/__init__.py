"""agl: automated machine learning on graphs.

Message-passing GNNs on a small numpy autodiff core, with feature
engineering, architecture search, hyper-parameter optimisation,
ensembling and a config-driven solver.
"""
from .errors import (AGLError, ConfigError, ContractError, DerivationError, MutationError,
                     NumericalError, ParseError, ProxyError, SatisfiabilityError, SearchError,
                     SelectionError, SizeError, ValidationError)
from .graph import (DatasetSplit, Graph, TaskSpec, generate_graph_task, generate_sbm,
                    load_dataset, sample_subgraph_rw, split_kfold, write_dataset)
from .gnn import (ArchitectureDescriptor, MicroChoice, TrainedModel, assemble_model,
                  gat_descriptor, gcn_descriptor, gin_descriptor)
from .estimation import Dataset, GNNClassifier, TrainConfig, evaluate_full
from .space import SearchSpace, default_spaces

__version__ = "0.1.0"

__all__ = [
    "AGLError", "ConfigError", "ContractError", "DerivationError", "MutationError",
    "NumericalError", "ParseError", "ProxyError", "SatisfiabilityError", "SearchError",
    "SelectionError", "SizeError", "ValidationError",
    "DatasetSplit", "Graph", "TaskSpec", "generate_graph_task", "generate_sbm", "load_dataset",
    "sample_subgraph_rw", "split_kfold", "write_dataset",
    "ArchitectureDescriptor", "MicroChoice", "TrainedModel", "assemble_model", "gat_descriptor",
    "gcn_descriptor", "gin_descriptor",
    "Dataset", "GNNClassifier", "TrainConfig", "evaluate_full", "SearchSpace", "default_spaces",
]
