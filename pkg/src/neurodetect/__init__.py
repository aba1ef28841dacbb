"""Model-based and data-driven symbol detection for finite-memory and MIMO channels."""

from .channels import (
    BPSK,
    OOK,
    Constellation,
    Dataset,
    FiniteMemoryChannel,
    MimoChannel,
    RngStream,
    generate_dataset,
    make_decay_vector,
    spatial_decay_matrix,
)
from .detect_ml import (
    AnalyticLikelihoodModel,
    DeepSicNet,
    LikelihoodModel,
    bcjrnet_detect,
    deepsic_detect,
    load_model,
    save_model,
    train_likelihood_model,
    viterbinet_detect,
)
from .detect_model import bcjr, exact_cost, exact_function_node, iterative_sic, map_mimo, viterbi
from .harness import ExperimentConfig, SerCurve, load_config, oracle_check, run_sweep, ser

__version__ = "0.1.0"

__all__ = [
    "BPSK",
    "OOK",
    "AnalyticLikelihoodModel",
    "Constellation",
    "Dataset",
    "DeepSicNet",
    "ExperimentConfig",
    "FiniteMemoryChannel",
    "LikelihoodModel",
    "MimoChannel",
    "RngStream",
    "SerCurve",
    "bcjr",
    "bcjrnet_detect",
    "deepsic_detect",
    "exact_cost",
    "exact_function_node",
    "generate_dataset",
    "iterative_sic",
    "load_config",
    "load_model",
    "make_decay_vector",
    "map_mimo",
    "oracle_check",
    "run_sweep",
    "save_model",
    "ser",
    "spatial_decay_matrix",
    "train_likelihood_model",
    "viterbi",
    "viterbinet_detect",
]
