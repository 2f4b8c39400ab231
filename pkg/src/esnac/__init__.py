"""Compressed-architecture search with a trainable sequence-embedding kernel.

The package searches for smaller variants of a teacher network.  Candidate
architectures are produced by mutation operators (layer removal, channel
shrinkage, added skip connections), encoded as padded feature sequences,
embedded by a bidirectional LSTM, and scored by a Gaussian process whose
RBF kernel operates on the learned embeddings.  Expected improvement drives
the proposal of new candidates; several kernels are trained per step on
random subsets of the evaluation history.
"""

from .archgraph import (ArchGraph, InvalidGraphError, InvalidPlanError,
                        LAYER_TYPES, LayerNode, MutationPlan, SamplePolicy,
                        apply_mutation, load_graph, param_count,
                        removable_nodes, sample_compressed, sample_plan,
                        save_graph, shrink_groups, validate_plan)
from .teachers import chain_teacher, residual_teacher
from .encode import (AttributeScaling, InconsistentEncodingError,
                     OffsetOverflowError, SequenceEncoding, TooManyLayersError,
                     decode, encode, encoding_width, to_csv)
from .embedder import (DimensionMismatchError, Embedding, EmbedderParams,
                       embed, embed_backward, init_params, load_params,
                       save_params)
from .gp import (EvalRecord, EvalSet, KernelConfig, NonFiniteLossError,
                 NumericalFailureError, Posterior, PosteriorModel,
                 RegressionHead, TrainConfig, kernel, loo_loss, loss_and_grad,
                 posterior, train_kernel)
from .acquisition import (AcquisitionConfig, EmptyCandidateSetError,
                          expected_improvement, maximize)
from .evaluator import (BackendMalformedResponseError,
                        BackendReportedFailureError, BackendTimeoutError,
                        CorruptLogError, EvalLog, EvalRequestMode, Evaluator,
                        ExternalBackend, RewardInputs, SurrogateBackend,
                        SurrogateConfig, compression_ratio, load_eval_records,
                        load_eval_set, reward, surrogate_accuracy,
                        surrogate_features)
from .search import (ConfigError, SearchConfig, SearchTrace, StepEval,
                     WidthMismatchError, derive_seed, run_random_search,
                     run_search, run_transfer_search)
from .report import write_report

__version__ = "0.1.0"

__all__ = [
    "ArchGraph", "InvalidGraphError", "InvalidPlanError", "LAYER_TYPES",
    "LayerNode", "MutationPlan", "SamplePolicy", "apply_mutation",
    "load_graph", "param_count", "removable_nodes", "sample_compressed",
    "sample_plan", "save_graph", "shrink_groups", "validate_plan",
    "chain_teacher", "residual_teacher",
    "AttributeScaling", "InconsistentEncodingError", "OffsetOverflowError",
    "SequenceEncoding", "TooManyLayersError", "decode", "encode",
    "encoding_width", "to_csv",
    "DimensionMismatchError", "Embedding", "EmbedderParams", "embed",
    "embed_backward", "init_params", "load_params", "save_params",
    "EvalRecord", "EvalSet", "KernelConfig", "NonFiniteLossError",
    "NumericalFailureError", "Posterior", "PosteriorModel", "RegressionHead",
    "TrainConfig", "kernel", "loo_loss", "loss_and_grad", "posterior",
    "train_kernel",
    "AcquisitionConfig", "EmptyCandidateSetError", "expected_improvement",
    "maximize",
    "BackendMalformedResponseError", "BackendReportedFailureError",
    "BackendTimeoutError", "CorruptLogError", "EvalLog", "EvalRequestMode",
    "Evaluator", "ExternalBackend", "RewardInputs", "SurrogateBackend",
    "SurrogateConfig", "compression_ratio", "load_eval_records",
    "load_eval_set", "reward", "surrogate_accuracy", "surrogate_features",
    "ConfigError", "SearchConfig", "SearchTrace", "StepEval",
    "WidthMismatchError", "derive_seed", "run_random_search", "run_search",
    "run_transfer_search",
    "write_report",
    "__version__",
]
