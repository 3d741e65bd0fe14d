"""Neuroevolution of small convolutional classifiers on plain numpy.

A (1+1) evolutionary search with probabilistic niching over stacked
conv/batch-norm/ReLU blocks, carrying trained weights across mutations
wherever shapes survive, plus the training engine, dataset plumbing, and
experiment harness needed to run inheritance-vs-baseline comparisons.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, Split, SynthSpec, load_cifar, load_cifar_test, load_idx, split, synth_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    ConvevoError,
    DivergedEvaluation,
    EditError,
    FormatError,
    InapplicableMutation,
    LabelError,
    RunFailure,
    SearchExhausted,
    ShapeError,
    SplitSizeError,
    StoreError,
)
from .evolution import (
    EAConfig,
    EAResult,
    RunRecord,
    RunState,
    load_run_state,
    niche,
    read_run_log,
    run_ea,
    save_run_state,
    write_run_log,
)
from .fitness import (
    FinetuneSchedule,
    TrainProtocol,
    classification_accuracy,
    evaluate,
    shuffle_and_batch,
    train_to_completion,
)
from .flops import flops_estimate, per_example_forward_flops
from .genome import (
    ConvBlockGene,
    Genome,
    Individual,
    WeightStore,
    canonical_hash,
    check_store,
    forward,
    fresh_weights,
    loss_and_gradients,
    random_initial_individual,
    validate,
)
from .mutation import (
    History,
    MutationEdit,
    MutationKind,
    RngStreams,
    apply_mutation,
    inherit_weights,
    mutate_until_novel,
    sample_mutation,
)
from .stats import mann_whitney_u_one_sided

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConvBlockGene",
    "ConvevoError",
    "Dataset",
    "DivergedEvaluation",
    "EAConfig",
    "EAResult",
    "EditError",
    "FinetuneSchedule",
    "FormatError",
    "Genome",
    "History",
    "Individual",
    "InapplicableMutation",
    "LabelError",
    "MutationEdit",
    "MutationKind",
    "RngStreams",
    "RunFailure",
    "RunRecord",
    "RunState",
    "SearchExhausted",
    "ShapeError",
    "Split",
    "SplitSizeError",
    "StoreError",
    "SynthSpec",
    "TrainProtocol",
    "WeightStore",
    "apply_mutation",
    "canonical_hash",
    "check_store",
    "classification_accuracy",
    "evaluate",
    "flops_estimate",
    "forward",
    "fresh_weights",
    "inherit_weights",
    "load_checkpoint",
    "load_cifar",
    "load_cifar_test",
    "load_idx",
    "load_run_state",
    "loss_and_gradients",
    "mann_whitney_u_one_sided",
    "mutate_until_novel",
    "niche",
    "per_example_forward_flops",
    "random_initial_individual",
    "read_run_log",
    "run_ea",
    "sample_mutation",
    "save_checkpoint",
    "save_run_state",
    "split",
    "shuffle_and_batch",
    "synth_dataset",
    "train_to_completion",
    "validate",
    "write_run_log",
]
