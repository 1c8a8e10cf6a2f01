"""Checkpoint weight surgery and desk-scale transfer experiments.

The package reads and writes a simple tensor container format, selects
low-utility weights, reinitializes them under several strategies, and
measures the effect on fine-tuning with a rank-based comparison report.
"""

from .analysis import (
    AnalysisError,
    Histogram,
    HistogramSet,
    build_histogram_set,
    export_histograms,
    export_per_layer_csv,
    histogram,
)
from .container import (
    Checkpoint,
    ClassificationRules,
    ContainerError,
    DType,
    ParamClass,
    TensorMeta,
    classify_params,
    load_checkpoint,
    save_checkpoint,
)
from .seeding import derive_seed, substream
from .stats import (
    CaseRow,
    ComparisonReport,
    GroupSummary,
    MWUResult,
    RunSample,
    StatsError,
    compare_cases,
    mann_whitney_u,
    read_runs_file,
    summarize,
    write_runs_file,
)
from .surgery import (
    NonstandardProportionWarning,
    PruneSpec,
    ReinitKind,
    SurgeryConfig,
    SurgeryError,
    SurgeryReport,
    TagError,
    TensorRecord,
    UtilityKind,
    apply_surgery,
    layer_mean,
    load_config_file,
    noise_scale,
    parse_config_tag,
    reinit_apply,
    select_prune_mask,
    utility_gradient,
    utility_magnitude,
)
from .tinytrain import (
    MLP,
    Dataset,
    ExperimentResult,
    Protocol,
    ProtocolError,
    SplitDataset,
    TaskSpec,
    TrainConfig,
    TrainError,
    TrainResult,
    accuracy,
    checkpoint_to_model,
    induce_saturation,
    load_protocol,
    loss_and_grads,
    model_to_checkpoint,
    run_experiment,
    synth_transfer_tasks,
    train,
)

__version__ = "1.0.0"

__all__ = [
    "__version__",
    # container
    "Checkpoint", "ClassificationRules", "ContainerError", "DType", "ParamClass",
    "TensorMeta", "classify_params", "load_checkpoint", "save_checkpoint",
    # seeding
    "derive_seed", "substream",
    # surgery
    "NonstandardProportionWarning", "PruneSpec", "ReinitKind", "SurgeryConfig",
    "SurgeryError", "SurgeryReport", "TagError", "TensorRecord", "UtilityKind",
    "apply_surgery", "layer_mean", "load_config_file", "noise_scale",
    "parse_config_tag", "reinit_apply", "select_prune_mask", "utility_gradient",
    "utility_magnitude",
    # stats
    "CaseRow", "ComparisonReport", "GroupSummary", "MWUResult", "RunSample",
    "StatsError", "compare_cases", "mann_whitney_u", "read_runs_file", "summarize",
    "write_runs_file",
    # analysis
    "AnalysisError", "Histogram", "HistogramSet", "build_histogram_set",
    "export_histograms", "export_per_layer_csv", "histogram",
    # training and experiments
    "MLP", "Dataset", "ExperimentResult", "Protocol", "ProtocolError",
    "SplitDataset", "TaskSpec", "TrainConfig", "TrainError", "TrainResult",
    "accuracy", "checkpoint_to_model", "induce_saturation", "load_protocol",
    "loss_and_grads", "model_to_checkpoint", "run_experiment",
    "synth_transfer_tasks", "train",
]
