"""Deterministic desk-scale simulator for cloud-edge personalized federated learning."""

from .config import ConfigError, ExperimentConfig, canonical_dict, load_config, parse_config
from .data import (
    ClientDataset,
    LabeledPool,
    PartitionPlan,
    RawRecording,
    Sample,
    SharedSet,
    apply_data_sharing,
    build_shared_set,
    load_csv,
    partition,
    synth_har,
    window_features,
    write_csv,
)
from .harness import (
    ExperimentReport,
    SixNumberSummary,
    emit_report,
    run_experiment,
    summarize,
    sweep_k,
)
from .nn import (
    Conv3x3,
    Dense,
    Flatten,
    LayerMask,
    MaxPool2x2,
    Model,
    ModelSpec,
    ReLU,
    Softmax,
    TrainConfig,
    build_model,
    evaluate,
    forward,
    loss_and_grad,
    param_count,
    sgd_step,
    train_local,
)
from .personalize import (
    FedDistill,
    FedPer,
    FineTune,
    GlobalOnly,
    MamlFineTune,
    PersonalizedOutcome,
    personalize_finetune,
    personalize_global_only,
    personalize_maml,
    train_feddistill,
    train_fedper,
)
from .protocol import (
    ClientState,
    CommReport,
    FdOptions,
    RoundConfig,
    RoundRecord,
    UpMessage,
    comm_totals,
    fedavg_aggregate,
    run_fd_round,
    run_federation,
    run_round,
    sample_clients,
)

__version__ = "0.1.0"
