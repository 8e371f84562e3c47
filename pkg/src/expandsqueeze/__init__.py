"""Multi-task, multi-source pre-training with expansion and squeeze stages."""

from .config import (
    ConfigError,
    ExperimentConfig,
    HeadSpec,
    ProbeConfig,
    ScheduleConfig,
    SourceSpec,
    SqueezeOptions,
    SubBackboneSpec,
    SyntheticGeneratorSpec,
    TaskSpec,
    ValidationReport,
    config_fingerprint,
    load_experiment_config,
    serialize_experiment_config,
    validate_registry,
)
from .backbones import (
    SubBackbone,
    build_sub_backbone,
    count_parameters,
    scale_channels,
)
from .reconciliation import (
    ExpandedBackbone,
    FusedBranch,
    ReconciliationLink,
    build_reconciliation_graph,
    fused_forward,
    gradient_isolation_check,
)
from .expansion import (
    ExpansionTrainer,
    HardSharingTrainer,
    TrainingError,
    average_multi_source_loss,
    lr_at,
    pre_distill_hint_loss,
    sample_task_batch,
)
from .squeeze import (
    GuidanceLayer,
    PrunedModel,
    SqueezePlan,
    compute_magnitude_masks,
    distill_squeeze,
    guidance_forward,
    magnitude_prune,
    run_reversed_pipeline,
    squeeze_loss,
)
from .tasks import SyntheticSource, make_synthetic_source, task_loss
from .probe import TransferReport, evaluate_transfer, extract_features, linear_probe
from .checkpoint import CheckpointBundle, CheckpointError, load_checkpoint, save_checkpoint
from .metrics import MetricsLogger, read_metrics

__version__ = "0.1.0"
