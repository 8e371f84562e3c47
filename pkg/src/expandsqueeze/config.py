"""Declarative experiment configuration: tasks, sources, backbones, schedules.

A whole experiment is described by one versioned YAML file. The loader
resolves defaults, and ``validate_registry`` checks every cross-reference
and consistency rule before any training starts. Configs are immutable
(frozen dataclasses) once loaded and can be shared freely across threads.

Config file schema (version 1), all sections under one document::

    version: 1
    name: base                     # experiment label, used in artifact names
    global_seed: 7
    output_dir: runs/base
    variant: xlearner              # xlearner | xlearner_r | xlearner_t |
                                   # xlearner_p | xlearner_pp | hard_sharing
    recon_topology: shallow-to-deep   # optional; defaulted from the variant
    backbone:
      family: toy-conv             # toy-conv | resnet50
      stage_channels: [8, 16, 32, 64]
      width_scale: 1.0
      channel_multiple: 4
      input_shape: [3, 64, 64]
    tasks:
      - task_id: shapes
        loss_kind: multiclass-ce   # multiclass-ce | per-pixel-ce
        head: {num_classes: 4}
        source_ids: [shapes_a, shapes_b]
    sources:
      - source_id: shapes_a
        task_id: shapes
        size: 512
        seed: 100
        generator:
          kind: shape-class        # shape-class | texture-class | shape-seg
          num_classes: 4
          image_size: [64, 64]
          noise_level: 0.12
          palette_seed: 0
    expansion_schedule:
      total_steps: 2000
      phase_threshold: 1000        # optional; default ceil(total_steps / 2)
      batch_size: 32
      base_lr: 0.2
      momentum: 0.9
      weight_decay: 1.0e-4
      decay_factors: [0.5, 0.2, 0.1]
      decay_milestones: [0.5, 0.7, 0.9]
    squeeze_schedule: {total_steps: 1000, ...}
    squeeze:
      distill_stage: 4             # optional; defaults to the last stage
      prune_target_sparsity: 0.5   # optional; defaults to 1 - 1/T
      student_init: glorot         # glorot | warm-start:<task_id>
      hint_weight: 1.0
      pre_distill_steps: 200       # optional; defaults to phase_threshold
    eval:
      lambda_grid: [1.0e-1, 1.0e-2, 1.0e-3, 1.0e-4, 1.0e-5]
      max_iterations: 1000
      feature_stage: 4             # optional; defaults to the last stage
      probe_train_size: 320
      probe_test_size: 80
      transfer_datasets: [<generator spec>, ...]
      seg_finetune: <generator spec>   # optional held-out dense task
      seg_finetune_steps: 150
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_VERSION = 1

VARIANTS = (
    "xlearner",
    "xlearner_r",
    "xlearner_t",
    "xlearner_p",
    "xlearner_pp",
    "hard_sharing",
)
TOPOLOGIES = ("shallow-to-deep", "deep-to-shallow", "none")
LOSS_KINDS = ("multiclass-ce", "per-pixel-ce")
GENERATOR_KINDS = ("shape-class", "texture-class", "shape-seg")
BACKBONE_FAMILIES = ("toy-conv", "resnet50")

# Default topology implied by each variant when the config omits it.
DEFAULT_TOPOLOGY = {
    "xlearner": "shallow-to-deep",
    "xlearner_r": "shallow-to-deep",
    "xlearner_t": "deep-to-shallow",
    "xlearner_p": "shallow-to-deep",
    "xlearner_pp": "shallow-to-deep",
    "hard_sharing": "none",
}


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed or fails validation."""

    def __init__(self, message: str, issues: list["ValidationIssue"] | None = None):
        super().__init__(message)
        self.issues = issues or []


def _as_tuple(value: Any) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


@dataclass(frozen=True)
class SyntheticGeneratorSpec:
    """Recipe for one deterministic synthetic data source."""

    kind: str
    num_classes: int
    image_size: tuple[int, int] = (64, 64)
    noise_level: float = 0.1
    palette_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))


@dataclass(frozen=True)
class HeadSpec:
    """Task head: pooled linear classifier or 1x1-conv dense predictor."""

    kind: str  # "classification" | "segmentation"
    num_classes: int


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    loss_kind: str
    head: HeadSpec
    source_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "source_ids", tuple(self.source_ids))

    @property
    def num_sources(self) -> int:
        return len(self.source_ids)


@dataclass(frozen=True)
class SourceSpec:
    source_id: str
    task_id: str
    generator: SyntheticGeneratorSpec
    size: int
    seed: int


@dataclass(frozen=True)
class SubBackboneSpec:
    """Shape contract for one D-stage feature extractor.

    ``stage_channels`` are the base (unscaled) per-stage output widths;
    the effective widths after ``width_scale`` are computed by
    ``backbones.scale_channels`` (floor to a multiple of
    ``channel_multiple``).
    """

    family: str
    stage_channels: tuple[int, ...]
    width_scale: float = 1.0
    channel_multiple: int = 4
    input_shape: tuple[int, int, int] = (3, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    @property
    def depth(self) -> int:
        return len(self.stage_channels)


@dataclass(frozen=True)
class ScheduleConfig:
    """SGD schedule: step budget, two-phase threshold and multi-step decay.

    The learning rate starts at ``base_lr`` and is multiplied by
    ``decay_factors[i]`` once the step counter reaches milestone
    ``floor(decay_milestones[i] * total_steps + 0.5)``.
    ``phase_threshold`` defaults to the midpoint ``ceil(total_steps / 2)``.
    """

    total_steps: int
    phase_threshold: int | None = None
    batch_size: int = 32
    base_lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_factors: tuple[float, ...] = (0.5, 0.2, 0.1)
    decay_milestones: tuple[float, ...] = (0.5, 0.7, 0.9)

    def __post_init__(self):
        object.__setattr__(self, "decay_factors", tuple(self.decay_factors))
        object.__setattr__(self, "decay_milestones", tuple(self.decay_milestones))
        if self.phase_threshold is None:
            object.__setattr__(self, "phase_threshold", math.ceil(self.total_steps / 2))

    def milestone_steps(self) -> tuple[int, ...]:
        """Absolute step at which each decay factor kicks in (half-up rounding)."""
        return tuple(int(math.floor(f * self.total_steps + 0.5)) for f in self.decay_milestones)


@dataclass(frozen=True)
class ProbeConfig:
    """Frozen-feature linear-probe protocol and held-out transfer suite."""

    lambda_grid: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    max_iterations: int = 1000
    feature_stage: int | None = None  # None = last stage
    transfer_datasets: tuple[SyntheticGeneratorSpec, ...] = ()
    probe_train_size: int = 320
    probe_test_size: int = 80
    seg_finetune: SyntheticGeneratorSpec | None = None
    seg_finetune_steps: int = 150

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        object.__setattr__(self, "transfer_datasets", tuple(self.transfer_datasets))


@dataclass(frozen=True)
class SqueezeOptions:
    """Knobs for the condensation stage that are not part of the schedule."""

    distill_stage: int | None = None  # None = last stage
    prune_target_sparsity: float | None = None  # None = 1 - 1/T
    student_init: str = "glorot"  # or "warm-start:<task_id>"
    hint_weight: float = 1.0
    pre_distill_steps: int | None = None  # None = expansion phase_threshold


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[TaskSpec, ...]
    sources: tuple[SourceSpec, ...]
    backbone: SubBackboneSpec
    expansion_schedule: ScheduleConfig
    squeeze_schedule: ScheduleConfig
    eval: ProbeConfig = field(default_factory=ProbeConfig)
    squeeze: SqueezeOptions = field(default_factory=SqueezeOptions)
    variant: str = "xlearner"
    recon_topology: str | None = None
    output_dir: str = "runs/experiment"
    global_seed: int = 0
    name: str = "experiment"
    version: int = CONFIG_VERSION

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.recon_topology is None:
            object.__setattr__(
                self, "recon_topology", DEFAULT_TOPOLOGY.get(self.variant, "shallow-to-deep")
            )

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def task_by_id(self, task_id: str) -> TaskSpec:
        for task in self.tasks:
            if task.task_id == task_id:
                return task
        raise KeyError(task_id)

    def source_by_id(self, source_id: str) -> SourceSpec:
        for source in self.sources:
            if source.source_id == source_id:
                return source
        raise KeyError(source_id)

    def sources_for(self, task_id: str) -> tuple[SourceSpec, ...]:
        task = self.task_by_id(task_id)
        by_id = {s.source_id: s for s in self.sources}
        return tuple(by_id[sid] for sid in task.source_ids if sid in by_id)

    def task_source_pairs(self) -> list[tuple[str, str]]:
        """The (task, source) index set the averaged objective runs over."""
        return [(t.task_id, sid) for t in self.tasks for sid in t.source_ids]


@dataclass(frozen=True)
class ValidationIssue:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass
class ValidationReport:
    """Outcome of registry validation; issues are data, not exceptions."""

    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, path: str, message: str) -> None:
        self.issues.append(ValidationIssue(path, message))

    def to_records(self) -> list[dict[str, str]]:
        return [{"path": i.path, "message": i.message} for i in self.issues]

    def __str__(self) -> str:
        if self.ok:
            return "configuration valid (0 issues)"
        lines = [f"configuration invalid ({len(self.issues)} issues):"]
        lines += [f"  - {issue}" for issue in self.issues]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_generator(d: dict, path: str) -> SyntheticGeneratorSpec:
    try:
        return SyntheticGeneratorSpec(
            kind=str(d["kind"]),
            num_classes=int(d["num_classes"]),
            image_size=tuple(d.get("image_size", (64, 64))),
            noise_level=float(d.get("noise_level", 0.1)),
            palette_seed=int(d.get("palette_seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed generator spec ({exc})") from exc


def _parse_schedule(d: dict, path: str) -> ScheduleConfig:
    try:
        return ScheduleConfig(
            total_steps=int(d["total_steps"]),
            phase_threshold=(
                int(d["phase_threshold"]) if d.get("phase_threshold") is not None else None
            ),
            batch_size=int(d.get("batch_size", 32)),
            base_lr=float(d.get("base_lr", 0.2)),
            momentum=float(d.get("momentum", 0.9)),
            weight_decay=float(d.get("weight_decay", 1e-4)),
            decay_factors=tuple(d.get("decay_factors", (0.5, 0.2, 0.1))),
            decay_milestones=tuple(d.get("decay_milestones", (0.5, 0.7, 0.9))),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed schedule ({exc})") from exc


_HEAD_KIND_FOR_LOSS = {"multiclass-ce": "classification", "per-pixel-ce": "segmentation"}


def experiment_config_from_dict(doc: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed YAML document (defaults filled)."""
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected a mapping")
    version = int(doc.get("version", CONFIG_VERSION))
    if version != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {version}")

    tasks: list[TaskSpec] = []
    for i, td in enumerate(doc.get("tasks", []) or []):
        path = f"tasks[{i}]"
        try:
            loss_kind = str(td["loss_kind"])
            head_d = td.get("head", {}) or {}
            head = HeadSpec(
                kind=str(head_d.get("kind", _HEAD_KIND_FOR_LOSS.get(loss_kind, "classification"))),
                num_classes=int(head_d["num_classes"]),
            )
            tasks.append(
                TaskSpec(
                    task_id=str(td["task_id"]),
                    loss_kind=loss_kind,
                    head=head,
                    source_ids=tuple(str(s) for s in _as_tuple(td.get("source_ids", ()))),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed task spec ({exc})") from exc

    sources: list[SourceSpec] = []
    for i, sd in enumerate(doc.get("sources", []) or []):
        path = f"sources[{i}]"
        try:
            sources.append(
                SourceSpec(
                    source_id=str(sd["source_id"]),
                    task_id=str(sd["task_id"]),
                    generator=_parse_generator(sd["generator"], f"{path}.generator"),
                    size=int(sd["size"]),
                    seed=int(sd["seed"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed source spec ({exc})") from exc

    bd = doc.get("backbone")
    if not isinstance(bd, dict):
        raise ConfigError("backbone: missing section")
    try:
        backbone = SubBackboneSpec(
            family=str(bd.get("family", "toy-conv")),
            stage_channels=tuple(bd["stage_channels"]),
            width_scale=float(bd.get("width_scale", 1.0)),
            channel_multiple=int(bd.get("channel_multiple", 4)),
            input_shape=tuple(bd.get("input_shape", (3, 64, 64))),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"backbone: malformed spec ({exc})") from exc

    if "expansion_schedule" not in doc:
        raise ConfigError("expansion_schedule: missing section")
    expansion = _parse_schedule(doc["expansion_schedule"], "expansion_schedule")
    squeeze_schedule = _parse_schedule(
        doc.get("squeeze_schedule", {"total_steps": 1000, "phase_threshold": 0}),
        "squeeze_schedule",
    )

    sq = doc.get("squeeze", {}) or {}
    squeeze = SqueezeOptions(
        distill_stage=(int(sq["distill_stage"]) if sq.get("distill_stage") is not None else None),
        prune_target_sparsity=(
            float(sq["prune_target_sparsity"])
            if sq.get("prune_target_sparsity") is not None
            else None
        ),
        student_init=str(sq.get("student_init", "glorot")),
        hint_weight=float(sq.get("hint_weight", 1.0)),
        pre_distill_steps=(
            int(sq["pre_distill_steps"]) if sq.get("pre_distill_steps") is not None else None
        ),
    )

    ed = doc.get("eval", {}) or {}
    eval_cfg = ProbeConfig(
        lambda_grid=tuple(ed.get("lambda_grid", (1e-1, 1e-2, 1e-3, 1e-4, 1e-5))),
        max_iterations=int(ed.get("max_iterations", 1000)),
        feature_stage=(int(ed["feature_stage"]) if ed.get("feature_stage") is not None else None),
        transfer_datasets=tuple(
            _parse_generator(g, f"eval.transfer_datasets[{i}]")
            for i, g in enumerate(ed.get("transfer_datasets", []) or [])
        ),
        probe_train_size=int(ed.get("probe_train_size", 320)),
        probe_test_size=int(ed.get("probe_test_size", 80)),
        seg_finetune=(
            _parse_generator(ed["seg_finetune"], "eval.seg_finetune")
            if ed.get("seg_finetune")
            else None
        ),
        seg_finetune_steps=int(ed.get("seg_finetune_steps", 150)),
    )

    return ExperimentConfig(
        tasks=tuple(tasks),
        sources=tuple(sources),
        backbone=backbone,
        expansion_schedule=expansion,
        squeeze_schedule=squeeze_schedule,
        eval=eval_cfg,
        squeeze=squeeze,
        variant=str(doc.get("variant", "xlearner")),
        recon_topology=(
            str(doc["recon_topology"]) if doc.get("recon_topology") is not None else None
        ),
        output_dir=str(doc.get("output_dir", "runs/experiment")),
        global_seed=int(doc.get("global_seed", 0)),
        name=str(doc.get("name", "experiment")),
        version=version,
    )


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Load, default-fill and validate a config file.

    Raises ConfigError (with the parse or validation issues attached) if the
    file is malformed or inconsistent. Deterministic given the file bytes.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from exc
    config = experiment_config_from_dict(doc)
    report = validate_registry(config)
    if not report.ok:
        raise ConfigError(str(report), issues=report.issues)
    return config


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _clean(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _clean(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    return obj


def experiment_config_to_dict(config: ExperimentConfig) -> dict:
    return _clean(config)


def serialize_experiment_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(experiment_config_to_dict(config), sort_keys=True)


def config_fingerprint(config: ExperimentConfig) -> str:
    """Stable hash of the experiment's scientific content.

    Guards checkpoint resume: the output directory and display name are
    excluded, so a run may be resumed into a fresh location, but any change
    to tasks, sources, models, schedules or seeds is refused.
    """
    doc = experiment_config_to_dict(config)
    doc.pop("output_dir", None)
    doc.pop("name", None)
    canonical = json.dumps(doc, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _validate_schedule(report: ValidationReport, sched: ScheduleConfig, path: str) -> None:
    if sched.total_steps < 1:
        report.add(f"{path}.total_steps", "must be >= 1")
    if sched.phase_threshold is not None and not (0 <= sched.phase_threshold <= sched.total_steps):
        report.add(
            f"{path}.phase_threshold",
            f"must lie in [0, total_steps]; got {sched.phase_threshold}",
        )
    if sched.batch_size < 1:
        report.add(f"{path}.batch_size", "must be >= 1")
    if sched.base_lr <= 0:
        report.add(f"{path}.base_lr", "must be > 0")
    if len(sched.decay_factors) != len(sched.decay_milestones):
        report.add(f"{path}.decay_factors", "must match decay_milestones in length")
    ms = sched.decay_milestones
    if any(not (0.0 < m < 1.0) for m in ms):
        report.add(f"{path}.decay_milestones", "milestones must lie strictly inside (0, 1)")
    if any(a >= b for a, b in zip(ms, ms[1:])):
        report.add(f"{path}.decay_milestones", "milestones must be strictly increasing")


_SEG_KINDS = {"shape-seg"}
_CLS_KINDS = {"shape-class", "texture-class"}


def validate_registry(config: ExperimentConfig) -> ValidationReport:
    """Check every registry invariant; returns issues without mutating config."""
    report = ValidationReport()

    if config.num_tasks < 1:
        report.add("tasks", "at least one task is required")

    seen_tasks: set[str] = set()
    for i, task in enumerate(config.tasks):
        path = f"tasks[{i}]"
        if task.task_id in seen_tasks:
            report.add(f"{path}.task_id", f"duplicate task_id '{task.task_id}'")
        seen_tasks.add(task.task_id)
        if task.loss_kind not in LOSS_KINDS:
            report.add(f"{path}.loss_kind", f"unknown loss kind '{task.loss_kind}'")
        if task.num_sources < 1:
            report.add(f"{path}.source_ids", "every task needs at least one source")
        if task.head.num_classes < 2:
            report.add(f"{path}.head.num_classes", "must be >= 2")
        expected_head = _HEAD_KIND_FOR_LOSS.get(task.loss_kind)
        if expected_head and task.head.kind != expected_head:
            report.add(
                f"{path}.head.kind",
                f"head kind '{task.head.kind}' does not match loss '{task.loss_kind}'",
            )

    source_index: dict[str, SourceSpec] = {}
    referenced: set[str] = set()
    for i, src in enumerate(config.sources):
        path = f"sources[{i}]"
        if src.source_id in source_index:
            report.add(f"{path}.source_id", f"duplicate source_id '{src.source_id}'")
        source_index[src.source_id] = src
        if src.task_id not in seen_tasks:
            report.add(f"{path}.task_id", f"unknown task '{src.task_id}'")
        if src.size < 2 * config.expansion_schedule.batch_size:
            report.add(
                f"{path}.size",
                f"source too small: size {src.size} < 2 x batch size "
                f"{config.expansion_schedule.batch_size}",
            )
        gen = src.generator
        gpath = f"{path}.generator"
        if gen.kind not in GENERATOR_KINDS:
            report.add(f"{gpath}.kind", f"unknown generator kind '{gen.kind}'")
        if gen.num_classes < 2:
            report.add(f"{gpath}.num_classes", "must be >= 2")
        if tuple(gen.image_size) != tuple(config.backbone.input_shape[1:]):
            report.add(
                f"{gpath}.image_size",
                f"image size {gen.image_size} does not match backbone input "
                f"{config.backbone.input_shape[1:]}",
            )

    for i, task in enumerate(config.tasks):
        for sid in task.source_ids:
            referenced.add(sid)
            src = source_index.get(sid)
            if src is None:
                report.add(f"tasks[{i}].source_ids", f"unknown source '{sid}'")
                continue
            if src.task_id != task.task_id:
                report.add(
                    f"tasks[{i}].source_ids",
                    f"source '{sid}' belongs to task '{src.task_id}', not '{task.task_id}'",
                )
            wants_seg = task.loss_kind == "per-pixel-ce"
            is_seg = src.generator.kind in _SEG_KINDS
            if wants_seg != is_seg:
                report.add(
                    f"tasks[{i}].source_ids",
                    f"source '{sid}' generator kind '{src.generator.kind}' "
                    f"does not produce labels for loss '{task.loss_kind}'",
                )
            if src.generator.num_classes != task.head.num_classes:
                report.add(
                    f"tasks[{i}].source_ids",
                    f"source '{sid}' has {src.generator.num_classes} classes but the "
                    f"task head expects {task.head.num_classes}",
                )
    for sid in source_index:
        if sid not in referenced:
            report.add("sources", f"source '{sid}' is not referenced by any task")

    if config.variant not in VARIANTS:
        report.add("variant", f"unknown variant '{config.variant}'")
    topo = config.recon_topology
    if topo not in TOPOLOGIES:
        report.add("recon_topology", f"unknown topology '{topo}'")
    else:
        expected = DEFAULT_TOPOLOGY.get(config.variant)
        if expected is not None and topo != expected:
            report.add(
                "recon_topology",
                f"variant '{config.variant}' requires topology '{expected}', got '{topo}'",
            )

    bb = config.backbone
    if bb.family not in BACKBONE_FAMILIES:
        report.add("backbone.family", f"unknown family '{bb.family}'")
    if bb.depth < 2:
        report.add("backbone.stage_channels", "at least two stages are required")
    if any(a >= b for a, b in zip(bb.stage_channels, bb.stage_channels[1:])):
        report.add("backbone.stage_channels", "stage widths must be strictly increasing")
    if bb.family == "resnet50" and bb.depth != 4:
        report.add("backbone.stage_channels", "resnet50 family has exactly 4 stages")
    if bb.width_scale <= 0:
        report.add("backbone.width_scale", "must be > 0")
    if bb.channel_multiple < 1:
        report.add("backbone.channel_multiple", "must be >= 1")
    if len(bb.input_shape) != 3 or bb.input_shape[0] != 3:
        report.add("backbone.input_shape", "expected (3, height, width)")
    else:
        min_side = min(bb.input_shape[1], bb.input_shape[2])
        needed = 4 * 2 ** (bb.depth - 1)
        if min_side < needed:
            report.add(
                "backbone.input_shape",
                f"input {bb.input_shape[1]}x{bb.input_shape[2]} too small for "
                f"{bb.depth} stages (needs >= {needed} pixels per side)",
            )
    if bb.width_scale > 0 and bb.channel_multiple >= 1 and bb.width_scale != 1.0:
        floored = [
            int(math.floor(c * bb.width_scale / bb.channel_multiple)) * bb.channel_multiple
            for c in bb.stage_channels
        ]
        if any(w < bb.channel_multiple for w in floored):
            report.add(
                "backbone.width_scale",
                f"scaled widths {floored} fall below channel multiple {bb.channel_multiple}",
            )

    _validate_schedule(report, config.expansion_schedule, "expansion_schedule")
    _validate_schedule(report, config.squeeze_schedule, "squeeze_schedule")

    sq = config.squeeze
    if sq.prune_target_sparsity is not None and not (0.0 < sq.prune_target_sparsity < 1.0):
        report.add("squeeze.prune_target_sparsity", "must lie strictly inside (0, 1)")
    if sq.distill_stage is not None and not (1 <= sq.distill_stage <= bb.depth):
        report.add("squeeze.distill_stage", f"must lie in [1, {bb.depth}]")
    if sq.hint_weight < 0:
        report.add("squeeze.hint_weight", "must be >= 0")
    if not (
        sq.student_init == "glorot"
        or (sq.student_init.startswith("warm-start:") and len(sq.student_init) > 11)
    ):
        report.add("squeeze.student_init", f"unknown init '{sq.student_init}'")

    ev = config.eval
    if not ev.lambda_grid:
        report.add("eval.lambda_grid", "grid must be nonempty")
    if any(lam <= 0 for lam in ev.lambda_grid):
        report.add("eval.lambda_grid", "regularization strengths must be > 0")
    if ev.max_iterations < 1:
        report.add("eval.max_iterations", "must be >= 1")
    if ev.feature_stage is not None and not (1 <= ev.feature_stage <= bb.depth):
        report.add("eval.feature_stage", f"must lie in [1, {bb.depth}]")
    for i, gen in enumerate(ev.transfer_datasets):
        if gen.kind not in GENERATOR_KINDS:
            report.add(f"eval.transfer_datasets[{i}].kind", f"unknown kind '{gen.kind}'")
        if tuple(gen.image_size) != tuple(bb.input_shape[1:]):
            report.add(
                f"eval.transfer_datasets[{i}].image_size",
                f"image size {gen.image_size} does not match backbone input",
            )
    if ev.seg_finetune is not None and ev.seg_finetune.kind not in _SEG_KINDS:
        report.add("eval.seg_finetune.kind", "dense fine-tune needs a segmentation generator")

    return report
