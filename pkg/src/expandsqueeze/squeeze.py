"""Condensation of an expanded backbone into a single sub-backbone.

Two routes:

* multi-teacher hint distillation — a fresh student matches every task's
  fused final-stage feature through per-task guidance layers (1x1 conv +
  batch norm), minimizing the sum of squared L2 feature errors; labels are
  never used.
* global unstructured magnitude pruning — the smallest-magnitude fraction
  of conv/linear weights across the whole expanded backbone is zeroed,
  masks are frozen, and the remaining weights are fine-tuned on the
  averaged multi-source objective.

Also hosts the reversed composition: per-task teachers are distilled into
width-scaled (1/sqrt(T)) sub-backbones first, which are then joined by
reconciliation links and trained jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn

from .backbones import SubBackbone, build_sub_backbone, glorot_init_
from .config import ExperimentConfig, ScheduleConfig, SubBackboneSpec
from .expansion import (
    ExpansionTrainer,
    _check_finite,
    _make_optimizer,
    _set_lr,
    average_multi_source_loss,
    lr_at,
    train_single_task,
)
from .metrics import MetricsLogger
from .reconciliation import ExpandedBackbone, build_reconciliation_graph
from .seeding import derive_rng, derive_seed
from .tasks import SyntheticSource, build_head, task_loss


class GuidanceLayer(nn.Module):
    """1x1 conv + batch norm projecting the student feature into one
    teacher's feature space."""

    def __init__(self, student_channels: int, teacher_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(student_channels, teacher_channels, 1, bias=False)
        self.norm = nn.BatchNorm2d(teacher_channels)

    def forward(self, student_feat: torch.Tensor) -> torch.Tensor:
        return self.norm(self.conv(student_feat))


def guidance_forward(guidance: nn.Module, student_feat: torch.Tensor) -> torch.Tensor:
    conv = getattr(guidance, "conv", None)
    if conv is not None and student_feat.dim() >= 2 and student_feat.shape[1] != conv.in_channels:
        raise ValueError(
            f"guidance expects {conv.in_channels} channels, got {student_feat.shape[1]}"
        )
    return guidance(student_feat)


def squeeze_loss(
    teacher_feats: Mapping[str, torch.Tensor],
    student_feat: torch.Tensor,
    guidance: Mapping[str, GuidanceLayer],
) -> torch.Tensor:
    """Sum over tasks of the squared L2 error between the teacher feature
    and the guided student feature (summed over all elements)."""
    missing = [t for t in guidance if t not in teacher_feats]
    if missing:
        raise ValueError(f"missing teacher features for tasks {missing}")
    total = None
    for task, g in guidance.items():
        diff = teacher_feats[task] - guidance_forward(g, student_feat)
        term = (diff**2).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no guidance layers supplied")
    return total


@dataclass
class SqueezePlan:
    """How to condense: distill into ``student_spec`` or prune to sparsity."""

    mode: str  # "distill" | "prune"
    student_spec: SubBackboneSpec
    schedule: ScheduleConfig
    distill_stage: int | None = None  # None = last stage
    prune_target_sparsity: float | None = None
    student_init: str = "glorot"


class MixtureSampler:
    """Unlabeled image batches drawn from all sources, proportional to size."""

    def __init__(self, sources: Mapping[str, SyntheticSource], batch_size: int, seed: int,
                 label: str = "squeeze-sampler"):
        self.sources = list(sources.values())
        if not self.sources:
            raise ValueError("no sources to sample from")
        self.batch_size = batch_size
        sizes = np.array([len(s) for s in self.sources], dtype=np.float64)
        self._probs = sizes / sizes.sum()
        self.rng = derive_rng(seed, label)

    def sample(self) -> torch.Tensor:
        pick = int(self.rng.choice(len(self.sources), p=self._probs))
        source = self.sources[pick]
        indices = self.rng.integers(0, len(source), size=self.batch_size)
        images = torch.from_numpy(
            np.stack([source[int(i)][0] for i in indices])
        )
        return images

    def state_dict(self) -> dict:
        return {"bit_generator": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["bit_generator"]


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _init_student(plan: SqueezePlan, teachers: Mapping[str, SubBackbone], seed: int) -> SubBackbone:
    student = build_sub_backbone(plan.student_spec, derive_seed(seed, "squeeze-student"))
    if plan.student_init == "glorot":
        glorot_init_(student, derive_seed(seed, "squeeze-student-glorot"))
    elif plan.student_init.startswith("warm-start:"):
        tid = plan.student_init.split(":", 1)[1]
        if tid not in teachers:
            raise ValueError(f"warm-start teacher '{tid}' not found")
        student.load_state_dict(teachers[tid].state_dict())
    else:
        raise ValueError(f"unknown student init '{plan.student_init}'")
    return student


def _distill_loop(
    teacher_feats_fn: Callable[[torch.Tensor], dict[str, torch.Tensor]],
    student: SubBackbone,
    guidance: dict[str, GuidanceLayer],
    sampler: MixtureSampler,
    schedule: ScheduleConfig,
    stage_index: int,
    metrics: MetricsLogger | None,
    stage_label: str,
) -> None:
    params = list(student.parameters())
    for g in guidance.values():
        params += list(g.parameters())
    optimizer = _make_optimizer(params, schedule)
    for step in range(schedule.total_steps):
        images = sampler.sample()
        with torch.no_grad():
            teacher_feats = teacher_feats_fn(images)
        student_feat = student(images)[stage_index - 1]
        loss = squeeze_loss(teacher_feats, student_feat, guidance)
        _check_finite(loss, step + 1, "student", "mixture")
        # the summed loss grows with feature size; scale the step objective
        # by the element count so SGD step sizes stay geometry-independent
        # (same minimizer, positive constant factor)
        n_elements = sum(f.numel() for f in teacher_feats.values())
        objective = loss / n_elements
        _set_lr(optimizer, lr_at(step, schedule))
        optimizer.zero_grad()
        objective.backward()
        optimizer.step()
        if metrics is not None:
            metrics.emit(
                {
                    "stage": stage_label,
                    "step": step + 1,
                    "loss_avg": float(loss.detach()),
                    "lr": lr_at(step, schedule),
                }
            )


def distill_squeeze(
    expanded: ExpandedBackbone,
    plan: SqueezePlan,
    sources: Mapping[str, SyntheticSource],
    seed: int,
    metrics: MetricsLogger | None = None,
    stage_label: str = "squeeze",
) -> SubBackbone:
    """Distill the expanded teacher into one sub-backbone-sized student.

    Teachers are frozen (inference-mode normalization, no gradients); every
    task contributes a hint through its own guidance layer; guidance layers
    are discarded afterwards.
    """
    if plan.mode != "distill":
        raise ValueError(f"plan mode '{plan.mode}' is not 'distill'")
    freeze(expanded)
    stage_index = plan.distill_stage or expanded.depth
    teachers = dict(expanded.sub_backbones)
    student = _init_student(plan, teachers, seed)

    torch.manual_seed(derive_seed(seed, "squeeze-guidance"))
    guidance = {
        tid: GuidanceLayer(
            student.stage_channels[stage_index - 1],
            teachers[tid].stage_channels[stage_index - 1],
        )
        for tid in expanded.task_ids
    }

    def teacher_feats_fn(images: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = expanded({tid: images for tid in expanded.task_ids})
        return {tid: feats.fused[(tid, stage_index)] for tid in expanded.task_ids}

    sampler = MixtureSampler(sources, plan.schedule.batch_size, seed)
    _distill_loop(
        teacher_feats_fn, student, guidance, sampler, plan.schedule, stage_index,
        metrics, stage_label,
    )
    return student


def distill_single_teacher(
    teacher: SubBackbone,
    plan: SqueezePlan,
    sources: Mapping[str, SyntheticSource],
    seed: int,
    metrics: MetricsLogger | None = None,
    stage_label: str = "squeeze-single",
) -> SubBackbone:
    """FitNets-style hint distillation from one frozen teacher backbone."""
    freeze(teacher)
    stage_index = plan.distill_stage or teacher.depth
    student = _init_student(plan, {"teacher": teacher}, seed)
    torch.manual_seed(derive_seed(seed, "squeeze-guidance"))
    guidance = {
        "teacher": GuidanceLayer(
            student.stage_channels[stage_index - 1],
            teacher.stage_channels[stage_index - 1],
        )
    }

    def teacher_feats_fn(images: torch.Tensor) -> dict[str, torch.Tensor]:
        return {"teacher": teacher(images)[stage_index - 1]}

    sampler = MixtureSampler(sources, plan.schedule.batch_size, seed, label=stage_label)
    _distill_loop(
        teacher_feats_fn, student, guidance, sampler, plan.schedule, stage_index,
        metrics, stage_label,
    )
    return student


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------


def prunable_weights(module: nn.Module) -> dict[str, torch.Tensor]:
    """Conv/linear weight tensors, by qualified name. Biases and
    normalization parameters are exempt."""
    out = {}
    for name, m in module.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            out[f"{name}.weight" if name else "weight"] = m.weight
    return out


def compute_magnitude_masks(
    weights: Mapping[str, torch.Tensor], target_sparsity: float
) -> dict[str, torch.Tensor]:
    """Global magnitude criterion: keep-masks zeroing exactly
    ceil(sparsity * n) of the smallest-|w| entries across all tensors."""
    if not (0.0 < target_sparsity < 1.0):
        raise ValueError(f"sparsity must lie strictly inside (0, 1), got {target_sparsity}")
    names = list(weights)
    flat = torch.cat([weights[n].detach().abs().flatten() for n in names])
    n_total = flat.numel()
    n_prune = math.ceil(target_sparsity * n_total)
    order = torch.argsort(flat, stable=True)
    pruned_idx = order[:n_prune]
    keep_flat = torch.ones(n_total, dtype=torch.bool)
    keep_flat[pruned_idx] = False
    masks = {}
    offset = 0
    for n in names:
        count = weights[n].numel()
        masks[n] = keep_flat[offset : offset + count].reshape(weights[n].shape).clone()
        offset += count
    return masks


class PrunedModel(nn.Module):
    """An expanded backbone with frozen keep-masks over its prunable weights."""

    def __init__(self, expanded: ExpandedBackbone, masks: dict[str, torch.Tensor]):
        super().__init__()
        self.expanded = expanded
        self._mask_names = list(masks)
        for i, name in enumerate(self._mask_names):
            self.register_buffer(f"mask_{i}", masks[name])

    @property
    def masks(self) -> dict[str, torch.Tensor]:
        return {
            name: getattr(self, f"mask_{i}") for i, name in enumerate(self._mask_names)
        }

    def apply_masks(self) -> None:
        weights = prunable_weights(self.expanded)
        with torch.no_grad():
            for name, mask in self.masks.items():
                weights[name].mul_(mask)

    def nonzero_prunable(self) -> int:
        return int(
            sum(int((w != 0).sum()) for w in prunable_weights(self.expanded).values())
        )

    def total_prunable(self) -> int:
        return int(sum(w.numel() for w in prunable_weights(self.expanded).values()))

    def forward(self, per_task_inputs):
        return self.expanded(per_task_inputs)


def magnitude_prune(
    expanded: ExpandedBackbone,
    heads: Mapping[str, nn.Module],
    config: ExperimentConfig,
    sources: Mapping[str, SyntheticSource],
    target_sparsity: float,
    finetune_schedule: ScheduleConfig,
    metrics: MetricsLogger | None = None,
    stage_label: str = "prune-finetune",
) -> PrunedModel:
    """Zero the globally smallest weights, then fine-tune on the averaged
    multi-source objective with the masks pinned after every step."""
    masks = compute_magnitude_masks(prunable_weights(expanded), target_sparsity)
    pruned = PrunedModel(expanded, masks)
    pruned.apply_masks()

    from .expansion import TaskSampler  # late import keeps module load acyclic

    heads = nn.ModuleDict(dict(heads))
    samplers = {
        task.task_id: TaskSampler(
            task, sources, finetune_schedule.batch_size, config.global_seed,
            label="prune-sampler",
        )
        for task in config.tasks
    }
    optimizer = _make_optimizer(
        list(expanded.parameters()) + list(heads.parameters()), finetune_schedule
    )
    for step in range(finetune_schedule.total_steps):
        batches = {tid: s.sample() for tid, s in samplers.items()}
        feats = expanded({tid: b.images for tid, b in batches.items()})
        entries = []
        for task in config.tasks:
            tid = task.task_id
            pred = heads[tid](feats.fused[(tid, expanded.depth)])
            loss = task_loss(task, pred, batches[tid].labels)
            _check_finite(loss, step + 1, tid, batches[tid].source_id)
            entries.append((tid, batches[tid].source_id, loss))
        total = average_multi_source_loss(entries)
        _set_lr(optimizer, lr_at(step, finetune_schedule))
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        pruned.apply_masks()
        if metrics is not None:
            metrics.emit(
                {
                    "stage": stage_label,
                    "step": step + 1,
                    "loss_avg": float(total.detach()),
                    "lr": lr_at(step, finetune_schedule),
                    "nonzero_prunable": pruned.nonzero_prunable(),
                }
            )
    return pruned


# ---------------------------------------------------------------------------
# Reversed composition: condense per-task teachers first, then expand
# ---------------------------------------------------------------------------


@dataclass
class ReversedResult:
    teachers: dict[str, SubBackbone]
    students: dict[str, SubBackbone]
    expanded: ExpandedBackbone
    heads: dict[str, nn.Module]
    trainer: object = field(default=None, repr=False)


def run_reversed_pipeline(
    config: ExperimentConfig,
    sources: Mapping[str, SyntheticSource],
    metrics: MetricsLogger | None = None,
) -> ReversedResult:
    """Squeeze-then-expand composition.

    1. Train a full-width single-task teacher per task (multi-source).
    2. Distill each teacher into a 1/sqrt(T)-width student of the same
       family, so the joined students cost about one full backbone.
    3. Join the students with reconciliation links and train jointly on the
       averaged objective for the remaining step budget.
    """
    schedule = config.expansion_schedule
    tau = schedule.phase_threshold or 0
    seed = config.global_seed
    image_size = tuple(config.backbone.input_shape[1:])

    teachers: dict[str, SubBackbone] = {}
    for task in config.tasks:
        backbone = build_sub_backbone(
            config.backbone, derive_seed(seed, "rev-teacher", task.task_id)
        )
        torch.manual_seed(derive_seed(seed, "rev-teacher-head", task.task_id))
        head = build_head(task, backbone.stage_channels[-1], image_size)
        train_single_task(
            backbone, head, task, sources, schedule, tau,
            seed, sampler_label="rev-teacher-sampler",
            metrics=metrics, stage_label=f"reversed-teacher/{task.task_id}",
        )
        teachers[task.task_id] = backbone

    factor = 1.0 / math.sqrt(config.num_tasks)
    student_spec = SubBackboneSpec(
        family=config.backbone.family,
        stage_channels=config.backbone.stage_channels,
        width_scale=config.backbone.width_scale * factor,
        channel_multiple=config.backbone.channel_multiple,
        input_shape=config.backbone.input_shape,
    )
    students: dict[str, SubBackbone] = {}
    for task in config.tasks:
        task_sources = {sid: sources[sid] for sid in task.source_ids}
        plan = SqueezePlan(
            mode="distill", student_spec=student_spec, schedule=config.squeeze_schedule
        )
        students[task.task_id] = distill_single_teacher(
            teachers[task.task_id],
            plan,
            task_sources,
            derive_seed(seed, "rev-distill", task.task_id),
            metrics=metrics,
            stage_label=f"reversed-squeeze/{task.task_id}",
        )

    for student in students.values():
        student.train()
        for p in student.parameters():
            p.requires_grad_(True)
    expanded = build_reconciliation_graph(
        students, config.recon_topology, seed=derive_seed(seed, "rev-links")
    )
    heads = {}
    torch.manual_seed(derive_seed(seed, "rev-heads"))
    for task in config.tasks:
        heads[task.task_id] = build_head(
            task, students[task.task_id].stage_channels[-1], image_size
        )

    joint_steps = max(schedule.total_steps - tau, 0)
    joint_config = ExperimentConfig(
        tasks=config.tasks,
        sources=config.sources,
        backbone=student_spec,
        expansion_schedule=ScheduleConfig(
            total_steps=max(joint_steps, 1),
            phase_threshold=0,
            batch_size=schedule.batch_size,
            base_lr=schedule.base_lr,
            momentum=schedule.momentum,
            weight_decay=schedule.weight_decay,
            decay_factors=schedule.decay_factors,
            decay_milestones=schedule.decay_milestones,
        ),
        squeeze_schedule=config.squeeze_schedule,
        eval=config.eval,
        squeeze=config.squeeze,
        variant=config.variant,
        recon_topology=config.recon_topology,
        output_dir=config.output_dir,
        global_seed=config.global_seed,
        name=config.name,
    )
    trainer = ExpansionTrainer(
        joint_config, sources, expanded, heads, metrics=metrics,
        stage_label="reversed-expansion",
    )
    if joint_steps > 0:
        trainer.run()
    return ReversedResult(teachers, students, expanded, heads, trainer)
