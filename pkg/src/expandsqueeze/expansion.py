"""Two-phase pre-training of the expanded backbone.

Steps 1..phase_threshold train each sub-backbone independently on its own
task loss (reconciliation links untouched); the remaining steps forward
the whole expanded backbone and jointly update sub-backbones, links and
heads under the unweighted average of the per-source task losses.

Every task owns its own SGD optimizer (sub-backbone + head) so a phase-1
update of one task can never touch another task's parameters, not even
through weight decay; links have a separate optimizer that only steps in
phase 2. With serial execution this makes a task's phase-1 trajectory
bit-identical to training that task alone with the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig, ScheduleConfig, TaskSpec
from .metrics import MetricsLogger
from .reconciliation import ExpandedBackbone
from .seeding import derive_rng, derive_seed
from .tasks import SyntheticSource, task_loss


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, step: int | None = None, task: str | None = None,
                 source: str | None = None):
        super().__init__(message)
        self.step, self.task, self.source = step, task, source


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Learning rate at a 0-based step: base_lr times the factor of the last
    milestone reached. Decimal-exact (0.2 x 0.2 yields exactly 0.04)."""
    if not (0 <= step < schedule.total_steps):
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    factor = Fraction(1)
    for milestone, f in zip(schedule.milestone_steps(), schedule.decay_factors):
        if step >= milestone:
            factor = Fraction(str(f))
    return float(Fraction(str(schedule.base_lr)) * factor)


def average_multi_source_loss(per_source_losses: Sequence[tuple[str, str, object]]):
    """Plain unweighted mean over (task, source, loss) entries.

    Accepts tensors (keeps the autograd graph) or plain floats.
    """
    if not per_source_losses:
        raise ValueError("cannot average an empty loss list")
    values = [entry[2] for entry in per_source_losses]
    if any(isinstance(v, torch.Tensor) for v in values):
        return torch.stack([torch.as_tensor(v) for v in values]).mean()
    return sum(float(v) for v in values) / len(values)


def pre_distill_hint_loss(
    student_feats: torch.Tensor,
    teacher_feats: torch.Tensor,
    guidance: nn.Module | None = None,
) -> torch.Tensor:
    """Squared-error hint against a frozen single-task teacher feature.

    The student feature is passed through ``guidance`` (identity when None)
    and the element-wise squared difference is summed.
    """
    projected = guidance(student_feats) if guidance is not None else student_feats
    if projected.shape != teacher_feats.shape:
        raise ValueError(
            f"hint shape mismatch: student {tuple(projected.shape)} vs "
            f"teacher {tuple(teacher_feats.shape)}"
        )
    return ((teacher_feats - projected) ** 2).sum()


@dataclass
class Batch:
    task_id: str
    source_id: str
    indices: np.ndarray
    images: torch.Tensor
    labels: torch.Tensor


class TaskSampler:
    """Deterministic per-task batch stream.

    Each batch comes from a single source of the task, picked with
    probability proportional to source size; sample indices are then drawn
    uniformly with replacement. The generator state round-trips through
    ``state_dict`` for exact resume.
    """

    def __init__(
        self,
        task: TaskSpec,
        sources: Mapping[str, SyntheticSource],
        batch_size: int,
        seed: int,
        label: str = "sampler",
    ):
        self.task = task
        self.sources = [sources[sid] for sid in task.source_ids]
        for src, sid in zip(self.sources, task.source_ids):
            if len(src) == 0:
                raise ValueError(f"source '{sid}' is empty")
        self.batch_size = batch_size
        sizes = np.array([len(s) for s in self.sources], dtype=np.float64)
        self._probs = sizes / sizes.sum()
        self.rng = derive_rng(seed, label, task.task_id)

    def sample(self) -> Batch:
        pick = int(self.rng.choice(len(self.sources), p=self._probs))
        source = self.sources[pick]
        indices = self.rng.integers(0, len(source), size=self.batch_size)
        images, labels = source.batch(indices)
        return Batch(self.task.task_id, source.source_id, indices, images, labels)

    def state_dict(self) -> dict:
        return {"bit_generator": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["bit_generator"]


def sample_task_batch(
    task: TaskSpec,
    sources: Mapping[str, SyntheticSource],
    rng: np.random.Generator,
    batch_size: int,
) -> Batch:
    """One-shot batch draw with an externally owned generator."""
    ids = list(task.source_ids)
    sizes = np.array([len(sources[sid]) for sid in ids], dtype=np.float64)
    if any(s == 0 for s in sizes):
        raise ValueError("cannot sample from an empty source")
    pick = int(rng.choice(len(ids), p=sizes / sizes.sum()))
    source = sources[ids[pick]]
    indices = rng.integers(0, len(source), size=batch_size)
    images, labels = source.batch(indices)
    return Batch(task.task_id, source.source_id, indices, images, labels)


def _make_optimizer(params: Iterable[torch.Tensor], schedule: ScheduleConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        list(params),
        lr=schedule.base_lr,
        momentum=schedule.momentum,
        weight_decay=schedule.weight_decay,
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(loss: torch.Tensor, step: int, task: str, source: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {float(loss.detach())} at step {step} "
            f"(task '{task}', source '{source}')",
            step=step,
            task=task,
            source=source,
        )


class ExpansionTrainer:
    """Drives the two-phase schedule over an expanded backbone.

    ``hint_teachers`` (task -> frozen backbone) enables the pre-distillation
    variant: phase-1 losses gain ``hint_weight`` times a squared-error hint
    against the teacher's final-stage feature, projected by a trainable
    per-task guidance layer.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        sources: Mapping[str, SyntheticSource],
        expanded: ExpandedBackbone,
        heads: Mapping[str, nn.Module],
        metrics: MetricsLogger | None = None,
        hint_teachers: Mapping[str, nn.Module] | None = None,
        stage_label: str = "expansion",
    ):
        self.config = config
        self.schedule = config.expansion_schedule
        self.expanded = expanded
        self.heads = nn.ModuleDict(dict(heads))
        self.metrics = metrics
        self.stage_label = stage_label
        self.step = 0

        self.samplers = {
            task.task_id: TaskSampler(
                task, sources, self.schedule.batch_size, config.global_seed
            )
            for task in config.tasks
        }
        self.task_optimizers = {
            task.task_id: _make_optimizer(
                list(expanded.sub_backbones[task.task_id].parameters())
                + list(self.heads[task.task_id].parameters()),
                self.schedule,
            )
            for task in config.tasks
        }
        self.link_optimizer = (
            _make_optimizer(expanded.links.parameters(), self.schedule)
            if len(expanded.links) > 0 and any(True for _ in expanded.links.parameters())
            else None
        )

        self.hint_teachers = dict(hint_teachers or {})
        self.hint_guidance: dict[str, nn.Module] = {}
        if self.hint_teachers:
            from .squeeze import GuidanceLayer  # local import to avoid a cycle

            torch.manual_seed(derive_seed(config.global_seed, "hint-guidance"))
            for task in config.tasks:
                tid = task.task_id
                if tid not in self.hint_teachers:
                    continue
                teacher = self.hint_teachers[tid]
                teacher.eval()
                for p in teacher.parameters():
                    p.requires_grad_(False)
                width = expanded.sub_backbones[tid].stage_channels[-1]
                t_width = teacher.stage_channels[-1]
                guidance = GuidanceLayer(width, t_width)
                self.hint_guidance[tid] = guidance
                self.task_optimizers[tid].add_param_group(
                    {"params": list(guidance.parameters())}
                )

    @property
    def phase(self) -> int:
        """Phase of the *next* step (1-based step counter vs threshold)."""
        return 1 if self.step + 1 <= self.schedule.phase_threshold else 2

    def _emit(self, record: dict) -> None:
        if self.metrics is not None:
            self.metrics.emit({"stage": self.stage_label, **record})

    def _phase1_step(self, k: int, lr: float) -> dict:
        per_source = []
        for task in self.config.tasks:
            tid = task.task_id
            batch = self.samplers[tid].sample()
            sub = self.expanded.sub_backbones[tid]
            feats = sub(batch.images)
            loss = task_loss(task, self.heads[tid](feats[-1]), batch.labels)
            if tid in self.hint_guidance:
                with torch.no_grad():
                    teacher_feat = self.hint_teachers[tid](batch.images)[-1]
                hint = pre_distill_hint_loss(
                    feats[-1], teacher_feat, self.hint_guidance[tid]
                )
                # per-element scaling keeps the hint commensurate with the
                # cross-entropy term regardless of feature geometry
                loss = loss + self.config.squeeze.hint_weight * hint / teacher_feat.numel()
            _check_finite(loss, k, tid, batch.source_id)
            opt = self.task_optimizers[tid]
            _set_lr(opt, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            per_source.append((tid, batch.source_id, float(loss.detach())))
        return {
            "phase": 1,
            "per_source_loss": {f"{t}/{s}": v for t, s, v in per_source},
            "loss_avg": sum(v for _, _, v in per_source) / len(per_source),
        }

    def _phase2_step(self, k: int, lr: float) -> dict:
        batches = {task.task_id: self.samplers[task.task_id].sample() for task in self.config.tasks}
        feats = self.expanded({tid: b.images for tid, b in batches.items()})
        entries = []
        for task in self.config.tasks:
            tid = task.task_id
            pred = self.heads[tid](feats.fused[(tid, self.expanded.depth)])
            loss = task_loss(task, pred, batches[tid].labels)
            _check_finite(loss, k, tid, batches[tid].source_id)
            entries.append((tid, batches[tid].source_id, loss))
        total = average_multi_source_loss(entries)
        _check_finite(total, k, "all", "all")

        optimizers = list(self.task_optimizers.values())
        if self.link_optimizer is not None:
            optimizers.append(self.link_optimizer)
        for opt in optimizers:
            _set_lr(opt, lr)
            opt.zero_grad()
        total.backward()
        for opt in optimizers:
            opt.step()
        return {
            "phase": 2,
            "per_source_loss": {f"{t}/{s}": float(v.detach()) for t, s, v in entries},
            "loss_avg": float(total.detach()),
        }

    def step_once(self) -> dict:
        if self.step >= self.schedule.total_steps:
            raise TrainingError(f"schedule exhausted at step {self.step}", step=self.step)
        lr = lr_at(self.step, self.schedule)
        k = self.step + 1
        record = (
            self._phase1_step(k, lr)
            if k <= self.schedule.phase_threshold
            else self._phase2_step(k, lr)
        )
        self.step = k
        record.update({"step": k, "lr": lr})
        self._emit(record)
        return record

    def run(self, until_step: int | None = None) -> None:
        target = self.schedule.total_steps if until_step is None else until_step
        while self.step < target:
            self.step_once()

    # -- exact state round-trip --------------------------------------------

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "expanded": self.expanded.state_dict(),
            "heads": self.heads.state_dict(),
            "task_optimizers": {
                tid: opt.state_dict() for tid, opt in self.task_optimizers.items()
            },
            "link_optimizer": (
                self.link_optimizer.state_dict() if self.link_optimizer is not None else None
            ),
            "samplers": {tid: s.state_dict() for tid, s in self.samplers.items()},
            "hint_guidance": {
                tid: g.state_dict() for tid, g in self.hint_guidance.items()
            },
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])
        self.expanded.load_state_dict(state["expanded"])
        self.heads.load_state_dict(state["heads"])
        for tid, opt_state in state["task_optimizers"].items():
            self.task_optimizers[tid].load_state_dict(opt_state)
        if self.link_optimizer is not None and state.get("link_optimizer") is not None:
            self.link_optimizer.load_state_dict(state["link_optimizer"])
        for tid, s_state in state["samplers"].items():
            self.samplers[tid].load_state_dict(s_state)
        for tid, g_state in state.get("hint_guidance", {}).items():
            self.hint_guidance[tid].load_state_dict(g_state)
        torch.set_rng_state(state["torch_rng"])


def train_single_task(
    backbone: nn.Module,
    head: nn.Module,
    task: TaskSpec,
    sources: Mapping[str, SyntheticSource],
    schedule: ScheduleConfig,
    steps: int,
    seed: int,
    sampler_label: str = "sampler",
    metrics: MetricsLogger | None = None,
    stage_label: str = "single-task",
) -> None:
    """Train one sub-backbone + head alone on its task.

    With ``sampler_label="sampler"`` and the experiment's global seed this
    reproduces, bit for bit, the phase-1 trajectory of the same task inside
    an ExpansionTrainer.
    """
    sampler = TaskSampler(task, sources, schedule.batch_size, seed, label=sampler_label)
    optimizer = _make_optimizer(
        list(backbone.parameters()) + list(head.parameters()), schedule
    )
    for step in range(steps):
        batch = sampler.sample()
        loss = task_loss(task, head(backbone(batch.images)[-1]), batch.labels)
        _check_finite(loss, step + 1, task.task_id, batch.source_id)
        _set_lr(optimizer, lr_at(step, schedule))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if metrics is not None:
            metrics.emit(
                {
                    "stage": stage_label,
                    "step": step + 1,
                    "task": task.task_id,
                    "per_source_loss": {f"{task.task_id}/{batch.source_id}": float(loss.detach())},
                    "loss_avg": float(loss.detach()),
                    "lr": lr_at(step, schedule),
                }
            )


class HardSharingTrainer:
    """Baseline: one shared backbone with per-task heads, trained jointly on
    the averaged multi-source objective for every step (no phases, no links)."""

    def __init__(
        self,
        config: ExperimentConfig,
        sources: Mapping[str, SyntheticSource],
        backbone: nn.Module,
        heads: Mapping[str, nn.Module],
        metrics: MetricsLogger | None = None,
        stage_label: str = "hard-sharing",
    ):
        self.config = config
        self.schedule = config.expansion_schedule
        self.backbone = backbone
        self.heads = nn.ModuleDict(dict(heads))
        self.metrics = metrics
        self.stage_label = stage_label
        self.step = 0
        self.samplers = {
            task.task_id: TaskSampler(
                task, sources, self.schedule.batch_size, config.global_seed
            )
            for task in config.tasks
        }
        self.optimizer = _make_optimizer(
            list(backbone.parameters()) + list(self.heads.parameters()), self.schedule
        )

    def step_once(self) -> dict:
        lr = lr_at(self.step, self.schedule)
        k = self.step + 1
        entries = []
        for task in self.config.tasks:
            tid = task.task_id
            batch = self.samplers[tid].sample()
            pred = self.heads[tid](self.backbone(batch.images)[-1])
            loss = task_loss(task, pred, batch.labels)
            _check_finite(loss, k, tid, batch.source_id)
            entries.append((tid, batch.source_id, loss))
        total = average_multi_source_loss(entries)
        _set_lr(self.optimizer, lr)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.step = k
        record = {
            "stage": self.stage_label,
            "step": k,
            "phase": 0,
            "per_source_loss": {f"{t}/{s}": float(v.detach()) for t, s, v in entries},
            "loss_avg": float(total.detach()),
            "lr": lr,
        }
        if self.metrics is not None:
            self.metrics.emit(record)
        return record

    def run(self, until_step: int | None = None) -> None:
        target = self.schedule.total_steps if until_step is None else until_step
        while self.step < target:
            self.step_once()

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "backbone": self.backbone.state_dict(),
            "heads": self.heads.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "samplers": {tid: s.state_dict() for tid, s in self.samplers.items()},
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])
        self.backbone.load_state_dict(state["backbone"])
        self.heads.load_state_dict(state["heads"])
        self.optimizer.load_state_dict(state["optimizer"])
        for tid, s_state in state["samplers"].items():
            self.samplers[tid].load_state_dict(s_state)
        torch.set_rng_state(state["torch_rng"])
