"""End-to-end orchestration of pre-train / squeeze / evaluate / compare /
report, with checkpointing and a metrics stream under ``output_dir``.

Variant dispatch:

* ``xlearner`` / ``xlearner_t`` / ``xlearner_pp`` — two-phase expansion,
  then distillation squeeze (``_pp`` trains frozen single-source teachers
  first and adds hint losses during phase 1).
* ``xlearner_p``  — two-phase expansion, then global magnitude pruning
  plus fine-tuning as the squeeze.
* ``xlearner_r``  — reversed composition (per-task teachers, width-halved
  distilled students, joint expansion); no separate squeeze stage.
* ``hard_sharing`` — one shared backbone with per-task heads trained
  jointly on the averaged objective; no squeeze stage.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import torch
from torch import nn

from .backbones import SubBackbone, build_sub_backbone
from .checkpoint import CheckpointBundle, CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ExperimentConfig,
    SubBackboneSpec,
    config_fingerprint,
    validate_registry,
)
from .expansion import ExpansionTrainer, HardSharingTrainer, train_single_task
from .metrics import MetricsLogger, read_metrics
from .probe import TransferReport, evaluate_transfer
from .reconciliation import ExpandedBackbone, FusedBranch, build_reconciliation_graph
from .seeding import derive_seed
from .squeeze import (
    PrunedModel,
    SqueezePlan,
    distill_squeeze,
    magnitude_prune,
    prunable_weights,
    run_reversed_pipeline,
)
from .tasks import SyntheticSource, build_head, source_from_spec

# Squeeze mode implied by each variant (None = no squeeze stage).
VARIANT_SQUEEZE_MODE = {
    "xlearner": "distill",
    "xlearner_t": "distill",
    "xlearner_pp": "distill",
    "xlearner_p": "prune",
    "xlearner_r": None,
    "hard_sharing": None,
}


@dataclass
class OutputPaths:
    root: Path
    checkpoints: Path
    reports: Path
    plots: Path
    metrics: Path

    def checkpoint(self, stage: str) -> Path:
        return self.checkpoints / f"{stage}.ckpt"


def output_paths(config: ExperimentConfig) -> OutputPaths:
    root = Path(config.output_dir)
    paths = OutputPaths(
        root=root,
        checkpoints=root / "checkpoints",
        reports=root / "reports",
        plots=root / "plots",
        metrics=root / "metrics.log",
    )
    for p in (paths.root, paths.checkpoints, paths.reports, paths.plots):
        p.mkdir(parents=True, exist_ok=True)
    return paths


def build_sources(config: ExperimentConfig) -> dict[str, SyntheticSource]:
    return {src.source_id: source_from_spec(src) for src in config.sources}


def build_expanded_models(
    config: ExperimentConfig,
) -> tuple[ExpandedBackbone, dict[str, nn.Module]]:
    """Fresh expanded backbone + per-task heads with seed-keyed init."""
    image_size = tuple(config.backbone.input_shape[1:])
    subs: dict[str, SubBackbone] = {}
    heads: dict[str, nn.Module] = {}
    for task in config.tasks:
        tid = task.task_id
        subs[tid] = build_sub_backbone(
            config.backbone, derive_seed(config.global_seed, "backbone", tid)
        )
        torch.manual_seed(derive_seed(config.global_seed, "head", tid))
        heads[tid] = build_head(task, subs[tid].stage_channels[-1], image_size)
    expanded = build_reconciliation_graph(
        subs, config.recon_topology, seed=derive_seed(config.global_seed, "links")
    )
    return expanded, heads


def build_shared_models(
    config: ExperimentConfig,
) -> tuple[SubBackbone, dict[str, nn.Module]]:
    image_size = tuple(config.backbone.input_shape[1:])
    backbone = build_sub_backbone(
        config.backbone, derive_seed(config.global_seed, "shared-backbone")
    )
    heads = {}
    for task in config.tasks:
        torch.manual_seed(derive_seed(config.global_seed, "head", task.task_id))
        heads[task.task_id] = build_head(task, backbone.stage_channels[-1], image_size)
    return backbone, heads


def train_hint_teachers(
    config: ExperimentConfig,
    sources: Mapping[str, SyntheticSource],
    metrics: MetricsLogger | None = None,
) -> dict[str, SubBackbone]:
    """Single-task single-source teachers (one per task, largest source)."""
    image_size = tuple(config.backbone.input_shape[1:])
    steps = config.squeeze.pre_distill_steps
    if steps is None:
        steps = config.expansion_schedule.phase_threshold or 0
    teachers: dict[str, SubBackbone] = {}
    for task in config.tasks:
        tid = task.task_id
        biggest = max(config.sources_for(tid), key=lambda s: s.size)
        solo_task = dataclasses.replace(task, source_ids=(biggest.source_id,))
        backbone = build_sub_backbone(
            config.backbone, derive_seed(config.global_seed, "hint-teacher", tid)
        )
        torch.manual_seed(derive_seed(config.global_seed, "hint-teacher-head", tid))
        head = build_head(task, backbone.stage_channels[-1], image_size)
        train_single_task(
            backbone, head, solo_task, sources, config.expansion_schedule, steps,
            config.global_seed, sampler_label="hint-teacher-sampler",
            metrics=metrics, stage_label=f"hint-teacher/{tid}",
        )
        backbone.eval()
        for p in backbone.parameters():
            p.requires_grad_(False)
        teachers[tid] = backbone
    return teachers


def _require_valid(config: ExperimentConfig) -> None:
    report = validate_registry(config)
    if not report.ok:
        raise ConfigError(str(report), issues=report.issues)


def run_pretrain(
    config: ExperimentConfig,
    resume: str | Path | None = None,
    force: bool = False,
    metrics: MetricsLogger | None = None,
) -> Path:
    """Run the variant's pre-training; returns the final checkpoint path."""
    _require_valid(config)
    paths = output_paths(config)
    fingerprint = config_fingerprint(config)
    own_metrics = metrics is None
    metrics = metrics or MetricsLogger(paths.metrics)
    sources = build_sources(config)
    schedule = config.expansion_schedule
    try:
        if config.variant == "hard_sharing":
            backbone, heads = build_shared_models(config)
            trainer = HardSharingTrainer(config, sources, backbone, heads, metrics=metrics)
            if resume is not None:
                bundle = load_checkpoint(resume, fingerprint, force=force)
                trainer.load_state_dict(bundle.payload["trainer"])
            trainer.run()
            final = save_checkpoint(
                paths.checkpoint("expanded"),
                CheckpointBundle(
                    stage="expanded",
                    step=trainer.step,
                    config_hash=fingerprint,
                    payload={"kind": "hard_sharing", "trainer": trainer.state_dict()},
                ),
            )
            return final

        if config.variant == "xlearner_r":
            if resume is not None:
                raise ConfigError("resume is not supported for the reversed variant")
            result = run_reversed_pipeline(config, sources, metrics=metrics)
            student_spec = next(iter(result.students.values())).spec
            final = save_checkpoint(
                paths.checkpoint("expanded"),
                CheckpointBundle(
                    stage="expanded",
                    step=schedule.total_steps,
                    config_hash=fingerprint,
                    payload={
                        "kind": "reversed",
                        "expanded": result.expanded.state_dict(),
                        "heads": {t: h.state_dict() for t, h in result.heads.items()},
                        "student_spec": dataclasses.asdict(student_spec),
                    },
                ),
            )
            return final

        # standard expansion variants
        expanded, heads = build_expanded_models(config)
        hint_teachers = None
        saved_teachers = None
        if config.variant == "xlearner_pp":
            if resume is not None:
                bundle = load_checkpoint(resume, fingerprint, force=force)
                saved_teachers = bundle.payload.get("hint_teachers")
            if saved_teachers is not None:
                hint_teachers = {}
                for task in config.tasks:
                    tid = task.task_id
                    teacher = build_sub_backbone(
                        config.backbone, derive_seed(config.global_seed, "hint-teacher", tid)
                    )
                    teacher.load_state_dict(saved_teachers[tid])
                    teacher.eval()
                    for p in teacher.parameters():
                        p.requires_grad_(False)
                    hint_teachers[tid] = teacher
            else:
                hint_teachers = train_hint_teachers(config, sources, metrics=metrics)
        trainer = ExpansionTrainer(
            config, sources, expanded, heads, metrics=metrics, hint_teachers=hint_teachers
        )
        if resume is not None:
            bundle = load_checkpoint(resume, fingerprint, force=force)
            trainer.load_state_dict(bundle.payload["trainer"])

        def checkpoint_payload() -> dict:
            payload = {"kind": "expansion", "trainer": trainer.state_dict()}
            if hint_teachers is not None:
                payload["hint_teachers"] = {
                    t: b.state_dict() for t, b in hint_teachers.items()
                }
            return payload

        tau = schedule.phase_threshold or 0
        if trainer.step < tau:
            trainer.run(until_step=tau)
            save_checkpoint(
                paths.checkpoint("phase1"),
                CheckpointBundle(
                    stage="phase1",
                    step=trainer.step,
                    config_hash=fingerprint,
                    payload=checkpoint_payload(),
                ),
            )
        trainer.run()
        final = save_checkpoint(
            paths.checkpoint("expanded"),
            CheckpointBundle(
                stage="expanded",
                step=trainer.step,
                config_hash=fingerprint,
                payload=checkpoint_payload(),
            ),
        )
        return final
    finally:
        if own_metrics:
            metrics.close()


def _load_expanded_from_bundle(
    config: ExperimentConfig, bundle: CheckpointBundle
) -> tuple[ExpandedBackbone, dict[str, nn.Module]]:
    if bundle.payload.get("kind") != "expansion":
        raise CheckpointError(
            f"checkpoint holds '{bundle.payload.get('kind')}', expected an expansion state"
        )
    expanded, heads = build_expanded_models(config)
    trainer_state = bundle.payload["trainer"]
    expanded.load_state_dict(trainer_state["expanded"])
    head_module = nn.ModuleDict(dict(heads))
    head_module.load_state_dict(trainer_state["heads"])
    return expanded, dict(head_module)


def run_squeeze(
    config: ExperimentConfig,
    checkpoint: str | Path | None = None,
    force: bool = False,
    metrics: MetricsLogger | None = None,
) -> Path:
    """Condense the pre-trained expanded backbone per the variant."""
    _require_valid(config)
    mode = VARIANT_SQUEEZE_MODE.get(config.variant)
    if mode is None:
        raise ConfigError(
            f"variant '{config.variant}' has no squeeze stage after pre-training"
        )
    paths = output_paths(config)
    fingerprint = config_fingerprint(config)
    own_metrics = metrics is None
    metrics = metrics or MetricsLogger(paths.metrics)
    try:
        ckpt_path = Path(checkpoint) if checkpoint else paths.checkpoint("expanded")
        if not ckpt_path.exists():
            raise ConfigError(
                f"no expanded checkpoint at {ckpt_path}; run `pretrain` first"
            )
        bundle = load_checkpoint(ckpt_path, fingerprint, force=force)
        expanded, heads = _load_expanded_from_bundle(config, bundle)
        sources = build_sources(config)

        if mode == "distill":
            plan = SqueezePlan(
                mode="distill",
                student_spec=config.backbone,
                schedule=config.squeeze_schedule,
                distill_stage=config.squeeze.distill_stage,
                student_init=config.squeeze.student_init,
            )
            student = distill_squeeze(
                expanded, plan, sources, config.global_seed, metrics=metrics
            )
            return save_checkpoint(
                paths.checkpoint("squeezed"),
                CheckpointBundle(
                    stage="squeezed",
                    step=config.squeeze_schedule.total_steps,
                    config_hash=fingerprint,
                    payload={
                        "kind": "squeezed",
                        "student": student.state_dict(),
                        "student_spec": dataclasses.asdict(student.spec),
                    },
                ),
            )

        sparsity = config.squeeze.prune_target_sparsity
        if sparsity is None:
            sparsity = 1.0 - 1.0 / config.num_tasks
        pruned = magnitude_prune(
            expanded, heads, config, sources, sparsity, config.squeeze_schedule,
            metrics=metrics,
        )
        return save_checkpoint(
            paths.checkpoint("pruned"),
            CheckpointBundle(
                stage="pruned",
                step=config.squeeze_schedule.total_steps,
                config_hash=fingerprint,
                payload={
                    "kind": "pruned",
                    "model": pruned.state_dict(),
                    "mask_names": pruned._mask_names,
                    "target_sparsity": sparsity,
                },
            ),
        )
    finally:
        if own_metrics:
            metrics.close()


def _feature_models_from_bundle(
    config: ExperimentConfig, bundle: CheckpointBundle
) -> dict[str, nn.Module]:
    """Feature extractors to probe, keyed by a branch tag."""
    kind = bundle.payload.get("kind")
    if kind == "squeezed":
        spec = SubBackboneSpec(**bundle.payload["student_spec"])
        student = build_sub_backbone(spec, 0)
        student.load_state_dict(bundle.payload["student"])
        return {"student": student}
    if kind == "hard_sharing":
        backbone, _ = build_shared_models(config)
        backbone.load_state_dict(bundle.payload["trainer"]["backbone"])
        return {"shared": backbone}
    if kind == "expansion":
        expanded, _ = _load_expanded_from_bundle(config, bundle)
        return {f"branch:{tid}": FusedBranch(expanded, tid) for tid in expanded.task_ids}
    if kind == "reversed":
        spec = SubBackboneSpec(**bundle.payload["student_spec"])
        subs = {
            task.task_id: build_sub_backbone(spec, 0) for task in config.tasks
        }
        expanded = build_reconciliation_graph(subs, config.recon_topology, seed=0)
        expanded.load_state_dict(bundle.payload["expanded"])
        return {f"branch:{tid}": FusedBranch(expanded, tid) for tid in expanded.task_ids}
    if kind == "pruned":
        expanded, _ = build_expanded_models(config)
        masks = {
            name: torch.ones_like(w, dtype=torch.bool)
            for name, w in prunable_weights(expanded).items()
        }
        pruned = PrunedModel(expanded, masks)
        pruned.load_state_dict(bundle.payload["model"])
        return {
            f"branch:{tid}": FusedBranch(pruned.expanded, tid)
            for tid in pruned.expanded.task_ids
        }
    raise CheckpointError(f"cannot evaluate checkpoint of kind '{kind}'")


def _default_evaluate_checkpoint(config: ExperimentConfig, paths: OutputPaths) -> Path:
    mode = VARIANT_SQUEEZE_MODE.get(config.variant)
    if mode == "distill":
        stage = "squeezed"
    elif mode == "prune":
        stage = "pruned"
    else:
        stage = "expanded"
    path = paths.checkpoint(stage)
    if not path.exists():
        raise ConfigError(
            f"no '{stage}' checkpoint at {path}; run the preceding stages first"
        )
    return path


def run_evaluate(
    config: ExperimentConfig,
    checkpoint: str | Path | None = None,
    force: bool = False,
    metrics: MetricsLogger | None = None,
) -> dict:
    """Probe the final artifact on the held-out transfer suite.

    For expanded (multi-branch) artifacts every task branch is probed and
    the best branch is reported. Writes the report as JSON and text under
    ``reports/`` and appends a summary record to the metrics stream.
    """
    _require_valid(config)
    paths = output_paths(config)
    fingerprint = config_fingerprint(config)
    own_metrics = metrics is None
    metrics = metrics or MetricsLogger(paths.metrics)
    try:
        ckpt_path = (
            Path(checkpoint) if checkpoint else _default_evaluate_checkpoint(config, paths)
        )
        bundle = load_checkpoint(ckpt_path, fingerprint, force=force)
        models = _feature_models_from_bundle(config, bundle)
        reports: dict[str, TransferReport] = {}
        for tag, model in models.items():
            reports[tag] = evaluate_transfer(
                model, config, model_tag=f"{config.variant}/{bundle.stage}/{tag}"
            )
        best_tag = max(reports, key=lambda t: reports[t].avg_cls)
        result = {
            "schema_version": 1,
            "variant": config.variant,
            "stage": bundle.stage,
            "best_branch": best_tag,
            "branches": {tag: r.to_dict() for tag, r in reports.items()},
        }
        out_json = paths.reports / f"transfer-{bundle.stage}.json"
        out_json.write_text(json.dumps(result, indent=2, sort_keys=True))
        out_text = paths.reports / f"transfer-{bundle.stage}.txt"
        out_text.write_text(
            "\n\n".join(reports[tag].as_text() for tag in sorted(reports)) + "\n"
        )
        metrics.emit(
            {
                "stage": "evaluate",
                "step": bundle.step,
                "checkpoint_stage": bundle.stage,
                "best_branch": best_tag,
                "avg_cls": reports[best_tag].avg_cls,
            }
        )
        result["reports"] = reports
        result["paths"] = {"json": out_json, "text": out_text}
        return result
    finally:
        if own_metrics:
            metrics.close()


def run_variant_end_to_end(config: ExperimentConfig) -> dict:
    """pretrain -> squeeze (when the variant has one) -> evaluate."""
    paths = output_paths(config)
    with MetricsLogger(paths.metrics) as metrics:
        run_pretrain(config, metrics=metrics)
        if VARIANT_SQUEEZE_MODE.get(config.variant) is not None:
            run_squeeze(config, metrics=metrics)
        return run_evaluate(config, metrics=metrics)


def run_compare(config: ExperimentConfig, variants: list[str]) -> dict:
    """Run the variant set on this config and tabulate probe results."""
    _require_valid(config)
    paths = output_paths(config)
    rows: dict[str, dict] = {}
    for variant in variants:
        sub = dataclasses.replace(
            config,
            variant=variant,
            recon_topology=None,  # refilled from the variant default
            output_dir=str(paths.root / "compare" / variant),
        )
        outcome = run_variant_end_to_end(sub)
        best = outcome["branches"][outcome["best_branch"]]
        rows[variant] = {
            "per_dataset": best["per_dataset"],
            "avg_cls": best["avg_cls"],
            "best_branch": outcome["best_branch"],
        }

    dataset_names = sorted(
        {name for row in rows.values() for name in row["per_dataset"]}
    )
    header = ["variant"] + dataset_names + ["AVG"]
    lines = ["  ".join(f"{h:<20s}" if i == 0 else f"{h:>16s}" for i, h in enumerate(header))]
    for variant, row in rows.items():
        cells = [f"{variant:<20s}"]
        cells += [f"{row['per_dataset'].get(d, float('nan')):>15.2f}%" for d in dataset_names]
        cells += [f"{row['avg_cls']:>15.2f}%"]
        lines.append("  ".join(cells))
    table = "\n".join(lines) + "\n"
    (paths.reports / "comparison.txt").write_text(table)
    (paths.reports / "comparison.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True)
    )
    return rows


def run_report(config: ExperimentConfig) -> list[Path]:
    """Render loss curves and probe bars from the recorded artifacts."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = output_paths(config)
    outputs: list[Path] = []
    if not paths.metrics.exists():
        raise ConfigError(f"no metrics log at {paths.metrics}; run `pretrain` first")
    records = [r for r in read_metrics(paths.metrics) if "loss_avg" in r]
    if records:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        stages = sorted({r["stage"] for r in records})
        for stage in stages:
            xs = [r["step"] for r in records if r["stage"] == stage]
            ys = [r["loss_avg"] for r in records if r["stage"] == stage]
            ax.plot(xs, ys, label=stage, linewidth=1)
        ax.set_xlabel("step")
        ax.set_ylabel("averaged loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        ax.set_title(f"{config.name}: training loss")
        out = paths.plots / "loss_curves.png"
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
        outputs.append(out)

    report_files = sorted(paths.reports.glob("transfer-*.json"))
    if report_files:
        doc = json.loads(report_files[-1].read_text())
        best = doc["branches"][doc["best_branch"]]
        names = list(best["per_dataset"]) + ["AVG"]
        values = [best["per_dataset"][n] for n in best["per_dataset"]] + [best["avg_cls"]]
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar(range(len(values)), values, color="#4878cf")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel("probe accuracy (%)")
        ax.set_ylim(0, 100)
        ax.set_title(f"{config.name}: transfer probes ({doc['best_branch']})")
        out = paths.plots / "probe_accuracy.png"
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
        outputs.append(out)
    return outputs
