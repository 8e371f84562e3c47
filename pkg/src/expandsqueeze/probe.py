"""Transfer evaluation of frozen features.

The main metric is a linear probe: multinomial logistic regression on
globally average-pooled final-stage features, trained with a quasi-Newton
solver under an L2 grid, with the regularization strength chosen on a
validation split (ties resolved toward stronger regularization). Accuracy
is reported in percent. A toy dense-prediction fine-tune (mean IoU on a
held-out segmentation source) complements the probe suite.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from .config import ExperimentConfig, ProbeConfig, SyntheticGeneratorSpec
from .expansion import _make_optimizer, _set_lr
from .config import ScheduleConfig
from .seeding import derive_rng, derive_seed
from .tasks import SegmentationHead, SyntheticSource, make_synthetic_source

REPORT_SCHEMA_VERSION = 1


@dataclass
class ProbeResult:
    accuracy: float  # percent, on the test split
    best_lambda: float
    val_accuracies: dict[float, float] = field(default_factory=dict)
    predictions: np.ndarray | None = None  # test-split labels, argmax


@dataclass
class TransferReport:
    """Per-dataset probe accuracies plus their macro average, in percent."""

    model_tag: str
    per_dataset: dict[str, float] = field(default_factory=dict)
    best_lambdas: dict[str, float] = field(default_factory=dict)
    avg_cls: float = 0.0
    seg_finetune_miou: float | None = None
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "model_tag": self.model_tag,
            "per_dataset": dict(self.per_dataset),
            "best_lambdas": dict(self.best_lambdas),
            "avg_cls": self.avg_cls,
            "seg_finetune_miou": self.seg_finetune_miou,
        }

    def as_text(self) -> str:
        lines = [f"transfer report for {self.model_tag}"]
        for name, acc in self.per_dataset.items():
            lines.append(f"  {name:<28s} {acc:6.2f}%  (lambda {self.best_lambdas[name]:g})")
        lines.append(f"  {'AVG Cls':<28s} {self.avg_cls:6.2f}%")
        if self.seg_finetune_miou is not None:
            lines.append(f"  {'seg fine-tune mIoU':<28s} {self.seg_finetune_miou:6.2f}%")
        return "\n".join(lines)


def extract_features(
    model: nn.Module,
    source: SyntheticSource,
    indices: Sequence[int] | None = None,
    stage: int | None = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-per-sample matrix of globally average-pooled stage features.

    The model is run frozen in inference mode; the label column is returned
    alongside. ``stage`` defaults to the final stage.
    """
    was_training = model.training
    model.eval()
    idx = list(range(len(source))) if indices is None else [int(i) for i in indices]
    rows, labels = [], []
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            images, y = source.batch(chunk)
            feats = model(images)
            feat = feats[-1] if stage is None else feats[stage - 1]
            rows.append(feat.mean(dim=(2, 3)).double().numpy())
            labels.append(y.numpy())
    if was_training:
        model.train()
    return np.concatenate(rows), np.concatenate(labels)


def linear_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    config: ProbeConfig,
    seed: int = 0,
) -> ProbeResult:
    """Grid-searched L2 logistic regression on frozen features.

    20% of the training rows become the validation split for choosing the
    regularization strength; the winner (largest strength on ties) is
    refit on the full training set and scored on the test rows.
    """
    if len(np.unique(train_labels)) < 2:
        raise ValueError("degenerate probe input: fewer than two classes present")
    rng = derive_rng(seed, "probe-split")
    perm = rng.permutation(len(train_features))
    n_val = max(1, int(round(0.2 * len(train_features))))
    val_idx, fit_idx = perm[:n_val], perm[n_val:]

    def fit(lam: float, x: np.ndarray, y: np.ndarray) -> LogisticRegression:
        clf = LogisticRegression(
            C=1.0 / lam, solver="lbfgs", max_iter=config.max_iterations
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            clf.fit(x, y)
        return clf

    val_accuracies: dict[float, float] = {}
    best_lambda, best_val = None, -1.0
    for lam in sorted(set(config.lambda_grid), reverse=True):
        clf = fit(lam, train_features[fit_idx], train_labels[fit_idx])
        val_acc = float(clf.score(train_features[val_idx], train_labels[val_idx]))
        val_accuracies[lam] = 100.0 * val_acc
        if val_acc > best_val:
            best_lambda, best_val = lam, val_acc

    final = fit(best_lambda, train_features, train_labels)
    predictions = final.predict(test_features)
    accuracy = 100.0 * float(np.mean(predictions == test_labels))
    return ProbeResult(
        accuracy=accuracy,
        best_lambda=best_lambda,
        val_accuracies=val_accuracies,
        predictions=predictions,
    )


def mean_iou(predictions: np.ndarray, targets: np.ndarray, num_classes: int) -> float:
    """Mean intersection-over-union (percent) over classes that occur."""
    ious = []
    for c in range(num_classes):
        pred_c = predictions == c
        true_c = targets == c
        union = np.logical_or(pred_c, true_c).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(pred_c, true_c).sum() / union)
    return 100.0 * float(np.mean(ious)) if ious else 0.0


def dense_finetune_eval(
    model: nn.Module,
    seg_spec: SyntheticGeneratorSpec,
    steps: int,
    seed: int,
    batch_size: int = 16,
    train_size: int = 160,
    test_size: int = 48,
    freeze_backbone: bool = False,
) -> float:
    """Quick dense-task fine-tune on a held-out segmentation source.

    A deep copy of the feature model gets a fresh dense head and is trained
    briefly with SGD; returns mean IoU (percent) on the held-out test
    split. The original model is never mutated.
    """
    source = make_synthetic_source(
        seg_spec, train_size + test_size, derive_seed(seed, "dense-finetune-data")
    )
    net = copy.deepcopy(model)
    net.train()
    torch.manual_seed(derive_seed(seed, "dense-finetune-head"))
    head = SegmentationHead(
        net.stage_channels[-1], seg_spec.num_classes, seg_spec.image_size
    )
    if freeze_backbone:
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        params = list(head.parameters())
    else:
        params = list(net.parameters()) + list(head.parameters())
    schedule = ScheduleConfig(
        total_steps=max(steps, 1), phase_threshold=0, batch_size=batch_size, base_lr=0.05
    )
    optimizer = _make_optimizer(params, schedule)
    rng = derive_rng(seed, "dense-finetune-batches")
    for step in range(steps):
        indices = rng.integers(0, train_size, size=batch_size)
        images, labels = source.batch(indices)
        logits = head(net(images)[-1])
        loss = nn.functional.cross_entropy(logits, labels)
        _set_lr(optimizer, schedule.base_lr)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    net.eval()
    preds, trues = [], []
    with torch.no_grad():
        for start in range(train_size, train_size + test_size, batch_size):
            idx = range(start, min(start + batch_size, train_size + test_size))
            images, labels = source.batch(idx)
            logits = head(net(images)[-1])
            preds.append(logits.argmax(dim=1).numpy())
            trues.append(labels.numpy())
    return mean_iou(np.concatenate(preds), np.concatenate(trues), seg_spec.num_classes)


def evaluate_transfer(
    model: nn.Module,
    config: ExperimentConfig,
    seed: int | None = None,
    model_tag: str = "model",
    include_dense: bool = True,
) -> TransferReport:
    """Probe the model on every held-out transfer dataset and macro-average.

    Deterministic given the checkpoint and config: held-out data derive
    from the experiment seed only.
    """
    probe_cfg = config.eval
    seed = config.global_seed if seed is None else seed
    report = TransferReport(model_tag=model_tag)
    accs = []
    for i, gen in enumerate(probe_cfg.transfer_datasets):
        name = f"{gen.kind}-{i}"
        total = probe_cfg.probe_train_size + probe_cfg.probe_test_size
        source = make_synthetic_source(gen, total, derive_seed(seed, "transfer-data", i))
        train_idx = range(probe_cfg.probe_train_size)
        test_idx = range(probe_cfg.probe_train_size, total)
        train_x, train_y = extract_features(model, source, train_idx, probe_cfg.feature_stage)
        test_x, test_y = extract_features(model, source, test_idx, probe_cfg.feature_stage)
        result = linear_probe(
            train_x, train_y, test_x, test_y, probe_cfg, seed=derive_seed(seed, "probe", i)
        )
        report.per_dataset[name] = result.accuracy
        report.best_lambdas[name] = result.best_lambda
        accs.append(result.accuracy)
    report.avg_cls = float(np.mean(accs)) if accs else 0.0
    if include_dense and probe_cfg.seg_finetune is not None:
        report.seg_finetune_miou = dense_finetune_eval(
            model,
            probe_cfg.seg_finetune,
            probe_cfg.seg_finetune_steps,
            derive_seed(seed, "dense-finetune"),
        )
    return report
