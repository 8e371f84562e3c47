"""Linear probe protocol and transfer evaluation."""

import dataclasses

import numpy as np
import pytest
import torch

from expandsqueeze.config import ProbeConfig, SubBackboneSpec, SyntheticGeneratorSpec
from expandsqueeze.backbones import build_sub_backbone
from expandsqueeze.probe import (
    dense_finetune_eval,
    evaluate_transfer,
    extract_features,
    linear_probe,
    mean_iou,
)
from expandsqueeze.tasks import make_synthetic_source

from conftest import GEN_CLS, micro_config


def blobs(n_per_class, centers, spread, seed, dims=2):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label, center in enumerate(centers):
        pts = rng.normal(size=(n_per_class, dims)) * spread + np.asarray(center)
        xs.append(pts)
        ys.append(np.full(n_per_class, label))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(len(x))
    return x[perm], y[perm]


class TestExtractFeatures:
    def test_matrix_shape(self):
        spec = SubBackboneSpec("toy-conv", (8, 16, 64), input_shape=(3, 32, 32))
        model = build_sub_backbone(spec, 0)
        source = make_synthetic_source(GEN_CLS, 10, 1)
        feats, labels = extract_features(model, source)
        assert feats.shape == (10, 64)
        assert labels.shape == (10,)

    def test_deterministic(self):
        spec = SubBackboneSpec("toy-conv", (8, 16), input_shape=(3, 32, 32))
        model = build_sub_backbone(spec, 0)
        source = make_synthetic_source(GEN_CLS, 8, 1)
        a, _ = extract_features(model, source)
        b, _ = extract_features(model, source)
        assert np.array_equal(a, b)

    def test_zeroed_model_gives_zero_matrix(self):
        spec = SubBackboneSpec("toy-conv", (8, 16), input_shape=(3, 32, 32))
        model = build_sub_backbone(spec, 0)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        source = make_synthetic_source(GEN_CLS, 6, 1)
        feats, _ = extract_features(model, source)
        assert np.all(feats == 0.0)

    def test_stage_selection(self):
        spec = SubBackboneSpec("toy-conv", (8, 16, 64), input_shape=(3, 32, 32))
        model = build_sub_backbone(spec, 0)
        source = make_synthetic_source(GEN_CLS, 4, 1)
        feats, _ = extract_features(model, source, stage=1)
        assert feats.shape == (4, 8)


class TestLinearProbe:
    def test_separable_blobs_reach_100(self):
        """Two well-separated Gaussian blobs probe at exactly 100%."""
        train_x, train_y = blobs(60, [(-5, -5), (5, 5)], 0.5, seed=0)
        test_x, test_y = blobs(30, [(-5, -5), (5, 5)], 0.5, seed=1)
        result = linear_probe(train_x, train_y, test_x, test_y, ProbeConfig())
        assert result.accuracy == 100.0

    def test_shuffled_labels_sit_at_chance(self):
        """Random labels with C=4: mean accuracy 25% +/- 5% over 5 seeds."""
        accs = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            train_x = rng.normal(size=(200, 8))
            train_y = rng.integers(0, 4, size=200)
            test_x = rng.normal(size=(120, 8))
            test_y = rng.integers(0, 4, size=120)
            result = linear_probe(train_x, train_y, test_x, test_y, ProbeConfig(), seed=seed)
            accs.append(result.accuracy)
        assert abs(float(np.mean(accs)) - 25.0) <= 5.0

    def test_duplicated_columns_leave_predictions_stable(self):
        """Duplicating every feature column keeps predicted labels equal."""
        train_x, train_y = blobs(50, [(-2, 0), (2, 0), (0, 3)], 1.2, seed=3)
        test_x, test_y = blobs(25, [(-2, 0), (2, 0), (0, 3)], 1.2, seed=4)
        base = linear_probe(train_x, train_y, test_x, test_y, ProbeConfig(), seed=0)
        doubled = linear_probe(
            np.hstack([train_x, train_x]),
            train_y,
            np.hstack([test_x, test_x]),
            test_y,
            ProbeConfig(),
            seed=0,
        )
        assert np.array_equal(base.predictions, doubled.predictions)

    def test_ties_resolve_to_larger_lambda(self):
        """On trivially separable data every strength wins; the largest
        lambda must be reported."""
        train_x, train_y = blobs(40, [(-9, -9), (9, 9)], 0.1, seed=5)
        test_x, test_y = blobs(10, [(-9, -9), (9, 9)], 0.1, seed=6)
        result = linear_probe(train_x, train_y, test_x, test_y, ProbeConfig(), seed=1)
        assert result.best_lambda == max(ProbeConfig().lambda_grid)

    def test_determinism(self):
        train_x, train_y = blobs(40, [(-2, 0), (2, 0)], 1.5, seed=7)
        test_x, test_y = blobs(20, [(-2, 0), (2, 0)], 1.5, seed=8)
        a = linear_probe(train_x, train_y, test_x, test_y, ProbeConfig(), seed=2)
        b = linear_probe(train_x, train_y, test_x, test_y, ProbeConfig(), seed=2)
        assert a.accuracy == b.accuracy and a.best_lambda == b.best_lambda

    def test_single_class_rejected(self):
        x = np.random.default_rng(0).normal(size=(10, 3))
        with pytest.raises(ValueError, match="degenerate"):
            linear_probe(x, np.zeros(10, dtype=int), x, np.zeros(10, dtype=int), ProbeConfig())

    def test_train_accuracy_dominates_test(self):
        """Sanity: probing the training features scores at least the test
        accuracy minus a 2-point noise band (pinned seed)."""
        train_x, train_y = blobs(60, [(-1.5, 0), (1.5, 0)], 1.6, seed=9)
        test_x, test_y = blobs(40, [(-1.5, 0), (1.5, 0)], 1.6, seed=10)
        on_test = linear_probe(train_x, train_y, test_x, test_y, ProbeConfig(), seed=0)
        on_train = linear_probe(train_x, train_y, train_x, train_y, ProbeConfig(), seed=0)
        assert on_train.accuracy >= on_test.accuracy - 2.0


class TestMeanIou:
    def test_perfect_and_disjoint(self):
        a = np.array([[0, 1], [2, 0]])
        assert mean_iou(a, a, 3) == 100.0
        b = np.array([[1, 0], [0, 1]])
        assert mean_iou(a, b, 3) == 0.0

    def test_partial_overlap_value(self):
        pred = np.array([0, 0, 1, 1])
        true = np.array([0, 1, 1, 1])
        # class 0: i=1 u=2; class 1: i=2 u=3
        assert mean_iou(pred, true, 2) == pytest.approx(100 * (0.5 + 2 / 3) / 2)


class TestEvaluateTransfer:
    def test_report_structure_and_macro_average(self, config):
        """Three held-out datasets produce three accuracies and their mean."""
        probe_cfg = dataclasses.replace(
            config.eval,
            transfer_datasets=(
                SyntheticGeneratorSpec("shape-class", 3, (32, 32), palette_seed=91),
                SyntheticGeneratorSpec("texture-class", 3, (32, 32), palette_seed=92),
                SyntheticGeneratorSpec("shape-class", 4, (32, 32), palette_seed=93),
            ),
            probe_train_size=64,
            probe_test_size=32,
            max_iterations=200,
        )
        config = dataclasses.replace(config, eval=probe_cfg)
        model = build_sub_backbone(config.backbone, 3)
        report = evaluate_transfer(model, config, model_tag="random")
        assert len(report.per_dataset) == 3
        assert report.avg_cls == pytest.approx(
            float(np.mean(list(report.per_dataset.values()))), abs=1e-12
        )
        text = report.as_text()
        assert "AVG Cls" in text

    def test_identical_checkpoint_identical_report(self, config):
        probe_cfg = dataclasses.replace(
            config.eval,
            transfer_datasets=(
                SyntheticGeneratorSpec("shape-class", 3, (32, 32), palette_seed=91),
            ),
            probe_train_size=48,
            probe_test_size=16,
            max_iterations=100,
        )
        config = dataclasses.replace(config, eval=probe_cfg)
        model = build_sub_backbone(config.backbone, 3)
        a = evaluate_transfer(model, config)
        b = evaluate_transfer(model, config)
        assert a.per_dataset == b.per_dataset
        assert a.avg_cls == b.avg_cls

    def test_dense_finetune_does_not_mutate_model(self, config):
        model = build_sub_backbone(config.backbone, 3)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        seg = SyntheticGeneratorSpec("shape-seg", 3, (32, 32), palette_seed=99)
        miou = dense_finetune_eval(model, seg, steps=5, seed=0)
        assert 0.0 <= miou <= 100.0
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v)
