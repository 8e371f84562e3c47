"""End-to-end orchestration: stages, artifacts, resume, CLI exit codes."""

import dataclasses
import json

import pytest
import torch
import yaml
from click.testing import CliRunner

from expandsqueeze.checkpoint import load_checkpoint
from expandsqueeze.cli import main
from expandsqueeze.config import (
    ConfigError,
    ScheduleConfig,
    experiment_config_to_dict,
)
from expandsqueeze.metrics import read_metrics
from expandsqueeze.pipeline import (
    output_paths,
    run_evaluate,
    run_pretrain,
    run_report,
    run_squeeze,
    run_variant_end_to_end,
)

from conftest import micro_config


def tiny_eval_config(tmp_path, **overrides):
    from expandsqueeze.config import SyntheticGeneratorSpec

    cfg = micro_config(tmp_path, **overrides)
    probe = dataclasses.replace(
        cfg.eval,
        transfer_datasets=(
            SyntheticGeneratorSpec("shape-class", 3, (32, 32), palette_seed=901),
            SyntheticGeneratorSpec("texture-class", 3, (32, 32), palette_seed=902),
        ),
        probe_train_size=48,
        probe_test_size=16,
        max_iterations=120,
    )
    return dataclasses.replace(cfg, eval=probe)


class TestStages:
    def test_pretrain_squeeze_evaluate_artifacts(self, tmp_path):
        """The three stages leave checkpoints, a metrics log and a report."""
        config = tiny_eval_config(tmp_path)
        paths = output_paths(config)
        run_pretrain(config)
        assert paths.checkpoint("phase1").exists()
        assert paths.checkpoint("expanded").exists()
        run_squeeze(config)
        assert paths.checkpoint("squeezed").exists()
        outcome = run_evaluate(config)
        assert outcome["best_branch"] == "student"
        assert (paths.reports / "transfer-squeezed.json").exists()
        records = read_metrics(paths.metrics)
        stages = {r["stage"] for r in records}
        assert {"expansion", "squeeze", "evaluate"} <= stages
        exp_steps = [r["step"] for r in records if r["stage"] == "expansion"]
        assert exp_steps == sorted(exp_steps)

    def test_squeeze_without_pretrain_fails(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        with pytest.raises(ConfigError, match="pretrain"):
            run_squeeze(config)

    def test_variants_without_squeeze_stage_refuse(self, tmp_path):
        config = tiny_eval_config(tmp_path, variant="hard_sharing")
        run_pretrain(config)
        with pytest.raises(ConfigError, match="no squeeze stage"):
            run_squeeze(config)

    def test_prune_variant_produces_masked_checkpoint(self, tmp_path):
        config = tiny_eval_config(tmp_path, variant="xlearner_p")
        run_pretrain(config)
        path = run_squeeze(config)
        bundle = load_checkpoint(path)
        assert bundle.stage == "pruned"
        assert bundle.payload["target_sparsity"] == pytest.approx(0.5)
        outcome = run_evaluate(config)
        assert outcome["best_branch"].startswith("branch:")

    def test_evaluate_specific_checkpoint(self, tmp_path):
        """The expanded teacher can be probed directly, branch by branch."""
        config = tiny_eval_config(tmp_path)
        run_pretrain(config)
        paths = output_paths(config)
        outcome = run_evaluate(config, checkpoint=paths.checkpoint("expanded"))
        assert set(outcome["branches"]) == {"branch:shapes", "branch:regions"}


class TestResume:
    def test_resumed_run_matches_uninterrupted(self, tmp_path):
        """Stop at the phase-1 checkpoint, resume, and land on bitwise
        identical final parameters and identical metric records."""
        sched = ScheduleConfig(total_steps=12, phase_threshold=6, batch_size=8)
        config_a = tiny_eval_config(
            tmp_path / "a", expansion_schedule=sched, output_dir=str(tmp_path / "a/run")
        )
        run_pretrain(config_a)
        paths_a = output_paths(config_a)
        final_a = load_checkpoint(paths_a.checkpoint("expanded"))

        # interrupted twin: pretrain writes phase1.ckpt at step 6; replay
        # the tail by resuming from it in a fresh output dir
        config_b = tiny_eval_config(
            tmp_path / "b", expansion_schedule=sched, output_dir=str(tmp_path / "b/run")
        )
        run_pretrain(config_b)
        paths_b = output_paths(config_b)
        config_b2 = dataclasses.replace(config_b, output_dir=str(tmp_path / "b/resumed"))
        run_pretrain(config_b2, resume=paths_b.checkpoint("phase1"))
        final_b = load_checkpoint(output_paths(config_b2).checkpoint("expanded"))

        state_a = final_a.payload["trainer"]["expanded"]
        state_b = final_b.payload["trainer"]["expanded"]
        assert state_a.keys() == state_b.keys()
        for key in state_a:
            assert torch.equal(state_a[key], state_b[key]), key

        # metric streams agree step for step on the overlapping tail
        recs_a = [
            r for r in read_metrics(paths_a.metrics) if r["stage"] == "expansion"
        ]
        recs_b = [
            r
            for r in read_metrics(output_paths(config_b2).metrics)
            if r["stage"] == "expansion"
        ]
        tail_a = {r["step"]: r["loss_avg"] for r in recs_a if r["step"] > 6}
        tail_b = {r["step"]: r["loss_avg"] for r in recs_b}
        assert tail_a == tail_b

    def test_resume_config_mismatch_refused(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        run_pretrain(config)
        paths = output_paths(config)
        other = dataclasses.replace(config, global_seed=999)
        from expandsqueeze.checkpoint import CheckpointError

        with pytest.raises(CheckpointError, match="different config"):
            run_pretrain(other, resume=paths.checkpoint("phase1"))


class TestVariantsEndToEnd:
    @pytest.mark.parametrize(
        "variant", ["hard_sharing", "xlearner_t", "xlearner_pp", "xlearner_r"]
    )
    def test_variant_runs_and_reports(self, tmp_path, variant):
        config = tiny_eval_config(tmp_path, variant=variant, recon_topology=None)
        outcome = run_variant_end_to_end(config)
        best = outcome["branches"][outcome["best_branch"]]
        assert 0.0 <= best["avg_cls"] <= 100.0


class TestReport:
    def test_plots_written(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        run_variant_end_to_end(config)
        outputs = run_report(config)
        names = {p.name for p in outputs}
        assert names == {"loss_curves.png", "probe_accuracy.png"}
        for p in outputs:
            assert p.stat().st_size > 0

    def test_report_without_metrics_fails(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        with pytest.raises(ConfigError, match="metrics"):
            run_report(config)


def write_yaml_config(tmp_path, config):
    doc = experiment_config_to_dict(config)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


class TestCli:
    def test_full_cycle_exit_codes(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        cfg_path = write_yaml_config(tmp_path, config)
        runner = CliRunner()
        for command in ("pretrain", "squeeze", "evaluate", "report"):
            result = runner.invoke(main, [command, "--config", str(cfg_path)])
            assert result.exit_code == 0, f"{command}: {result.output}"
        out = runner.invoke(main, ["evaluate", "--config", str(cfg_path)])
        assert "AVG Cls" in out.output

    def test_validation_error_exit_code_1(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("version: 1\nbackbone: {family: toy-conv}\n")
        result = CliRunner().invoke(main, ["pretrain", "--config", str(bad)])
        assert result.exit_code == 1

    def test_missing_checkpoint_exit_code_1(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        cfg_path = write_yaml_config(tmp_path, config)
        result = CliRunner().invoke(main, ["evaluate", "--config", str(cfg_path)])
        assert result.exit_code == 1
        assert "run the preceding stages" in result.output

    def test_corrupt_checkpoint_exit_code_3(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        cfg_path = write_yaml_config(tmp_path, config)
        runner = CliRunner()
        assert runner.invoke(main, ["pretrain", "--config", str(cfg_path)]).exit_code == 0
        ckpt = output_paths(config).checkpoint("expanded")
        ckpt.write_bytes(ckpt.read_bytes()[:64])
        result = runner.invoke(main, ["squeeze", "--config", str(cfg_path)])
        assert result.exit_code == 3

    def test_training_failure_exit_code_2(self, tmp_path):
        config = tiny_eval_config(
            tmp_path,
            expansion_schedule=ScheduleConfig(
                total_steps=30, phase_threshold=15, batch_size=8, base_lr=1e18
            ),
        )
        cfg_path = write_yaml_config(tmp_path, config)
        result = CliRunner().invoke(main, ["pretrain", "--config", str(cfg_path)])
        assert result.exit_code == 2
        assert "training failure" in result.output

    def test_unknown_variant_rejected(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        doc = experiment_config_to_dict(config)
        doc["variant"] = "mystery"
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(doc))
        result = CliRunner().invoke(main, ["pretrain", "--config", str(path)])
        assert result.exit_code == 1
        assert "mystery" in result.output

    def test_compare_subset(self, tmp_path):
        config = tiny_eval_config(tmp_path)
        cfg_path = write_yaml_config(tmp_path, config)
        result = CliRunner().invoke(
            main,
            ["compare", "--config", str(cfg_path), "--variants", "hard_sharing,xlearner"],
        )
        assert result.exit_code == 0, result.output
        table = (output_paths(config).reports / "comparison.json").read_text()
        rows = json.loads(table)
        assert set(rows) == {"hard_sharing", "xlearner"}
        for row in rows.values():
            assert "avg_cls" in row and len(row["per_dataset"]) == 2
