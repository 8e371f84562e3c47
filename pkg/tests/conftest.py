import dataclasses
from pathlib import Path

import pytest
import torch

from expandsqueeze.config import (
    ExperimentConfig,
    HeadSpec,
    ScheduleConfig,
    SourceSpec,
    SubBackboneSpec,
    SyntheticGeneratorSpec,
    TaskSpec,
)


@pytest.fixture(autouse=True)
def _single_thread():
    """Serial torch keeps every arithmetic comparison bitwise-stable."""
    torch.set_num_threads(1)


GEN_CLS = SyntheticGeneratorSpec(
    kind="shape-class", num_classes=3, image_size=(32, 32), noise_level=0.12
)
GEN_TEX = SyntheticGeneratorSpec(
    kind="texture-class", num_classes=3, image_size=(32, 32), noise_level=0.15, palette_seed=3
)
GEN_SEG = SyntheticGeneratorSpec(
    kind="shape-seg", num_classes=3, image_size=(32, 32), noise_level=0.1, palette_seed=1
)


def micro_config(tmp_path: Path, **overrides) -> ExperimentConfig:
    """Small but complete 2-task experiment used across the suite."""
    base = dict(
        tasks=(
            TaskSpec("shapes", "multiclass-ce", HeadSpec("classification", 3), ("c0", "c1")),
            TaskSpec("regions", "per-pixel-ce", HeadSpec("segmentation", 3), ("s0",)),
        ),
        sources=(
            SourceSpec("c0", "shapes", GEN_CLS, 96, 2100),
            SourceSpec("c1", "shapes", GEN_TEX, 64, 2101),
            SourceSpec("s0", "regions", GEN_SEG, 96, 2200),
        ),
        backbone=SubBackboneSpec("toy-conv", (8, 16, 32), input_shape=(3, 32, 32)),
        expansion_schedule=ScheduleConfig(total_steps=20, phase_threshold=10, batch_size=8),
        squeeze_schedule=ScheduleConfig(total_steps=10, phase_threshold=0, batch_size=8),
        variant="xlearner",
        global_seed=13,
        output_dir=str(tmp_path / "run"),
        name="micro-test",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture
def config(tmp_path) -> ExperimentConfig:
    return micro_config(tmp_path)
