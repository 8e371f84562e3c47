"""D-stage sub-backbones: a toy conv family for experiments and a
bottleneck ResNet-50 family for exact parameter accounting.

Both families expose the same interface: a ``stem`` followed by ``depth``
stages, where ``forward`` returns one feature map per stage. The stem
reduces the input 4x; stage 1 keeps that resolution and every later stage
halves it, so stage ``i`` runs at ``input / (4 * 2**(i-1))``.

Reduced-width backbones are derived with ``scale_channels``: every width
is floored to a multiple of ``channel_multiple`` after scaling. For the
ResNet family the same rule is applied uniformly to the stem width, the
bottleneck mid widths and the stage output widths.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .config import SubBackboneSpec

RESNET50_BLOCK_COUNTS = (3, 4, 6, 3)


def scale_channels(
    widths: Sequence[int], factor: float, multiple: int = 4
) -> tuple[int, ...]:
    """Scale channel widths and floor each to a multiple of ``multiple``.

    A factor of exactly 1.0 is the identity, whatever the widths. Raises
    ValueError if any scaled width collapses below ``multiple``.
    """
    if factor <= 0:
        raise ValueError(f"scale factor must be > 0, got {factor}")
    if multiple < 1:
        raise ValueError(f"channel multiple must be >= 1, got {multiple}")
    if factor == 1.0:
        return tuple(int(w) for w in widths)
    scaled = tuple(int(math.floor(w * factor / multiple)) * multiple for w in widths)
    if any(w < multiple for w in scaled):
        raise ValueError(
            f"backbone too narrow: widths {tuple(widths)} scaled by {factor} "
            f"fall below the channel multiple {multiple}"
        )
    return scaled


def conv_bn(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
    )


class SubBackbone(nn.Module):
    """Base class: stem + D stages, forward returns the D stage features.

    ``head`` is an optional task head attached for training; it is never
    counted as part of the backbone unless explicitly requested.
    """

    def __init__(self, spec: SubBackboneSpec):
        super().__init__()
        self.spec = spec
        self.head: nn.Module | None = None

    @property
    def depth(self) -> int:
        return self.spec.depth

    @property
    def stage_strides(self) -> tuple[int, ...]:
        """Total spatial reduction of each stage relative to the input."""
        return tuple(4 * 2**i for i in range(self.depth))

    @property
    def stage_channels(self) -> tuple[int, ...]:
        """Effective (width-scaled) output channels per stage."""
        return scale_channels(
            self.spec.stage_channels, self.spec.width_scale, self.spec.channel_multiple
        )

    def attach_head(self, head: nn.Module) -> None:
        self.head = head

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ToyConvBackbone(SubBackbone):
    """Small conv pyramid: stem (conv s2 + pool s2), then D double-conv stages.

    Stage 1 keeps the stem resolution; stages 2..D stride 2 at entry.
    """

    def __init__(self, spec: SubBackboneSpec):
        super().__init__(spec)
        chans = self.stage_channels
        self.stem = nn.Sequential(
            nn.Conv2d(spec.input_shape[0], chans[0], 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(chans[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        prev = chans[0]
        for i, ch in enumerate(chans):
            stride = 1 if i == 0 else 2
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, 3, stride=stride, padding=1, bias=False),
                    nn.BatchNorm2d(ch),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(ch, ch, 3, stride=1, padding=1, bias=False),
                    nn.BatchNorm2d(ch),
                    nn.ReLU(inplace=True),
                )
            )
            prev = ch
        self.stages = nn.ModuleList(stages)


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block with explicit mid/out widths."""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv_bn(in_ch, mid_ch, 1)
        self.conv2 = conv_bn(mid_ch, mid_ch, 3, stride=stride)
        self.conv3 = conv_bn(mid_ch, out_ch, 1)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.downsample = conv_bn(in_ch, out_ch, 1, stride=stride)
        else:
            self.downsample = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.conv1(x))
        out = self.relu(self.conv2(out))
        out = self.conv3(out)
        return self.relu(out + identity)


class ResNetBackbone(SubBackbone):
    """Bottleneck ResNet-50 layout (3, 4, 6, 3 blocks), width-scalable.

    At width_scale 1.0 this is the standard 4-stage ResNet-50 body; the
    stem width and per-stage bottleneck mid widths derive from the base
    widths by the same floor-to-multiple scaling rule as the outputs.
    """

    def __init__(self, spec: SubBackboneSpec):
        super().__init__(spec)
        out_chans = self.stage_channels
        base_mids = tuple(c // 4 for c in spec.stage_channels)
        mid_chans = scale_channels(base_mids, spec.width_scale, spec.channel_multiple)
        stem_ch = mid_chans[0]
        self.stem = nn.Sequential(
            nn.Conv2d(spec.input_shape[0], stem_ch, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(stem_ch),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        prev = stem_ch
        for i, (mid, out, blocks) in enumerate(zip(mid_chans, out_chans, RESNET50_BLOCK_COUNTS)):
            stride = 1 if i == 0 else 2
            blocks_mods = [Bottleneck(prev, mid, out, stride=stride)]
            blocks_mods += [Bottleneck(out, mid, out) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*blocks_mods))
            prev = out
        self.stages = nn.ModuleList(stages)


_FAMILIES = {"toy-conv": ToyConvBackbone, "resnet50": ResNetBackbone}


def build_sub_backbone(spec: SubBackboneSpec, seed: int) -> SubBackbone:
    """Construct a backbone with deterministic, seed-keyed initialization."""
    if spec.family not in _FAMILIES:
        raise ValueError(f"unknown backbone family '{spec.family}'")
    min_side = min(spec.input_shape[1], spec.input_shape[2])
    needed = 4 * 2 ** (spec.depth - 1)
    if min_side < needed:
        raise ValueError(
            f"input {spec.input_shape[1]}x{spec.input_shape[2]} too small for "
            f"{spec.depth} stages (needs >= {needed} pixels per side)"
        )
    torch.manual_seed(seed)
    return _FAMILIES[spec.family](spec)


def count_parameters(backbone: SubBackbone, include_head: bool = False) -> int:
    """Exact count of trainable parameter elements."""
    head_param_ids = set()
    if backbone.head is not None and not include_head:
        head_param_ids = {id(p) for p in backbone.head.parameters()}
    return sum(
        p.numel()
        for p in backbone.parameters()
        if p.requires_grad and id(p) not in head_param_ids
    )


def glorot_init_(module: nn.Module, seed: int | None = None) -> nn.Module:
    """Re-initialize conv/linear weights with Glorot-uniform (biases to zero)."""
    if seed is not None:
        torch.manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module
