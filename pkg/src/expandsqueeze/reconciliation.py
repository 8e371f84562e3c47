"""Cross-task feature links and the expanded multi-backbone.

Each link carries the raw stage-``j`` feature of one task's sub-backbone
into stage ``i`` of another task's, through a chain of transforms:

* ``reduce``   — stride-2 3x3 conv + norm + relu (halves the resolution)
* ``project``  — 1x1 conv + norm (maps to the receiving stage's width)
* ``upsample`` — nearest 2x upsample + 3x3 conv (doubles the resolution)

In the default shallow-to-deep topology a link from stage j to stage
i >= j applies (i - j) ``reduce`` steps and then one ``project``; the
deep-to-shallow topology (j >= i) uses ``upsample`` steps instead. The
``project`` conv is zero-initialized so that, at initialization, fusion is
exactly the identity and every task's forward equals its standalone
sub-backbone. All other link convs use Glorot-uniform init.

The receiving stage consumes the *fused* feature: fusion is an unweighted
sum of the stage's own output and every incoming link output. Link inputs
are detached, so no gradient ever reaches a donor sub-backbone from
another task's loss; the link weights themselves do train.

Shallow-to-deep fusion runs layer-synchronously in a single pass (donor
features come from the same fused pass). Deep-to-shallow would be cyclic
under that scheme, so there the donors contribute their fusion-free
features, computed in a first pass, and each task's own path is then
re-run with fusion feeding forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
from torch import nn

from .backbones import SubBackbone


class SpatialReduce(nn.Module):
    """Stride-2 3x3 conv + norm + relu; halves the spatial size."""

    kind = "reduce"

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ChannelProject(nn.Module):
    """Norm + 1x1 conv; preserves the spatial size, maps the channel count.

    The norm acts on the incoming donor feature and the conv comes last:
    with the conv zero-initialized the link output then ramps up smoothly
    with the weights instead of being renormalized to unit scale the
    moment they leave zero.
    """

    kind = "project"

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.norm = nn.BatchNorm2d(in_channels)
        self.conv = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.norm(x))


class SpatialUpsample(nn.Module):
    """Nearest-neighbor 2x upsample + 3x3 conv; doubles the spatial size."""

    kind = "upsample"

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class ReconciliationLink(nn.Module):
    """One cross-task, cross-layer transform chain.

    ``transforms`` are applied in order; the final one is always the
    zero-initialized channel projection.
    """

    def __init__(
        self,
        source_task: str,
        target_task: str,
        source_layer: int,
        target_layer: int,
        transforms: list[nn.Module],
    ):
        super().__init__()
        self.source_task = source_task
        self.target_task = target_task
        self.source_layer = source_layer
        self.target_layer = target_layer
        self.transforms = nn.ModuleList(transforms)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(t.kind for t in self.transforms)

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.source_task, self.target_task, self.source_layer, self.target_layer)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for t in self.transforms:
            x = t(x)
        return x

    def describe(self) -> str:
        chain = " -> ".join(self.kinds)
        return (
            f"{self.source_task}[stage {self.source_layer}] -> "
            f"{self.target_task}[stage {self.target_layer}]: {chain} "
            f"({self.transforms[0].in_channels} -> {self.transforms[-1].out_channels} ch)"
        )


@dataclass
class FusedFeatures:
    """Outputs of one expanded forward pass.

    ``fused[(task, stage)]`` is the stage output after adding every incoming
    link; ``plain[(task, stage)]`` is the raw stage output that link donors
    read (pre-fusion in the shallow-to-deep pass; the fusion-free pass for
    deep-to-shallow).
    """

    plain: dict[tuple[str, int], torch.Tensor] = field(default_factory=dict)
    fused: dict[tuple[str, int], torch.Tensor] = field(default_factory=dict)


class ExpandedBackbone(nn.Module):
    """All per-task sub-backbones joined by reconciliation links."""

    def __init__(
        self,
        sub_backbones: Mapping[str, SubBackbone],
        links: list[ReconciliationLink],
        topology: str,
        detach_at_link_inputs: bool = True,
    ):
        super().__init__()
        self.sub_backbones = nn.ModuleDict(dict(sub_backbones))
        self.links = nn.ModuleList(links)
        self.topology = topology
        self.detach_at_link_inputs = detach_at_link_inputs
        self._incoming: dict[tuple[str, int], list[ReconciliationLink]] = {}
        for link in links:
            self._incoming.setdefault((link.target_task, link.target_layer), []).append(link)

    @property
    def task_ids(self) -> list[str]:
        return list(self.sub_backbones.keys())

    @property
    def depth(self) -> int:
        return next(iter(self.sub_backbones.values())).depth

    def incoming_links(self, task: str, stage: int) -> list[ReconciliationLink]:
        return self._incoming.get((task, stage), [])

    def _donor_feature(self, plain: dict, link: ReconciliationLink) -> torch.Tensor:
        feat = plain[(link.source_task, link.source_layer)]
        return feat.detach() if self.detach_at_link_inputs else feat

    def forward(self, per_task_inputs: Mapping[str, torch.Tensor]) -> FusedFeatures:
        missing = [t for t in self.task_ids if t not in per_task_inputs]
        if missing:
            raise ValueError(f"missing input batch for tasks {missing}")
        out = FusedFeatures()
        depth = self.depth

        if self.topology == "deep-to-shallow":
            # pass 1: fusion-free features that donors contribute
            for t in self.task_ids:
                for i, feat in enumerate(self.sub_backbones[t](per_task_inputs[t]), start=1):
                    out.plain[(t, i)] = feat
            # pass 2: each task's own path with fusion feeding forward
            for t in self.task_ids:
                sub = self.sub_backbones[t]
                cur = sub.stem(per_task_inputs[t])
                for i in range(1, depth + 1):
                    own = sub.stages[i - 1](cur)
                    fused = own
                    for link in self.incoming_links(t, i):
                        fused = fused + link(self._donor_feature(out.plain, link))
                    out.fused[(t, i)] = fused
                    cur = fused
            return out

        # shallow-to-deep (and "none", which simply has no links):
        # layer-synchronous single pass, donors read the same pass
        cur = {t: self.sub_backbones[t].stem(per_task_inputs[t]) for t in self.task_ids}
        for i in range(1, depth + 1):
            for t in self.task_ids:
                out.plain[(t, i)] = self.sub_backbones[t].stages[i - 1](cur[t])
            for t in self.task_ids:
                fused = out.plain[(t, i)]
                for link in self.incoming_links(t, i):
                    fused = fused + link(self._donor_feature(out.plain, link))
                out.fused[(t, i)] = fused
                cur[t] = fused
        return out

    def describe(self) -> str:
        lines = [
            f"expanded backbone: {len(self.sub_backbones)} sub-backbones, "
            f"{len(self.links)} links, topology {self.topology}"
        ]
        lines += [f"  {link.describe()}" for link in self.links]
        return "\n".join(lines)


class FusedBranch(nn.Module):
    """View of one task's fused feature pyramid when every sub-backbone sees
    the same input image; lets an expanded model act like a plain backbone."""

    def __init__(self, expanded: ExpandedBackbone, task: str):
        super().__init__()
        self.expanded = expanded
        self.task = task

    @property
    def depth(self) -> int:
        return self.expanded.depth

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return self.expanded.sub_backbones[self.task].stage_channels

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = self.expanded({t: x for t in self.expanded.task_ids})
        return [feats.fused[(self.task, i)] for i in range(1, self.depth + 1)]


def build_reconciliation_graph(
    sub_backbones: Mapping[str, SubBackbone],
    topology: str = "shallow-to-deep",
    seed: int = 0,
    zero_init_projections: bool = True,
) -> ExpandedBackbone:
    """Join sub-backbones with the full link set for the given topology.

    Shallow-to-deep links every ordered task pair (k != t) for every stage
    pair j <= i; deep-to-shallow for every j >= i; "none" adds no links.
    Raises ValueError on incompatible sub-backbone geometry.
    """
    if topology not in ("shallow-to-deep", "deep-to-shallow", "none"):
        raise ValueError(f"unknown topology '{topology}'")
    tasks = list(sub_backbones.keys())
    depths = {t: sub_backbones[t].depth for t in tasks}
    if len(set(depths.values())) > 1:
        raise ValueError(f"sub-backbones disagree on stage count: {depths}")
    spatial = {t: tuple(sub_backbones[t].spec.input_shape[1:]) for t in tasks}
    if len(set(spatial.values())) > 1:
        raise ValueError(f"sub-backbones disagree on input size: {spatial}")
    depth = depths[tasks[0]]

    links: list[ReconciliationLink] = []
    if topology != "none":
        for k in tasks:
            for t in tasks:
                if k == t:
                    continue
                src_ch = sub_backbones[k].stage_channels
                dst_ch = sub_backbones[t].stage_channels
                for i in range(1, depth + 1):
                    stage_range = range(1, i + 1) if topology == "shallow-to-deep" else range(
                        i, depth + 1
                    )
                    for j in stage_range:
                        hops = abs(i - j)
                        width = src_ch[j - 1]
                        step = SpatialReduce if topology == "shallow-to-deep" else SpatialUpsample
                        transforms: list[nn.Module] = [step(width, width) for _ in range(hops)]
                        transforms.append(ChannelProject(width, dst_ch[i - 1]))
                        links.append(ReconciliationLink(k, t, j, i, transforms))

    torch.manual_seed(seed)
    for link in links:
        for module in link.transforms:
            nn.init.xavier_uniform_(module.conv.weight)
        if zero_init_projections:
            nn.init.zeros_(link.transforms[-1].conv.weight)
    return ExpandedBackbone(sub_backbones, links, topology)


def fused_forward(
    expanded: ExpandedBackbone, per_task_inputs: Mapping[str, torch.Tensor]
) -> dict[tuple[str, int], torch.Tensor]:
    """Fused features for every (task, stage); see ExpandedBackbone.forward."""
    return expanded(per_task_inputs).fused


@dataclass
class IsolationViolation:
    loss_task: str
    parameter_owner: str
    max_abs_gradient: float


@dataclass
class IsolationReport:
    """Cross-task gradient audit of an expanded backbone."""

    violations: list[IsolationViolation] = field(default_factory=list)
    sub_backbone_grad_max: dict[tuple[str, str], float] = field(default_factory=dict)
    link_grad_max: dict[tuple[str, tuple], float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "gradient isolation holds (no cross-task leakage)"
        lines = [f"gradient isolation violated ({len(self.violations)} cases):"]
        lines += [
            f"  loss of '{v.loss_task}' reaches '{v.parameter_owner}' "
            f"(max |grad| = {v.max_abs_gradient:.3e})"
            for v in self.violations
        ]
        return "\n".join(lines)


def gradient_isolation_check(
    expanded: ExpandedBackbone,
    per_task_inputs: Mapping[str, torch.Tensor],
    loss_fns: Mapping[str, Callable[[dict[tuple[str, int], torch.Tensor]], torch.Tensor]],
) -> IsolationReport:
    """Verify that each task's loss sends zero gradient into other tasks'
    sub-backbones while reconciliation links do receive gradient."""
    report = IsolationReport()
    for loss_task, loss_fn in loss_fns.items():
        feats = expanded(per_task_inputs)
        loss = loss_fn(feats.fused)
        for owner, sub in expanded.sub_backbones.items():
            params = [p for p in sub.parameters() if p.requires_grad]
            grads = torch.autograd.grad(
                loss, params, retain_graph=True, allow_unused=True
            )
            max_abs = max(
                (float(g.abs().max()) for g in grads if g is not None), default=0.0
            )
            report.sub_backbone_grad_max[(loss_task, owner)] = max_abs
            if owner != loss_task and max_abs != 0.0:
                report.violations.append(IsolationViolation(loss_task, owner, max_abs))
        for link in expanded.links:
            params = [p for p in link.parameters() if p.requires_grad]
            grads = torch.autograd.grad(
                loss, params, retain_graph=True, allow_unused=True
            )
            max_abs = max(
                (float(g.abs().max()) for g in grads if g is not None), default=0.0
            )
            report.link_grad_max[(loss_task, link.key)] = max_abs
    return report
