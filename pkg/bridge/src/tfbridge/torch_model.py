"""Torch source model mirroring the engine's architecture.

Used to produce checkpoints and golden logits for parity testing. The
layer structure, resampling conventions (bilinear, align_corners=False)
and pooling-scale clamping follow the engine exactly so that exported
weights compute the same function.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

__all__ = ["TorchTFNet", "build_torch_model", "build_name_mapping", "randomize_"]


class _ConvBN(nn.Module):
    def __init__(self, in_ch, out_ch, k, stride=1, groups=1):
        super().__init__()
        self.conv = nn.Conv2d(
            in_ch, out_ch, k, stride=stride, padding=k // 2, groups=groups, bias=False
        )
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return self.bn(self.conv(x))


class _Block(nn.Module):
    """Multi-branch train-form block: K conv+BN, optional scale and identity."""

    def __init__(self, in_ch, out_ch, k, stride, groups, num_branches, use_identity):
        super().__init__()
        self.branches = nn.ModuleList(
            _ConvBN(in_ch, out_ch, k, stride, groups) for _ in range(num_branches)
        )
        self.scale = _ConvBN(in_ch, out_ch, 1, stride, groups) if k > 1 else None
        self.idbn = (
            nn.BatchNorm2d(out_ch)
            if use_identity and stride == 1 and in_ch == out_ch
            else None
        )

    def forward(self, x):
        y = None
        for branch in self.branches:
            out = branch(x)
            y = out if y is None else y + out
        if self.scale is not None:
            y = y + self.scale(x)
        if self.idbn is not None:
            y = y + self.idbn(x)
        return F.relu(y)


class _Unit(nn.Module):
    def __init__(self, in_ch, out_ch, stride, num_branches, use_identity):
        super().__init__()
        self.dw = _Block(in_ch, in_ch, 3, stride, in_ch, num_branches, use_identity)
        self.pw = _Block(in_ch, out_ch, 1, 1, 1, num_branches, use_identity)

    def forward(self, x):
        return self.pw(self.dw(x))


class TorchTFNet(nn.Module):
    def __init__(self, config: dict):
        super().__init__()
        self.cfg = dict(config)
        w = list(config["stage_widths"])
        reps = list(config["stage_repetitions"])
        K = config.get("num_branches", 1)
        use_id = config.get("use_identity_branch", True)
        in_ch = config.get("in_channels", 3)
        classes = config.get("num_classes", 2)
        self.ppm_scales = list(config.get("ppm_scales", (1, 2, 3, 6)))
        self.ppm_enabled = config.get("ppm_enabled", True)
        self.skips_enabled = config.get("skips_enabled", True)

        self.stem = _Block(in_ch, w[0], 3, 2, 1, K, use_id)
        stages = []
        ch = w[0]
        for reps_s, out_ch in zip(reps, w[1:]):
            units = []
            for u in range(reps_s):
                units.append(_Unit(ch, out_ch, 2 if u == 0 else 1, K, use_id))
                ch = out_ch
            stages.append(nn.ModuleList(units))
        self.stages = nn.ModuleList(stages)

        if self.ppm_enabled:
            deep_w = w[4]
            proj_w = max(1, deep_w // 4)
            self.ppm_branches = nn.ModuleList(
                nn.Conv2d(deep_w, proj_w, 1, bias=True) for _ in self.ppm_scales
            )
            merge_in = deep_w + proj_w * len(self.ppm_scales)
            self.ppm_merge = _ConvBN(merge_in, deep_w, 3)
        else:
            self.ppm_branches = None
            self.ppm_merge = None

        decs = []
        prev = w[4]
        for skip_w in (w[3], w[2], w[1], w[0]):
            dec_in = prev + skip_w if self.skips_enabled else prev
            decs.append(_ConvBN(dec_in, skip_w, 3))
            prev = skip_w
        self.decs = nn.ModuleList(decs)
        self.head = nn.Conv2d(w[0], classes, 1, bias=True)

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        s = self.stem(x)
        skips = [s]
        out = s
        for stage in self.stages:
            for unit in stage:
                out = unit(out)
            skips.append(out)
        deep = skips.pop()

        if self.ppm_enabled:
            dh, dw = deep.shape[2], deep.shape[3]
            outs = [deep]
            for conv, scale in zip(self.ppm_branches, self.ppm_scales):
                pooled = F.adaptive_avg_pool2d(deep, (min(scale, dh), min(scale, dw)))
                projected = F.relu(conv(pooled))
                outs.append(
                    F.interpolate(
                        projected, size=(dh, dw), mode="bilinear", align_corners=False
                    )
                )
            deep = F.relu(self.ppm_merge(torch.cat(outs, dim=1)))

        d = deep
        for i, dec in enumerate(self.decs):
            skip = skips[len(skips) - 1 - i]
            up = F.interpolate(
                d, size=skip.shape[2:], mode="bilinear", align_corners=False
            )
            d = torch.cat([up, skip], dim=1) if self.skips_enabled else up
            d = F.relu(dec(d))

        d = F.interpolate(d, size=(h, w), mode="bilinear", align_corners=False)
        return self.head(d)


def build_torch_model(config: dict) -> TorchTFNet:
    return TorchTFNet(config)


def _bn_entries(torch_prefix: str, container_prefix: str):
    return [
        (f"{torch_prefix}.weight", f"{container_prefix}.gamma"),
        (f"{torch_prefix}.bias", f"{container_prefix}.beta"),
        (f"{torch_prefix}.running_mean", f"{container_prefix}.mean"),
        (f"{torch_prefix}.running_var", f"{container_prefix}.var"),
    ]


def _block_entries(torch_prefix: str, container_prefix: str, block: _Block):
    entries = []
    for i in range(len(block.branches)):
        entries.append(
            (
                f"{torch_prefix}.branches.{i}.conv.weight",
                f"{container_prefix}.branch{i}.conv.w",
            )
        )
        entries.extend(
            _bn_entries(
                f"{torch_prefix}.branches.{i}.bn", f"{container_prefix}.branch{i}.bn"
            )
        )
    if block.scale is not None:
        entries.append(
            (f"{torch_prefix}.scale.conv.weight", f"{container_prefix}.scale.conv.w")
        )
        entries.extend(
            _bn_entries(f"{torch_prefix}.scale.bn", f"{container_prefix}.scale.bn")
        )
    if block.idbn is not None:
        entries.extend(
            _bn_entries(f"{torch_prefix}.idbn", f"{container_prefix}.id.bn")
        )
    return entries


def build_name_mapping(model: TorchTFNet) -> dict[str, str]:
    """Torch state-dict key -> container tensor name, total over both sets."""
    entries = _block_entries("stem", "stem", model.stem)
    for s, stage in enumerate(model.stages, start=1):
        for u, unit in enumerate(stage):
            entries.extend(
                _block_entries(f"stages.{s - 1}.{u}.dw", f"enc{s}.u{u}.dw", unit.dw)
            )
            entries.extend(
                _block_entries(f"stages.{s - 1}.{u}.pw", f"enc{s}.u{u}.pw", unit.pw)
            )
    if model.ppm_enabled:
        for i in range(len(model.ppm_branches)):
            entries.append((f"ppm_branches.{i}.weight", f"ppm.b{i}.conv.w"))
            entries.append((f"ppm_branches.{i}.bias", f"ppm.b{i}.conv.b"))
        entries.append(("ppm_merge.conv.weight", "ppm.merge.conv.w"))
        entries.extend(_bn_entries("ppm_merge.bn", "ppm.merge.bn"))
    for i in range(len(model.decs)):
        entries.append((f"decs.{i}.conv.weight", f"dec{i}.conv.w"))
        entries.extend(_bn_entries(f"decs.{i}.bn", f"dec{i}.bn"))
    entries.append(("head.weight", "head.conv.w"))
    entries.append(("head.bias", "head.conv.b"))
    return dict(entries)


def randomize_(model: TorchTFNet, seed: int = 0) -> TorchTFNet:
    """Give every parameter and BN statistic a non-trivial random value."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels // module.groups * module.kernel_size[0] ** 2
                bound = 1.0 / fan_in**0.5
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-0.1, 0.1, generator=gen)
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.uniform_(0.7, 1.3, generator=gen)
                module.bias.uniform_(-0.3, 0.3, generator=gen)
                module.running_mean.uniform_(-0.2, 0.2, generator=gen)
                module.running_var.uniform_(0.5, 1.5, generator=gen)
    return model
