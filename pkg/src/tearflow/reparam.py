"""Multi-branch convolution blocks and their collapse into a single conv.

A train-form block runs K parallel conv+BN branches of the block's
kernel size, an optional 1x1 "scale" conv+BN branch (3x3 blocks only)
and an optional identity BN branch (stride 1, equal channel counts).
Branch outputs are summed before the activation. Fusing folds each BN
into its conv, lifts 1x1 and identity branches to the block kernel
size, and adds everything up into one convolution that computes the
same function.

Folding arithmetic runs in float64 and is cast back to the block dtype
so fused and train numerics stay aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import (
    BatchNormParams,
    ConvParams,
    batchnorm_infer,
    conv2d,
    relu,
)

__all__ = [
    "MobileOneBlock",
    "FusedConv",
    "fold_bn",
    "pad_1x1_to_3x3",
    "identity_to_conv",
    "fuse_block",
    "block_forward",
    "make_block",
]


@dataclass
class MobileOneBlock:
    """Train-form block: K conv branches + optional scale and identity branches."""

    branches: list[tuple[ConvParams, BatchNormParams]]
    scale: tuple[ConvParams, BatchNormParams] | None
    identity: BatchNormParams | None
    activation: bool = True

    def __post_init__(self):
        if not self.branches:
            raise ValueError("block needs at least one conv branch")
        ref = self.branches[0][0]
        for conv, bn in self.branches:
            if (
                conv.kernel_size != ref.kernel_size
                or conv.stride != ref.stride
                or conv.groups != ref.groups
                or conv.weight.shape != ref.weight.shape
            ):
                raise ValueError("conv branches must share shape/stride/groups")
            if bn.channels != conv.out_channels:
                raise ValueError("branch BN channel mismatch")
        if self.scale is not None:
            sconv, sbn = self.scale
            if ref.kernel_size == 1:
                raise ValueError("scale branch only valid on k>1 blocks")
            if sconv.kernel_size != 1:
                raise ValueError("scale branch must be a 1x1 conv")
            if (
                sconv.stride != ref.stride
                or sconv.groups != ref.groups
                or sconv.out_channels != ref.out_channels
                or sconv.in_channels != ref.in_channels
            ):
                raise ValueError("scale branch must match block stride/groups/channels")
            if sbn.channels != ref.out_channels:
                raise ValueError("scale BN channel mismatch")
        if self.identity is not None:
            if ref.stride != 1 or ref.in_channels != ref.out_channels:
                raise ValueError(
                    "identity branch requires stride 1 and equal in/out channels"
                )
            if self.identity.channels != ref.out_channels:
                raise ValueError("identity BN channel mismatch")

    @property
    def kernel_size(self) -> int:
        return self.branches[0][0].kernel_size

    @property
    def stride(self) -> int:
        return self.branches[0][0].stride

    @property
    def groups(self) -> int:
        return self.branches[0][0].groups

    @property
    def in_channels(self) -> int:
        return self.branches[0][0].in_channels

    @property
    def out_channels(self) -> int:
        return self.branches[0][0].out_channels

    def param_count(self) -> int:
        """Learnable scalars: conv weights/biases plus BN gamma and beta."""
        n = 0
        for conv, bn in self.branches:
            n += conv.param_count() + 2 * bn.channels
        if self.scale is not None:
            n += self.scale[0].param_count() + 2 * self.scale[1].channels
        if self.identity is not None:
            n += 2 * self.identity.channels
        return n


@dataclass
class FusedConv:
    """Inference-form block: one convolution plus the activation flag."""

    conv: ConvParams
    activation: bool = True

    def param_count(self) -> int:
        return self.conv.param_count()


def fold_bn(conv: ConvParams, bn: BatchNormParams) -> ConvParams:
    """Fold a batchnorm into the preceding convolution.

    w' = w * gamma / sqrt(var + eps) per output channel and
    b' = beta + (b - mean) * gamma / sqrt(var + eps).
    """
    if bn.channels != conv.out_channels:
        raise ValueError(
            f"bn has {bn.channels} channels, conv produces {conv.out_channels}"
        )
    dtype = conv.weight.dtype
    scale = bn.gamma.astype(np.float64) / np.sqrt(
        bn.running_var.astype(np.float64) + bn.eps
    )
    w = conv.weight.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    b = np.zeros(conv.out_channels) if conv.bias is None else conv.bias.astype(np.float64)
    b = bn.beta.astype(np.float64) + (b - bn.running_mean.astype(np.float64)) * scale
    return ConvParams(
        weight=w.astype(dtype),
        bias=b.astype(dtype),
        stride=conv.stride,
        padding=conv.padding,
        groups=conv.groups,
    )


def pad_1x1_to_3x3(conv: ConvParams) -> ConvParams:
    """Embed a 1x1 kernel at the center of a zero 3x3 kernel.

    The returned conv uses padding + 1, which keeps the computed
    function identical.
    """
    if conv.kernel_size != 1:
        raise ValueError(f"expected a 1x1 conv, got k={conv.kernel_size}")
    oc, cpg = conv.weight.shape[:2]
    w = np.zeros((oc, cpg, 3, 3), dtype=conv.weight.dtype)
    w[:, :, 1, 1] = conv.weight[:, :, 0, 0]
    return ConvParams(
        weight=w,
        bias=conv.bias,
        stride=conv.stride,
        padding=conv.padding + 1,
        groups=conv.groups,
    )


def identity_to_conv(
    channels: int, groups: int, kernel_size: int = 3, dtype=np.float32
) -> ConvParams:
    """Grouped kernel whose forward pass reproduces its input exactly."""
    if channels % groups != 0:
        raise ValueError(f"{channels} channels not divisible by {groups} groups")
    cpg = channels // groups
    mid = kernel_size // 2
    w = np.zeros((channels, cpg, kernel_size, kernel_size), dtype=dtype)
    for i in range(channels):
        w[i, i % cpg, mid, mid] = 1.0
    return ConvParams(weight=w, stride=1, padding=mid, groups=groups)


def fuse_block(block: MobileOneBlock) -> FusedConv:
    """Collapse all branches into one convolution of the block kernel size.

    A 3x3 block absorbs its 1x1 scale branch (lifted to 3x3) and its
    identity branch; a 1x1 block fuses to a single 1x1 conv. For every
    input the fused forward matches the train forward within 1e-4
    max-abs.
    """
    k = block.kernel_size
    ref = block.branches[0][0]
    dtype = ref.weight.dtype

    folded = [fold_bn(conv, bn) for conv, bn in block.branches]
    w = np.zeros(folded[0].weight.shape, dtype=np.float64)
    b = np.zeros(block.out_channels, dtype=np.float64)
    for f in folded:
        w += f.weight.astype(np.float64)
        b += f.bias.astype(np.float64)
    padding = folded[0].padding

    if block.scale is not None:
        f = fold_bn(*block.scale)
        if k == 3:
            f = pad_1x1_to_3x3(f)
        w += f.weight.astype(np.float64)
        b += f.bias.astype(np.float64)

    if block.identity is not None:
        ident = identity_to_conv(
            block.out_channels, block.groups, kernel_size=k, dtype=dtype
        )
        f = fold_bn(ident, block.identity)
        w += f.weight.astype(np.float64)
        b += f.bias.astype(np.float64)

    fused = ConvParams(
        weight=w.astype(dtype),
        bias=b.astype(dtype),
        stride=block.stride,
        padding=padding,
        groups=block.groups,
    )
    return FusedConv(conv=fused, activation=block.activation)


def block_forward(block: MobileOneBlock | FusedConv, x: np.ndarray) -> np.ndarray:
    """Inference forward pass for either block form (BN uses running stats)."""
    if isinstance(block, FusedConv):
        y = conv2d(x, block.conv)
        return relu(y) if block.activation else y

    y = None
    for conv, bn in block.branches:
        out = batchnorm_infer(conv2d(x, conv), bn)
        y = out if y is None else y + out
    if block.scale is not None:
        y = y + batchnorm_infer(conv2d(x, block.scale[0]), block.scale[1])
    if block.identity is not None:
        y = y + batchnorm_infer(x, block.identity)
    return relu(y) if block.activation else y


def make_block(
    rng: np.random.Generator,
    in_ch: int,
    out_ch: int,
    kernel_size: int = 3,
    stride: int = 1,
    groups: int = 1,
    num_branches: int = 1,
    use_scale: bool | None = None,
    use_identity: bool = True,
    activation: bool = True,
    dtype=np.float32,
) -> MobileOneBlock:
    """Construct a randomly initialized train-form block.

    Weights are fan-in-scaled uniform; BN starts neutral. The scale
    branch defaults to present on 3x3 blocks and the identity branch is
    included whenever stride is 1 and channel counts match (unless
    disabled).
    """
    if in_ch % groups != 0 or out_ch % groups != 0:
        raise ValueError("channels must be divisible by groups")
    cpg = in_ch // groups

    def rand_conv(k: int) -> ConvParams:
        fan_in = cpg * k * k
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(out_ch, cpg, k, k)).astype(dtype)
        return ConvParams(
            weight=w, stride=stride, padding=k // 2, groups=groups
        )

    def neutral_bn() -> BatchNormParams:
        return BatchNormParams(
            gamma=np.ones(out_ch, dtype=dtype),
            beta=np.zeros(out_ch, dtype=dtype),
            running_mean=np.zeros(out_ch, dtype=dtype),
            running_var=np.ones(out_ch, dtype=dtype),
        )

    branches = [(rand_conv(kernel_size), neutral_bn()) for _ in range(num_branches)]
    if use_scale is None:
        use_scale = kernel_size > 1
    scale = (rand_conv(1), neutral_bn()) if use_scale else None
    identity = (
        neutral_bn() if use_identity and stride == 1 and in_ch == out_ch else None
    )
    return MobileOneBlock(
        branches=branches, scale=scale, identity=identity, activation=activation
    )
