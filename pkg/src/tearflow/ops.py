"""Deterministic NCHW tensor operators and their vector-Jacobian products.

Every function is pure: no hidden state, and identical inputs yield
bit-identical outputs (numpy reductions use a fixed evaluation order).
The model path runs in float32; float64 inputs propagate unchanged so
that gradient checks can run in double precision.

Convolution uses im2col plus one batched matrix multiply, which is the
cache-friendly route at 512x512. Padding is always zero padding and
bilinear resampling uses the align-corners=false convention throughout:
``src = (dst + 0.5) * in/out - 0.5`` clamped to the valid range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvParams",
    "BatchNormParams",
    "BatchStats",
    "conv2d",
    "conv2d_vjp",
    "batchnorm_infer",
    "batchnorm_train",
    "batchnorm_vjp",
    "relu",
    "relu_vjp",
    "adaptive_avg_pool",
    "adaptive_avg_pool_vjp",
    "bilinear_resize",
    "bilinear_upsample",
    "bilinear_upsample_vjp",
    "concat_channels",
    "concat_channels_vjp",
    "softmax_channels",
]


@dataclass(frozen=True)
class ConvParams:
    """Weights of a single 2-d convolution.

    ``weight`` has shape (out_ch, in_ch_per_group, k, k) with k odd;
    ``bias`` is either an (out_ch,) vector or None for bias-free convs.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"conv weight must be (oc, cpg, k, k), got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError("stride >= 1, padding >= 0, groups >= 1 required")
        if w.shape[0] % self.groups != 0:
            raise ValueError(
                f"out channels {w.shape[0]} not divisible by groups {self.groups}"
            )
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {w.shape[0]} out channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def param_count(self) -> int:
        n = self.weight.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass(frozen=True)
class BatchNormParams:
    """Per-channel batch normalization state.

    gamma/beta are learnable; running_mean/running_var are statistics
    buffers updated in place by :func:`batchnorm_train`.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ValueError(f"{name} must have shape ({c},)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class BatchStats:
    """Batch mean/variance captured by a train-mode batchnorm pass."""

    mean: np.ndarray
    var: np.ndarray


def _check_nchw(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 NCHW, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    """Spatial output size of a convolution, floor semantics."""
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel {k} with padding {padding} does not fit input of size {size}"
        )
    return out


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Unfold x into (n, c, k, k, oh, ow) patch view via k*k strided copies."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    if padding > 0:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ]
    return cols, oh, ow


def _check_conv_compat(x: np.ndarray, p: ConvParams) -> None:
    _check_nchw(x)
    if x.shape[1] != p.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, conv expects {p.in_channels} "
            f"({p.groups} groups of {p.weight.shape[1]})"
        )


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation with zero padding.

    Output spatial size is floor((h + 2*pad - k)/stride) + 1 per axis and
    must be positive.
    """
    _check_conv_compat(x, p)
    n, c, h, w = x.shape
    oc = p.out_channels
    k = p.kernel_size
    g = p.groups
    cpg = p.weight.shape[1]

    cols, oh, ow = _im2col(x, k, p.stride, p.padding)
    # (n, g, cpg*k*k, oh*ow) against (g, oc/g, cpg*k*k)
    cols = cols.reshape(n, g, cpg * k * k, oh * ow)
    wm = p.weight.reshape(g, oc // g, cpg * k * k)
    out = np.matmul(wm, cols).reshape(n, oc, oh, ow)
    if p.bias is not None:
        out += p.bias.reshape(1, oc, 1, 1)
    return out


def conv2d_vjp(x: np.ndarray, p: ConvParams, upstream: np.ndarray):
    """Gradients of conv2d w.r.t. input, weight and bias.

    Returns (grad_x, grad_weight, grad_bias); grad_bias is None for
    bias-free convolutions.
    """
    _check_conv_compat(x, p)
    n, c, h, w = x.shape
    oc = p.out_channels
    k = p.kernel_size
    g = p.groups
    cpg = p.weight.shape[1]
    s = p.stride
    pad = p.padding

    cols, oh, ow = _im2col(x, k, s, pad)
    if upstream.shape != (n, oc, oh, ow):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match conv output "
            f"{(n, oc, oh, ow)}"
        )

    gb = upstream.sum(axis=(0, 2, 3)) if p.bias is not None else None

    gr = upstream.reshape(n, g, oc // g, oh * ow)
    cols = cols.reshape(n, g, cpg * k * k, oh * ow)
    gw = np.matmul(gr, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    gw = gw.reshape(oc, cpg, k, k)

    wm = p.weight.reshape(g, oc // g, cpg * k * k)
    gcols = np.matmul(wm.transpose(0, 2, 1), gr)
    gcols = gcols.reshape(n, c, k, k, oh, ow)

    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=upstream.dtype)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += gcols[:, :, ki, kj]
    gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad > 0 else gxp
    return np.ascontiguousarray(gx), gw, gb


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _check_bn_compat(x: np.ndarray, bn: BatchNormParams) -> None:
    _check_nchw(x)
    if x.shape[1] != bn.channels:
        raise ValueError(f"input has {x.shape[1]} channels, bn expects {bn.channels}")


def batchnorm_infer(x: np.ndarray, bn: BatchNormParams) -> np.ndarray:
    """Per-channel (x - mean) * gamma / sqrt(var + eps) + beta with running stats."""
    _check_bn_compat(x, bn)
    scale = bn.gamma / np.sqrt(bn.running_var + np.asarray(bn.eps, dtype=x.dtype))
    shift = bn.beta - bn.running_mean * scale
    return x * scale.reshape(1, -1, 1, 1).astype(x.dtype) + shift.reshape(
        1, -1, 1, 1
    ).astype(x.dtype)


def batchnorm_train(
    x: np.ndarray,
    bn: BatchNormParams,
    momentum: float = 0.1,
    update_running: bool = True,
):
    """Normalize with batch statistics (biased variance).

    Running stats are blended in place as
    ``running = (1 - momentum) * running + momentum * batch`` unless
    ``update_running`` is False (pure evaluation, used by check harnesses).
    Returns (output, BatchStats).
    """
    _check_bn_compat(x, bn)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = bn.gamma / np.sqrt(var + np.asarray(bn.eps, dtype=x.dtype))
    y = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1) + bn.beta.reshape(
        1, -1, 1, 1
    )
    if update_running:
        bn.running_mean[...] = (1.0 - momentum) * bn.running_mean + momentum * mean
        bn.running_var[...] = (1.0 - momentum) * bn.running_var + momentum * var
    return y, BatchStats(mean=mean, var=var)


def batchnorm_vjp(
    x: np.ndarray, bn: BatchNormParams, stats: BatchStats, upstream: np.ndarray
):
    """Gradients of the train-form (batch-statistics) normalization.

    Returns (grad_x, grad_gamma, grad_beta). grad_x accounts for the
    dependence of the batch mean/variance on x.
    """
    _check_bn_compat(x, bn)
    if upstream.shape != x.shape:
        raise ValueError("upstream shape must match input shape")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    inv_std = 1.0 / np.sqrt(stats.var + np.asarray(bn.eps, dtype=x.dtype))
    xhat = (x - stats.mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)

    g_beta = upstream.sum(axis=(0, 2, 3))
    g_gamma = (upstream * xhat).sum(axis=(0, 2, 3))
    coeff = (bn.gamma * inv_std).reshape(1, -1, 1, 1)
    gx = coeff * (
        upstream
        - (g_beta / m).reshape(1, -1, 1, 1)
        - xhat * (g_gamma / m).reshape(1, -1, 1, 1)
    )
    return gx, g_gamma, g_beta


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_vjp(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gate upstream by x > 0 (subgradient 0 at exactly 0)."""
    return np.where(x > 0, upstream, 0)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_bounds(in_size: int, out_size: int, i: int):
    lo = (i * in_size) // out_size
    hi = -((-(i + 1) * in_size) // out_size)  # ceil((i+1)*in/out)
    return lo, hi


def adaptive_avg_pool(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Mean over the window [floor(i*h/oh), ceil((i+1)*h/oh)) per output cell."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if out_h > h or out_w > w:
        raise ValueError(f"output {out_h}x{out_w} exceeds input {h}x{w}")
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    for i in range(out_h):
        r0, r1 = _pool_bounds(h, out_h, i)
        for j in range(out_w):
            c0, c1 = _pool_bounds(w, out_w, j)
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return out


def adaptive_avg_pool_vjp(
    x_shape: tuple, out_h: int, out_w: int, upstream: np.ndarray
) -> np.ndarray:
    """Distribute each output-cell gradient uniformly over its input window."""
    n, c, h, w = x_shape
    gx = np.zeros(x_shape, dtype=upstream.dtype)
    for i in range(out_h):
        r0, r1 = _pool_bounds(h, out_h, i)
        for j in range(out_w):
            c0, c1 = _pool_bounds(w, out_w, j)
            area = (r1 - r0) * (c1 - c0)
            gx[:, :, r0:r1, c0:c1] += (upstream[:, :, i, j] / area)[:, :, None, None]
    return gx


# ---------------------------------------------------------------------------
# bilinear resampling
# ---------------------------------------------------------------------------

def _resize_axis_coeffs(in_size: int, out_size: int, dtype):
    scale = in_size / out_size
    dst = np.arange(out_size, dtype=np.float64)
    src = np.clip((dst + 0.5) * scale - 0.5, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, frac


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear sampling to an arbitrary size (align-corners=false).

    Unlike :func:`bilinear_upsample` this also permits shrinking; it is
    the resize used when cropping frames for the segmenter.
    """
    _check_nchw(x)
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    i0, i1, fi = _resize_axis_coeffs(h, out_h, x.dtype)
    j0, j1, fj = _resize_axis_coeffs(w, out_w, x.dtype)
    rows = x[:, :, i0, :] * (1 - fi)[None, None, :, None] + x[:, :, i1, :] * fi[
        None, None, :, None
    ]
    out = rows[:, :, :, j0] * (1 - fj)[None, None, None, :] + rows[:, :, :, j1] * fj[
        None, None, None, :
    ]
    return out


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling; output must be at least as large as the input."""
    _check_nchw(x)
    if out_h < x.shape[2] or out_w < x.shape[3]:
        raise ValueError(
            f"upsample target {out_h}x{out_w} smaller than input "
            f"{x.shape[2]}x{x.shape[3]}"
        )
    return bilinear_resize(x, out_h, out_w)


def bilinear_upsample_vjp(
    x_shape: tuple, out_h: int, out_w: int, upstream: np.ndarray
) -> np.ndarray:
    """Adjoint of bilinear_upsample: scatter-add through the interpolation taps."""
    n, c, h, w = x_shape
    dt = upstream.dtype
    i0, i1, fi = _resize_axis_coeffs(h, out_h, dt)
    j0, j1, fj = _resize_axis_coeffs(w, out_w, dt)

    g_rows = np.zeros((n, c, out_h, w), dtype=dt)
    np.add.at(g_rows, (slice(None), slice(None), slice(None), j0),
              upstream * (1 - fj)[None, None, None, :])
    np.add.at(g_rows, (slice(None), slice(None), slice(None), j1),
              upstream * fj[None, None, None, :])

    gx = np.zeros(x_shape, dtype=dt)
    np.add.at(gx, (slice(None), slice(None), i0, slice(None)),
              g_rows * (1 - fi)[None, None, :, None])
    np.add.at(gx, (slice(None), slice(None), i1, slice(None)),
              g_rows * fi[None, None, :, None])
    return gx


# ---------------------------------------------------------------------------
# channel concat / softmax
# ---------------------------------------------------------------------------

def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    """Stack tensors along the channel axis, in argument order."""
    if not xs:
        raise ValueError("need at least one tensor")
    ref = xs[0]
    for x in xs:
        _check_nchw(x)
        if x.shape[0] != ref.shape[0] or x.shape[2:] != ref.shape[2:]:
            raise ValueError(
                f"spatial/batch mismatch: {x.shape} vs {ref.shape}"
            )
    return np.concatenate(xs, axis=1)


def concat_channels_vjp(channel_counts: list[int], upstream: np.ndarray):
    """Split the upstream gradient back into per-input channel ranges."""
    if upstream.shape[1] != sum(channel_counts):
        raise ValueError("upstream channels do not match concatenated inputs")
    grads = []
    off = 0
    for c in channel_counts:
        grads.append(upstream[:, off : off + c])
        off += c
    return grads


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    _check_nchw(x)
    if x.shape[1] < 2:
        raise ValueError("softmax needs at least 2 channels")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
