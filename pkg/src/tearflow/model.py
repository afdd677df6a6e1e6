"""Segmentation network: branch-rich encoder, pyramid pooling, skip decoder.

The encoder is a stack of depthwise/pointwise block units with stage
repetitions (2, 3, 4, 3); the stem and the first unit of every stage
downsample by 2, so the deepest features sit at stride 32. Pyramid
pooling aggregates context at scales (1, 2, 3, 6) (clamped to the
feature size so small inputs remain legal), and the decoder climbs back
up through the stride-16/8/4/2 skip features before a final upsample and
a 1x1 classification head.

Models are immutable after build/fuse apart from in-place parameter
updates during training; forward passes keep all scratch state local,
so concurrent inference is safe.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .ops import BatchNormParams, ConvParams
from .reparam import MobileOneBlock, block_forward, fold_bn, fuse_block, make_block

__all__ = [
    "TFNetConfig",
    "TFNet",
    "variant_config",
    "build",
    "forward",
    "fuse_model",
    "param_count",
    "predict_mask",
]

VARIANT_WIDTHS = {
    "mini0": (16, 32, 64, 128, 256),
    "mini1": (24, 48, 96, 192, 384),
    "mini2": (32, 64, 128, 256, 512),
    "mini3": (40, 80, 160, 320, 640),
    "mini4": (48, 96, 192, 384, 768),
}


@dataclass(frozen=True)
class TFNetConfig:
    """Declarative architecture description."""

    variant: str = "mini0"
    stage_repetitions: tuple[int, ...] = (2, 3, 4, 3)
    stage_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    ppm_scales: tuple[int, ...] = (1, 2, 3, 6)
    ppm_enabled: bool = True
    skips_enabled: bool = True
    num_branches: int = 1
    num_classes: int = 2
    input_size: int = 512
    in_channels: int = 3
    use_identity_branch: bool = True
    bn_momentum: float = 0.1

    def __post_init__(self):
        if len(self.stage_repetitions) != 4 or any(
            r < 1 for r in self.stage_repetitions
        ):
            raise ValueError("stage_repetitions must be 4 positive integers")
        if len(self.stage_widths) != 5 or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage_widths must be 5 positive integers")
        if not self.ppm_scales or list(self.ppm_scales) != sorted(
            set(self.ppm_scales)
        ):
            raise ValueError("ppm_scales must be strictly ascending")
        if any(s < 1 for s in self.ppm_scales):
            raise ValueError("ppm_scales must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.num_branches < 1:
            raise ValueError("num_branches must be at least 1")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "stage_repetitions": list(self.stage_repetitions),
            "stage_widths": list(self.stage_widths),
            "ppm_scales": list(self.ppm_scales),
            "ppm_enabled": self.ppm_enabled,
            "skips_enabled": self.skips_enabled,
            "num_branches": self.num_branches,
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "use_identity_branch": self.use_identity_branch,
            "bn_momentum": self.bn_momentum,
        }

    @staticmethod
    def from_dict(d: dict) -> "TFNetConfig":
        d = dict(d)
        for key in ("stage_repetitions", "stage_widths", "ppm_scales"):
            if key in d:
                d[key] = tuple(d[key])
        return TFNetConfig(**d)


def variant_config(variant: str, **overrides) -> TFNetConfig:
    """Config for one of the mini0..mini4 variants."""
    if variant not in VARIANT_WIDTHS:
        raise ValueError(f"unknown variant {variant!r}")
    return TFNetConfig(
        variant=variant, stage_widths=VARIANT_WIDTHS[variant], **overrides
    )


# ---------------------------------------------------------------------------
# layer wrappers (internal)
# ---------------------------------------------------------------------------


def _neutral_bn(c: int, dtype) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(c, dtype=dtype),
        beta=np.zeros(c, dtype=dtype),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
    )


def _rand_conv(
    rng, in_ch, out_ch, k, stride=1, groups=1, bias=False, dtype=np.float32
) -> ConvParams:
    cpg = in_ch // groups
    bound = 1.0 / np.sqrt(cpg * k * k)
    w = rng.uniform(-bound, bound, size=(out_ch, cpg, k, k)).astype(dtype)
    b = np.zeros(out_ch, dtype=dtype) if bias else None
    return ConvParams(weight=w, bias=b, stride=stride, padding=k // 2, groups=groups)


class _PlainConv:
    """Convolution (+ optional ReLU); head layer and every fused layer."""

    def __init__(self, name: str, conv: ConvParams, act: bool):
        self.name = name
        self.conv = conv
        self.act = act

    def forward(self, x, train=False, tape=None, momentum=0.1):
        y = ops.conv2d(x, self.conv)
        if tape is not None:
            tape[self.name] = {"x": x, "pre": y if self.act else None}
        return ops.relu(y) if self.act else y

    def backward(self, gy, tape, grads):
        cache = tape[self.name]
        if self.act:
            gy = ops.relu_vjp(cache["pre"], gy)
        gx, gw, gb = ops.conv2d_vjp(cache["x"], self.conv, gy)
        _acc(grads, f"{self.name}.conv.w", gw)
        if gb is not None:
            _acc(grads, f"{self.name}.conv.b", gb)
        return gx

    def named_params(self):
        yield f"{self.name}.conv.w", self.conv.weight
        if self.conv.bias is not None:
            yield f"{self.name}.conv.b", self.conv.bias

    def named_buffers(self):
        return iter(())

    def cast(self, dtype):
        conv = replace(
            self.conv,
            weight=self.conv.weight.astype(dtype),
            bias=None if self.conv.bias is None else self.conv.bias.astype(dtype),
        )
        return _PlainConv(self.name, conv, self.act)


class _ConvBN:
    """conv -> BN -> optional ReLU; pyramid branches and decoder levels."""

    def __init__(self, name: str, conv: ConvParams, bn: BatchNormParams, act: bool):
        self.name = name
        self.conv = conv
        self.bn = bn
        self.act = act

    def forward(self, x, train=False, tape=None, momentum=0.1):
        z = ops.conv2d(x, self.conv)
        if train:
            y, stats = ops.batchnorm_train(z, self.bn, momentum=momentum)
        else:
            y, stats = ops.batchnorm_infer(z, self.bn), None
        if tape is not None:
            tape[self.name] = {
                "x": x,
                "z": z,
                "stats": stats,
                "pre": y if self.act else None,
            }
        return ops.relu(y) if self.act else y

    def backward(self, gy, tape, grads):
        cache = tape[self.name]
        if self.act:
            gy = ops.relu_vjp(cache["pre"], gy)
        gz, ggamma, gbeta = ops.batchnorm_vjp(cache["z"], self.bn, cache["stats"], gy)
        _acc(grads, f"{self.name}.bn.gamma", ggamma)
        _acc(grads, f"{self.name}.bn.beta", gbeta)
        gx, gw, gb = ops.conv2d_vjp(cache["x"], self.conv, gz)
        _acc(grads, f"{self.name}.conv.w", gw)
        if gb is not None:
            _acc(grads, f"{self.name}.conv.b", gb)
        return gx

    def fold(self) -> _PlainConv:
        return _PlainConv(self.name, fold_bn(self.conv, self.bn), self.act)

    def named_params(self):
        yield f"{self.name}.conv.w", self.conv.weight
        if self.conv.bias is not None:
            yield f"{self.name}.conv.b", self.conv.bias
        yield f"{self.name}.bn.gamma", self.bn.gamma
        yield f"{self.name}.bn.beta", self.bn.beta

    def named_buffers(self):
        yield f"{self.name}.bn.mean", self.bn.running_mean
        yield f"{self.name}.bn.var", self.bn.running_var

    def cast(self, dtype):
        conv = replace(
            self.conv,
            weight=self.conv.weight.astype(dtype),
            bias=None if self.conv.bias is None else self.conv.bias.astype(dtype),
        )
        bn = BatchNormParams(
            gamma=self.bn.gamma.astype(dtype),
            beta=self.bn.beta.astype(dtype),
            running_mean=self.bn.running_mean.astype(dtype),
            running_var=self.bn.running_var.astype(dtype),
            eps=self.bn.eps,
        )
        return _ConvBN(self.name, conv, bn, self.act)


class _Block:
    """Named wrapper around a train-form multi-branch block."""

    def __init__(self, name: str, block: MobileOneBlock):
        self.name = name
        self.block = block

    def forward(self, x, train=False, tape=None, momentum=0.1):
        blk = self.block
        if not train:
            return block_forward(blk, x)

        cache = {"x": x, "branches": [], "scale": None, "identity": None}
        y = None
        for conv, bn in blk.branches:
            z = ops.conv2d(x, conv)
            out, stats = ops.batchnorm_train(z, bn, momentum=momentum)
            cache["branches"].append({"z": z, "stats": stats})
            y = out if y is None else y + out
        if blk.scale is not None:
            sconv, sbn = blk.scale
            z = ops.conv2d(x, sconv)
            out, stats = ops.batchnorm_train(z, sbn, momentum=momentum)
            cache["scale"] = {"z": z, "stats": stats}
            y = y + out
        if blk.identity is not None:
            out, stats = ops.batchnorm_train(x, blk.identity, momentum=momentum)
            cache["identity"] = {"stats": stats}
            y = y + out
        cache["pre"] = y if blk.activation else None
        if tape is not None:
            tape[self.name] = cache
        return ops.relu(y) if blk.activation else y

    def backward(self, gy, tape, grads):
        blk = self.block
        cache = tape[self.name]
        x = cache["x"]
        if blk.activation:
            gy = ops.relu_vjp(cache["pre"], gy)
        gx = np.zeros_like(x)
        for i, (conv, bn) in enumerate(blk.branches):
            bc = cache["branches"][i]
            gz, gg, gb = ops.batchnorm_vjp(bc["z"], bn, bc["stats"], gy)
            _acc(grads, f"{self.name}.branch{i}.bn.gamma", gg)
            _acc(grads, f"{self.name}.branch{i}.bn.beta", gb)
            gxi, gw, _ = ops.conv2d_vjp(x, conv, gz)
            _acc(grads, f"{self.name}.branch{i}.conv.w", gw)
            gx += gxi
        if blk.scale is not None:
            sconv, sbn = blk.scale
            sc = cache["scale"]
            gz, gg, gb = ops.batchnorm_vjp(sc["z"], sbn, sc["stats"], gy)
            _acc(grads, f"{self.name}.scale.bn.gamma", gg)
            _acc(grads, f"{self.name}.scale.bn.beta", gb)
            gxi, gw, _ = ops.conv2d_vjp(x, sconv, gz)
            _acc(grads, f"{self.name}.scale.conv.w", gw)
            gx += gxi
        if blk.identity is not None:
            ic = cache["identity"]
            gxi, gg, gb = ops.batchnorm_vjp(x, blk.identity, ic["stats"], gy)
            _acc(grads, f"{self.name}.id.bn.gamma", gg)
            _acc(grads, f"{self.name}.id.bn.beta", gb)
            gx += gxi
        return gx

    def fuse(self) -> _PlainConv:
        fused = fuse_block(self.block)
        return _PlainConv(self.name, fused.conv, fused.activation)

    def named_params(self):
        blk = self.block
        for i, (conv, bn) in enumerate(blk.branches):
            yield f"{self.name}.branch{i}.conv.w", conv.weight
            yield f"{self.name}.branch{i}.bn.gamma", bn.gamma
            yield f"{self.name}.branch{i}.bn.beta", bn.beta
        if blk.scale is not None:
            yield f"{self.name}.scale.conv.w", blk.scale[0].weight
            yield f"{self.name}.scale.bn.gamma", blk.scale[1].gamma
            yield f"{self.name}.scale.bn.beta", blk.scale[1].beta
        if blk.identity is not None:
            yield f"{self.name}.id.bn.gamma", blk.identity.gamma
            yield f"{self.name}.id.bn.beta", blk.identity.beta

    def named_buffers(self):
        blk = self.block
        for i, (_, bn) in enumerate(blk.branches):
            yield f"{self.name}.branch{i}.bn.mean", bn.running_mean
            yield f"{self.name}.branch{i}.bn.var", bn.running_var
        if blk.scale is not None:
            yield f"{self.name}.scale.bn.mean", blk.scale[1].running_mean
            yield f"{self.name}.scale.bn.var", blk.scale[1].running_var
        if blk.identity is not None:
            yield f"{self.name}.id.bn.mean", blk.identity.running_mean
            yield f"{self.name}.id.bn.var", blk.identity.running_var

    def cast(self, dtype):
        def cast_conv(c):
            return replace(
                c,
                weight=c.weight.astype(dtype),
                bias=None if c.bias is None else c.bias.astype(dtype),
            )

        def cast_bn(b):
            return BatchNormParams(
                gamma=b.gamma.astype(dtype),
                beta=b.beta.astype(dtype),
                running_mean=b.running_mean.astype(dtype),
                running_var=b.running_var.astype(dtype),
                eps=b.eps,
            )

        blk = self.block
        new = MobileOneBlock(
            branches=[(cast_conv(c), cast_bn(b)) for c, b in blk.branches],
            scale=None
            if blk.scale is None
            else (cast_conv(blk.scale[0]), cast_bn(blk.scale[1])),
            identity=None if blk.identity is None else cast_bn(blk.identity),
            activation=blk.activation,
        )
        return _Block(self.name, new)


def _acc(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class TFNet:
    """Built model; obtain instances via :func:`build` or :func:`fuse_model`."""

    def __init__(self, config: TFNetConfig, mode: str, stem, stages, ppm, decs, head):
        self.config = config
        self.mode = mode  # "train_form" | "fused"
        self.stem = stem
        self.stages = stages  # list of stages, each a list of (dw, pw) units
        self.ppm = ppm  # None or dict with "branches" and "merge"
        self.decs = decs
        self.head = head

    # -- traversal ---------------------------------------------------------

    def _layers(self):
        yield self.stem
        for stage in self.stages:
            for dw, pw in stage:
                yield dw
                yield pw
        if self.ppm is not None:
            yield from self.ppm["branches"]
            yield self.ppm["merge"]
        yield from self.decs
        yield self.head

    def named_params(self):
        for layer in self._layers():
            yield from layer.named_params()

    def named_buffers(self):
        for layer in self._layers():
            yield from layer.named_buffers()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All tensors (parameters followed by buffers), each named once."""
        state = {}
        for name, arr in self.named_params():
            state[name] = arr
        for name, arr in self.named_buffers():
            state[name] = arr
        return state

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        state = self.state_arrays()
        missing = sorted(set(state) - set(tensors))
        if missing:
            raise KeyError(f"missing tensors: {missing}")
        extra = sorted(set(tensors) - set(state))
        if extra:
            raise KeyError(f"unexpected tensors: {extra}")
        for name, arr in state.items():
            src = tensors[name]
            if src.shape != arr.shape:
                raise ValueError(
                    f"tensor {name}: shape {src.shape} does not match {arr.shape}"
                )
            arr[...] = src

    def cast(self, dtype) -> "TFNet":
        return TFNet(
            config=self.config,
            mode=self.mode,
            stem=self.stem.cast(dtype),
            stages=[
                [(dw.cast(dtype), pw.cast(dtype)) for dw, pw in stage]
                for stage in self.stages
            ],
            ppm=None
            if self.ppm is None
            else {
                "branches": [b.cast(dtype) for b in self.ppm["branches"]],
                "merge": self.ppm["merge"].cast(dtype),
            },
            decs=[d.cast(dtype) for d in self.decs],
            head=self.head.cast(dtype),
        )

    # -- forward / backward --------------------------------------------------

    def forward(
        self,
        image: np.ndarray,
        train: bool = False,
        tape: dict | None = None,
        bn_momentum: float | None = None,
    ):
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected (n, {cfg.in_channels}, h, w) input, got {image.shape}"
            )
        n, _, h, w = image.shape
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 32")
        mom = cfg.bn_momentum if bn_momentum is None else bn_momentum

        x = self.stem.forward(image, train, tape, mom)
        skips = [x]
        for stage in self.stages:
            for dw, pw in stage:
                x = dw.forward(x, train, tape, mom)
                x = pw.forward(x, train, tape, mom)
            skips.append(x)
        deep = skips.pop()

        if self.ppm is not None:
            deep = self._ppm_forward(deep, train, tape, mom)

        d = deep
        for i, layer in enumerate(self.decs):
            skip = skips[len(skips) - 1 - i]
            th, tw = skip.shape[2], skip.shape[3]
            up = ops.bilinear_upsample(d, th, tw)
            if cfg.skips_enabled:
                if tape is not None:
                    tape[f"wire.dec{i}"] = {
                        "d_shape": d.shape,
                        "split": [up.shape[1], skip.shape[1]],
                    }
                d = ops.concat_channels([up, skip])
            else:
                if tape is not None:
                    tape[f"wire.dec{i}"] = {"d_shape": d.shape, "split": None}
                d = up
            d = layer.forward(d, train, tape, mom)

        if tape is not None:
            tape["wire.final"] = {"d_shape": d.shape}
        d = ops.bilinear_upsample(d, h, w)
        return self.head.forward(d, train, tape, mom)

    def _ppm_forward(self, deep, train, tape, mom):
        cfg = self.config
        dh, dw_ = deep.shape[2], deep.shape[3]
        outs = [deep]
        meta = []
        for layer, scale in zip(self.ppm["branches"], cfg.ppm_scales):
            ph, pw = min(scale, dh), min(scale, dw_)
            pooled = ops.adaptive_avg_pool(deep, ph, pw)
            projected = layer.forward(pooled, train, tape, mom)
            outs.append(ops.bilinear_upsample(projected, dh, dw_))
            meta.append({"pool": (ph, pw), "proj_shape": projected.shape})
        if tape is not None:
            tape["wire.ppm"] = {
                "deep_shape": deep.shape,
                "split": [o.shape[1] for o in outs],
                "branches": meta,
            }
        cat = ops.concat_channels(outs)
        return self.ppm["merge"].forward(cat, train, tape, mom)

    def backward(self, grad_logits: np.ndarray, tape: dict) -> dict[str, np.ndarray]:
        """Reverse the training forward pass; returns grads keyed by name."""
        if self.mode != "train_form":
            raise ValueError("backward requires a train-form model")
        grads: dict[str, np.ndarray] = {}
        g = self.head.backward(grad_logits, tape, grads)

        shape = tape["wire.final"]["d_shape"]
        g = ops.bilinear_upsample_vjp(shape, g.shape[2], g.shape[3], g)

        skip_grads = []
        for i in reversed(range(len(self.decs))):
            g = self.decs[i].backward(g, tape, grads)
            wire = tape[f"wire.dec{i}"]
            if wire["split"] is not None:
                gup, gskip = ops.concat_channels_vjp(wire["split"], g)
            else:
                gup, gskip = g, None
            skip_grads.append(gskip)
            shape = wire["d_shape"]
            g = ops.bilinear_upsample_vjp(shape, gup.shape[2], gup.shape[3], gup)
        skip_grads.reverse()  # index i aligns with decs order (deep to shallow)

        if self.ppm is not None:
            g = self._ppm_backward(g, tape, grads)

        # walk encoder stages in reverse, injecting skip gradients
        for si in reversed(range(len(self.stages))):
            stage = self.stages[si]
            # stage si's output is the skip consumed by decoder level
            # len(decs)-2-si; the deepest stage feeds the decoder directly
            if si < len(self.stages) - 1:
                gs = skip_grads[len(self.decs) - 2 - si]
                if gs is not None:
                    g = g + gs
            for dw, pw in reversed(stage):
                g = pw.backward(g, tape, grads)
                g = dw.backward(g, tape, grads)
        gs = skip_grads[-1]
        if gs is not None:
            g = g + gs
        self.stem.backward(g, tape, grads)
        return grads

    def _ppm_backward(self, g, tape, grads):
        wire = tape["wire.ppm"]
        g = self.ppm["merge"].backward(g, tape, grads)
        parts = ops.concat_channels_vjp(wire["split"], g)
        gdeep = parts[0].copy()
        for layer, gpart, meta in zip(self.ppm["branches"], parts[1:], wire["branches"]):
            pshape = meta["proj_shape"]
            gproj = ops.bilinear_upsample_vjp(pshape, gpart.shape[2], gpart.shape[3], gpart)
            gpool = layer.backward(gproj, tape, grads)
            ph, pw = meta["pool"]
            gdeep += ops.adaptive_avg_pool_vjp(wire["deep_shape"], ph, pw, gpool)
        return gdeep


# ---------------------------------------------------------------------------
# construction / public operations
# ---------------------------------------------------------------------------


def build(config: TFNetConfig, seed: int = 0) -> TFNet:
    """Deterministically initialize a train-form model from a seed."""
    rng = np.random.default_rng(seed)
    w = config.stage_widths
    K = config.num_branches
    use_id = config.use_identity_branch

    stem = _Block(
        "stem",
        make_block(
            rng, config.in_channels, w[0], kernel_size=3, stride=2, groups=1,
            num_branches=K, use_identity=use_id,
        ),
    )

    stages = []
    in_ch = w[0]
    for s, (reps, out_ch) in enumerate(zip(config.stage_repetitions, w[1:]), start=1):
        units = []
        for u in range(reps):
            stride = 2 if u == 0 else 1
            dw = _Block(
                f"enc{s}.u{u}.dw",
                make_block(
                    rng, in_ch, in_ch, kernel_size=3, stride=stride, groups=in_ch,
                    num_branches=K, use_identity=use_id,
                ),
            )
            pw = _Block(
                f"enc{s}.u{u}.pw",
                make_block(
                    rng, in_ch, out_ch, kernel_size=1, stride=1, groups=1,
                    num_branches=K, use_identity=use_id,
                ),
            )
            units.append((dw, pw))
            in_ch = out_ch
        stages.append(units)

    ppm = None
    if config.ppm_enabled:
        deep_w = w[4]
        proj_w = max(1, deep_w // 4)
        # Branch projections carry a bias instead of BN: the scale-1
        # branch pools to 1x1, where per-batch normalization statistics
        # degenerate under single-image batches.
        branches = [
            _PlainConv(
                f"ppm.b{i}",
                _rand_conv(rng, deep_w, proj_w, k=1, bias=True),
                act=True,
            )
            for i in range(len(config.ppm_scales))
        ]
        merge_in = deep_w + proj_w * len(config.ppm_scales)
        merge = _ConvBN(
            "ppm.merge",
            _rand_conv(rng, merge_in, deep_w, k=3),
            _neutral_bn(deep_w, np.float32),
            act=True,
        )
        ppm = {"branches": branches, "merge": merge}

    decs = []
    prev = w[4]
    for i, skip_w in enumerate((w[3], w[2], w[1], w[0])):
        dec_in = prev + skip_w if config.skips_enabled else prev
        decs.append(
            _ConvBN(
                f"dec{i}",
                _rand_conv(rng, dec_in, skip_w, k=3),
                _neutral_bn(skip_w, np.float32),
                act=True,
            )
        )
        prev = skip_w

    head = _PlainConv(
        "head", _rand_conv(rng, w[0], config.num_classes, k=1, bias=True), act=False
    )

    return TFNet(config, "train_form", stem, stages, ppm, decs, head)


def forward(model: TFNet, image: np.ndarray) -> np.ndarray:
    """Inference forward pass returning per-class logits."""
    return model.forward(image, train=False)


def fuse_model(model: TFNet) -> TFNet:
    """Collapse every block and conv+BN pair into single convolutions."""
    if model.mode == "fused":
        raise ValueError("model is already fused")
    ppm = None
    if model.ppm is not None:
        ppm = {
            "branches": [copy.deepcopy(b) for b in model.ppm["branches"]],
            "merge": model.ppm["merge"].fold(),
        }
    return TFNet(
        config=model.config,
        mode="fused",
        stem=model.stem.fuse(),
        stages=[
            [(dw.fuse(), pw.fuse()) for dw, pw in stage] for stage in model.stages
        ],
        ppm=ppm,
        decs=[d.fold() for d in model.decs],
        head=copy.deepcopy(model.head),
    )


def param_count(model: TFNet) -> int:
    """Learnable scalar parameters in the current mode (buffers excluded)."""
    return sum(arr.size for _, arr in model.named_params())


def predict_mask(model: TFNet, image: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of the logits; ties resolve to class 0 (background)."""
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError("predict_mask expects a single-image batch (1, c, h, w)")
    logits = model.forward(image, train=False)
    return np.argmax(logits[0], axis=0).astype(np.uint8)
