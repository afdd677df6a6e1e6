"""Class-frequency weighting, weighted cross-entropy, SGD and toy training.

The loss follows the per-class-mean form: each class contributes the
mean negative log-probability of its own pixels, scaled by its
normalized frequency weight. Classes absent from a batch are skipped
(their 1/N_c term would be undefined). Weight decay is added into the
gradient before the momentum update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .model import TFNet, TFNetConfig, build, predict_mask
from .ops import softmax_channels

__all__ = [
    "ClassWeights",
    "OptimState",
    "compute_class_weights",
    "weighted_ce",
    "weighted_ce_grad",
    "sgd_step",
    "plateau_update",
    "train_toy",
    "make_toy_sample",
    "calibrate_batchnorm",
    "run_toy_overfit",
]


@dataclass(frozen=True)
class ClassWeights:
    """Raw and normalized per-class weights.

    raw[c] = N_total / (C * N_c); normalized[c] = raw[c] / sum(raw),
    so normalized sums to 1 and raw[c] * N_c is the same for every class.
    """

    raw: np.ndarray
    normalized: np.ndarray


def compute_class_weights(pixel_counts) -> ClassWeights:
    counts = np.asarray(pixel_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("need at least two per-class counts")
    if np.any(counts <= 0):
        bad = int(np.argmin(counts))
        raise ValueError(
            f"class {bad} has zero pixels; its weight would be undefined"
        )
    total = counts.sum()
    raw = total / (counts.size * counts)
    return ClassWeights(raw=raw, normalized=raw / raw.sum())


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_loss_inputs(logits, target, weights):
    if logits.ndim != 4:
        raise ValueError("logits must be (n, c, h, w)")
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} must be {(n, h, w)}")
    if target.min() < 0 or target.max() >= c:
        raise ValueError(f"target classes must lie in [0, {c})")
    if weights.normalized.size != c:
        raise ValueError("weights do not match the number of classes")
    if not math.isclose(float(weights.normalized.sum()), 1.0, abs_tol=1e-6):
        raise ValueError("weights must be normalized")
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")


def weighted_ce(logits: np.ndarray, target: np.ndarray, weights: ClassWeights) -> float:
    """Frequency-weighted cross-entropy with per-class averaging."""
    _check_loss_inputs(logits, target, weights)
    logp = _log_softmax(logits)
    loss = 0.0
    for c in range(logits.shape[1]):
        sel = target == c
        n_c = int(sel.sum())
        if n_c == 0:
            continue
        picked = logp[:, c][sel]
        loss -= float(weights.normalized[c]) / n_c * float(picked.sum())
    return loss


def weighted_ce_grad(
    logits: np.ndarray, target: np.ndarray, weights: ClassWeights
) -> np.ndarray:
    """Analytic gradient of :func:`weighted_ce` with respect to the logits."""
    _check_loss_inputs(logits, target, weights)
    n, c, h, w = logits.shape
    p = softmax_channels(logits)
    coeff = np.zeros((n, h, w), dtype=logits.dtype)
    for k in range(c):
        sel = target == k
        n_k = int(sel.sum())
        if n_k == 0:
            continue
        coeff[sel] = weights.normalized[k] / n_k
    onehot = np.zeros_like(p)
    idx_n, idx_h, idx_w = np.indices(target.shape)
    onehot[idx_n, target, idx_h, idx_w] = 1.0
    return coeff[:, None, :, :] * (p - onehot)


@dataclass
class OptimState:
    """SGD-with-momentum state plus the reduce-on-plateau bookkeeping."""

    lr: float = 1e-2
    momentum: float = 0.937
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)
    best_loss: float = math.inf
    bad_epochs: int = 0
    factor: float = 0.5
    patience: int = 3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def sgd_step(params: dict, grads: dict, state: OptimState) -> dict:
    """v <- m*v + g + wd*p; p <- p - lr*v, updating params in place."""
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name] + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.velocity[name] = v
        v *= state.momentum
        v += g
        p -= state.lr * v
    return params


def plateau_update(state: OptimState, val_loss: float) -> float:
    """Halve lr after `patience` consecutive epochs without strict improvement."""
    if val_loss < state.best_loss:
        state.best_loss = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


def train_toy(
    model: TFNet,
    samples: list[tuple[np.ndarray, np.ndarray]],
    epochs: int,
    state: OptimState,
):
    """Overfit a train-form model on a handful of samples, batch size 1.

    Returns (model, per-step loss history). Raises NumericError with the
    offending step if the loss leaves the finite range.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    if model.mode != "train_form":
        raise ValueError("training requires a train-form model")

    counts = np.zeros(model.config.num_classes, dtype=np.int64)
    for _, mask in samples:
        for c in range(counts.size):
            counts[c] += int((mask == c).sum())
    weights = compute_class_weights(counts)

    params = dict(model.named_params())
    history = []
    step = 0
    for _epoch in range(epochs):
        epoch_losses = []
        for image, mask in samples:
            target = mask[None].astype(np.int64)
            tape = {}
            logits = model.forward(image, train=True, tape=tape)
            loss = weighted_ce(logits, target, weights)
            if not math.isfinite(loss):
                raise NumericError(f"loss became non-finite at step {step}")
            grads = model.backward(weighted_ce_grad(logits, target, weights), tape)
            sgd_step(params, grads, state)
            history.append(loss)
            epoch_losses.append(loss)
            step += 1
        plateau_update(state, float(np.mean(epoch_losses)))
    return model, history


def make_toy_sample(
    size: int = 64,
    blob_fraction: float = 0.1,
    seed: int = 1,
    noise: float = 0.02,
    contrast: float = 0.5,
    texture: float = 0.08,
):
    """Synthetic image/mask pair: a bright square blob on a textured background.

    The blob covers roughly `blob_fraction` of the frame and its edges
    fall on even pixel coordinates, aligning with the stride-2 feature
    grid of the model. The blob is the positive class in the mask.
    """
    rng = np.random.default_rng(seed)
    side = max(2, 2 * round(math.sqrt(blob_fraction * size * size) / 2))
    lo, hi = 4, max(5, (size - side) // 2)
    y0 = 2 * int(rng.integers(lo, hi))
    x0 = 2 * int(rng.integers(lo, hi))
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[y0 : y0 + side, x0 : x0 + side] = 1

    yy, xx = np.mgrid[0:size, 0:size]
    base = 0.35 + texture * np.sin(xx / 7.0) * np.cos(yy / 9.0)
    image = np.stack([base, base, base]) + rng.normal(0.0, noise, (3, size, size))
    image += contrast * mask[None]
    # snap to the 8-bit lattice so image files round-trip the sample exactly
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / np.float32(255.0)
    return image[None].astype(np.float32), mask


def calibrate_batchnorm(model: TFNet, images: list[np.ndarray]) -> None:
    """Refresh BN running statistics from forward passes over `images`.

    For a single image this pins the running stats exactly to that
    image's batch statistics, making inference match the final training
    forward; for several images the buffers hold a cumulative average.
    """
    for i, image in enumerate(images):
        model.forward(image, train=True, bn_momentum=1.0 / (i + 1))


def run_toy_overfit(
    steps: int = 200,
    model_seed: int = 1,
    sample_seed: int = 1,
    size: int = 64,
    state: OptimState | None = None,
):
    """End-to-end toy overfit used by the acceptance suite and the CLI.

    Builds the micro model (widths 8/16/16/32/32), zero-initializes the
    head so training starts from balanced per-pixel probabilities, runs
    `steps` SGD steps in epochs of 10 (the plateau scheduler acts on
    epoch means rather than single steps), calibrates BN statistics and
    reports the positive-class IoU on the training sample.

    Returns (model, history, iou).
    """
    cfg = TFNetConfig(
        variant="toy",
        stage_widths=(8, 16, 16, 32, 32),
        stage_repetitions=(2, 3, 4, 3),
        input_size=size,
    )
    model = build(cfg, seed=model_seed)
    model.head.conv.weight[...] = 0.0
    model.head.conv.bias[...] = 0.0
    image, mask = make_toy_sample(size=size, seed=sample_seed)

    if state is None:
        state = OptimState(lr=1e-2, momentum=0.937, weight_decay=5e-4)
    per_epoch = min(10, steps)
    epochs = max(1, steps // per_epoch)
    model, history = train_toy(
        model, [(image, mask)] * per_epoch, epochs=epochs, state=state
    )
    calibrate_batchnorm(model, [image])

    pred = predict_mask(model, image)
    tp = int(((pred == 1) & (mask == 1)).sum())
    fp = int(((pred == 1) & (mask == 0)).sum())
    fn = int(((pred == 0) & (mask == 1)).sum())
    union = tp + fp + fn
    iou = tp / union if union else 0.0
    return model, history, iou
