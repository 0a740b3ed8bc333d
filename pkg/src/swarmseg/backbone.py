"""Per-agent segmentation backbone.

Three per-pixel (1x1) conv + ReLU layers produce pixel features; averaging
them over ``patch x patch`` blocks gives the low-resolution feature map, and a
1x1 head plus channel softmax gives the per-pixel class distribution.
Anything satisfying :class:`SegmentationBackbone` can replace it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ConfigError, DataError
from .grid import (
    Conv,
    ConvStack,
    ParamBundle,
    add_conv,
    channel_log_softmax,
    channel_softmax,
    patch_mean,
    patch_mean_backward,
)


@dataclass
class BackboneOutput:
    feature_map: np.ndarray  # (Hs, Ws, F)
    seg_distribution: np.ndarray  # (H, W, C)
    seg_logits: np.ndarray  # (H, W, C)
    cache: dict = field(default_factory=dict, repr=False)


class SegmentationBackbone(Protocol):
    feature_dim: int
    n_classes: int

    def forward(self, observation: np.ndarray) -> BackboneOutput: ...

    def backward(self, out: BackboneOutput, d_feature: np.ndarray | None, d_logits: np.ndarray | None) -> None: ...


def init_backbone(
    params: ParamBundle,
    rng: np.random.Generator,
    in_channels: int = 3,
    hidden: int = 16,
    feature_dim: int = 16,
    n_classes: int = 6,
    prefix: str = "backbone",
) -> None:
    add_conv(params, f"{prefix}.conv1", in_channels, hidden, rng)
    add_conv(params, f"{prefix}.conv2", hidden, hidden, rng)
    add_conv(params, f"{prefix}.conv3", hidden, feature_dim, rng)
    add_conv(params, f"{prefix}.head", feature_dim, n_classes, rng)


class PixelBackbone:
    def __init__(self, params: ParamBundle, patch: int, prefix: str = "backbone"):
        self.params = params
        self.patch = patch
        self.prefix = prefix
        self.trunk = ConvStack(params, [f"{prefix}.conv{i}" for i in (1, 2, 3)], final_relu=True)
        self.head = Conv(params, f"{prefix}.head")

    @property
    def in_channels(self) -> int:
        return self.trunk.layers[0].in_channels

    @property
    def feature_dim(self) -> int:
        return self.head.in_channels

    @property
    def n_classes(self) -> int:
        return self.head.out_channels

    def forward(self, observation: np.ndarray) -> BackboneOutput:
        if observation.ndim != 3 or observation.shape[-1] != self.in_channels:
            raise ConfigError(
                f"backbone expects (H, W, {self.in_channels}) input, got {observation.shape}"
            )
        pix, acts = self.trunk.forward(observation)
        feats = patch_mean(pix, self.patch)
        logits = self.head.forward(pix)
        return BackboneOutput(feats, channel_softmax(logits), logits, {"acts": acts})

    def backward(
        self, out: BackboneOutput, d_feature: np.ndarray | None = None, d_logits: np.ndarray | None = None
    ) -> None:
        acts = out.cache["acts"]
        pix = acts[-1]
        g = np.zeros_like(pix)
        if d_logits is not None:
            g += self.head.backward(d_logits, pix)
        if d_feature is not None:
            g += patch_mean_backward(d_feature, self.patch)
        self.trunk.backward(g, acts, need_input_grad=False)


def backbone_forward(observation: np.ndarray, params: ParamBundle, patch: int) -> BackboneOutput:
    return PixelBackbone(params, patch).forward(observation)


def seg_loss(
    seg_logits: np.ndarray, gt_mask: np.ndarray, ignore_mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean pixel cross-entropy and its gradient w.r.t. the pre-softmax logits.

    The gradient is ``(softmax - onehot) / count`` on kept pixels, zero on
    ignored ones.
    """
    if seg_logits.shape[:2] != gt_mask.shape:
        raise ConfigError(f"logits {seg_logits.shape} and mask {gt_mask.shape} are not congruent")
    keep = np.ones(gt_mask.shape, bool) if ignore_mask is None else ~ignore_mask.astype(bool)
    count = int(keep.sum())
    if count == 0:
        raise DataError("every pixel is ignored")
    C = seg_logits.shape[-1]
    if gt_mask.min() < 0 or gt_mask.max() >= C:
        raise DataError("ground-truth class out of range")
    logp = channel_log_softmax(seg_logits)
    picked = np.take_along_axis(logp, gt_mask[..., None], axis=-1)[..., 0]
    loss = -float(picked[keep].sum()) / count
    grad = np.exp(logp)
    np.put_along_axis(grad, gt_mask[..., None], np.take_along_axis(grad, gt_mask[..., None], -1) - 1.0, -1)
    grad *= keep[..., None] / count
    return loss, grad


PROB_FLOOR = 1e-12


def distribution_nll(
    prob: np.ndarray, gt_mask: np.ndarray, ignore_mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean pixel cross-entropy of an already-normalized distribution.

    Returns the gradient w.r.t. the probabilities (used for fused outputs,
    which have no logits of their own).
    """
    keep = np.ones(gt_mask.shape, bool) if ignore_mask is None else ~ignore_mask.astype(bool)
    count = int(keep.sum())
    if count == 0:
        raise DataError("every pixel is ignored")
    p = np.take_along_axis(prob, gt_mask[..., None], axis=-1)[..., 0]
    p = np.maximum(p, PROB_FLOOR)
    loss = -float(np.log(p)[keep].sum()) / count
    grad = np.zeros_like(prob)
    np.put_along_axis(grad, gt_mask[..., None], (-keep.astype(np.float64) / (p * count))[..., None], -1)
    return loss, grad
