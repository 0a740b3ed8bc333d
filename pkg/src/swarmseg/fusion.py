"""Warp plans, patch-rigid warping and multi-agent fusion rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import Conv, ParamBundle, add_conv, channel_argmax_max, channel_softmax, softmax_backward

LOG_FLOOR = 1e-12


@dataclass
class WarpPlan:
    match_index: np.ndarray  # (Hs, Ws) ints in [0, Hs*Ws]
    confidence: np.ndarray  # (Hs, Ws) in [0, 1]
    target: int = 0
    support: int = 0

    @property
    def no_match(self) -> int:
        return self.match_index.size

    @property
    def matched(self) -> np.ndarray:
        return self.match_index != self.no_match

    @property
    def selection_factor(self) -> float:
        return float(self.matched.mean())

    @property
    def quarter_turns(self) -> int:
        return plan_quarter_turns(self.match_index)


# source-grid step seen for one target column step / one target row step, per quarter turn
_COL_STEPS = {(0, 1): 0, (1, 0): 1, (0, -1): 2, (-1, 0): 3}
_ROW_STEPS = {(1, 0): 0, (0, -1): 1, (-1, 0): 2, (0, 1): 3}


def plan_quarter_turns(match_index: np.ndarray) -> int:
    """Relative rotation of the source frame, voted from adjacent matched cells.

    Each pair of neighbouring matched target cells whose sources are also
    neighbours votes for one quarter turn. Without votes the frames are taken
    as aligned.
    """
    hs, ws = match_index.shape
    n = hs * ws
    a, b = np.divmod(match_index, ws)
    votes = np.zeros(4, dtype=np.int64)
    for axis, table in ((1, _COL_STEPS), (0, _ROW_STEPS)):
        m = (match_index != n)
        both = m[:, :-1] & m[:, 1:] if axis == 1 else m[:-1] & m[1:]
        da = np.diff(a, axis=axis)[both]
        db = np.diff(b, axis=axis)[both]
        for step, k in table.items():
            votes[k] += int(np.count_nonzero((da == step[0]) & (db == step[1])))
    return int(np.argmax(votes))


def extract_warp_plan(prob: np.ndarray, target: int = 0, support: int = 0) -> WarpPlan:
    """Channel argmax/max of a probability volume."""
    idx, conf = channel_argmax_max(prob)
    if prob.shape[-1] != idx.size + 1:
        raise ConfigError(f"volume has {prob.shape[-1]} channels, expected {idx.size + 1}")
    return WarpPlan(idx, conf, target, support)


def identity_plan(feat_rows: int, feat_cols: int) -> WarpPlan:
    return WarpPlan(np.arange(feat_rows * feat_cols).reshape(feat_rows, feat_cols), np.ones((feat_rows, feat_cols)))


def plan_from_correspondence(gt: np.ndarray, target: int = 0, support: int = 0) -> WarpPlan:
    """A plan that follows ground-truth correspondences with full confidence."""
    return WarpPlan(gt.astype(np.int64), np.where(gt != gt.size, 1.0, 0.0), target, support)


def to_cells(img: np.ndarray, feat_rows: int, feat_cols: int) -> np.ndarray:
    """(H, W, C) -> (Hs*Ws, ph, pw, C) patch blocks in row-major cell order."""
    H, W, C = img.shape
    if H % feat_rows or W % feat_cols:
        raise ConfigError(f"{H}x{W} image does not split into {feat_rows}x{feat_cols} cells")
    ph, pw = H // feat_rows, W // feat_cols
    return img.reshape(feat_rows, ph, feat_cols, pw, C).transpose(0, 2, 1, 3, 4).reshape(-1, ph, pw, C)


def from_cells(cells: np.ndarray, feat_rows: int, feat_cols: int) -> np.ndarray:
    _, ph, pw, C = cells.shape
    return cells.reshape(feat_rows, feat_cols, ph, pw, C).transpose(0, 2, 1, 3, 4).reshape(feat_rows * ph, feat_cols * pw, C)


def upsample_cells(grid: np.ndarray, patch_rows: int, patch_cols: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, patch_rows, axis=0), patch_cols, axis=1)


def warp_distribution(
    plan: WarpPlan, source_seg: np.ndarray, target_seg_self: np.ndarray, quarter_turns: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Copy matched supporting patches into the target frame.

    Returns the warped (H, W, C) distribution and the boolean (Hs, Ws) grid of
    cells that a supporting agent would transmit. No-match cells keep the
    target's own patch. Copied patches are turned by ``quarter_turns``
    (estimated from the plan when omitted) so their contents line up with the
    target frame.
    """
    hs, ws = plan.match_index.shape
    k = plan.quarter_turns if quarter_turns is None else quarter_turns
    src = np.rot90(to_cells(source_seg, hs, ws), k, axes=(1, 2))
    own = to_cells(target_seg_self, hs, ws)
    matched = plan.matched.ravel()
    idx = np.where(matched, plan.match_index.ravel(), 0)
    cells = np.where(matched[:, None, None, None], src[idx], own)
    return from_cells(cells, hs, ws), plan.matched.copy()


def warp_backward(
    plan: WarpPlan, d_warped: np.ndarray, quarter_turns: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`warp_distribution` w.r.t. source and target-self distributions."""
    hs, ws = plan.match_index.shape
    k = plan.quarter_turns if quarter_turns is None else quarter_turns
    d_cells = to_cells(d_warped, hs, ws)
    matched = plan.matched.ravel()
    d_src = np.zeros_like(d_cells)
    np.add.at(d_src, plan.match_index.ravel()[matched], d_cells[matched])
    d_src = np.rot90(d_src, -k, axes=(1, 2))
    d_own = np.where(matched[:, None, None, None], 0.0, d_cells)
    return from_cells(np.ascontiguousarray(d_src), hs, ws), from_cells(d_own, hs, ws)


# ---------------------------------------------------------------------------
# fusion


def self_confidence(confidences: list[np.ndarray], matched: list[np.ndarray]) -> np.ndarray:
    """Target's weight for its own cells: one minus the mean transmitted match confidence.

    A supporter that sends nothing for a cell counts as a full vote for the
    target's own prediction.
    """
    if not confidences:
        raise ConfigError("self_confidence needs at least one supporting agent")
    votes = [c * m for c, m in zip(confidences, matched)]
    return 1.0 - np.mean(votes, axis=0)


def fuse_hard(
    target_seg: np.ndarray,
    contributions: list[tuple[np.ndarray, np.ndarray]],
    self_conf: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per cell, take the patch of the most confident contributor.

    Index 0 in the returned selection grid is the target itself; index i>0 is
    ``contributions[i-1]``. Ties favour the target, then the earlier entry.
    """
    hs, ws = self_conf.shape
    confs = np.stack([self_conf] + [c for _, c in contributions])
    choice = np.argmax(confs, axis=0)
    segs = np.stack([to_cells(target_seg, hs, ws)] + [to_cells(w, hs, ws) for w, _ in contributions])
    picked = segs[choice.ravel(), np.arange(hs * ws)]
    return from_cells(picked, hs, ws), choice


def fuse_soft(
    target_seg: np.ndarray,
    contributions: list[tuple[np.ndarray, np.ndarray]],
    self_conf: np.ndarray,
) -> np.ndarray:
    """Confidence-weighted sum of distributions, renormalized per pixel."""
    hs, ws = self_conf.shape
    H, W, _ = target_seg.shape
    ph, pw = H // hs, W // ws
    weights = [self_conf] + [c for _, c in contributions]
    segs = [target_seg] + [w for w, _ in contributions]
    total = np.sum(weights, axis=0)
    acc = sum(upsample_cells(w, ph, pw)[..., None] * s for w, s in zip(weights, segs))
    tot_px = upsample_cells(total, ph, pw)[..., None]
    safe = tot_px > 0
    return np.where(safe, acc / np.where(safe, tot_px, 1.0), target_seg)


def fuse_soft_backward(
    d_fused: np.ndarray,
    fused: np.ndarray,
    target_seg: np.ndarray,
    contributions: list[tuple[np.ndarray, np.ndarray]],
    self_conf: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of :func:`fuse_soft`.

    Returns ``(d_segs, d_weights)`` where index 0 is the target's own
    distribution / self-confidence and index i>0 the i-th contribution.
    """
    hs, ws = self_conf.shape
    H, W, _ = target_seg.shape
    ph, pw = H // hs, W // ws
    weights = [self_conf] + [c for _, c in contributions]
    segs = [target_seg] + [w for w, _ in contributions]
    total = np.sum(weights, axis=0)
    tot_px = upsample_cells(total, ph, pw)[..., None]
    zero = tot_px <= 0
    inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, tot_px))
    d_segs, d_weights = [], []
    for w, s in zip(weights, segs):
        d_segs.append(d_fused * upsample_cells(w, ph, pw)[..., None] * inv)
        px = (d_fused * (s - fused) * inv).sum(-1)
        d_weights.append(px.reshape(hs, ph, ws, pw).sum(axis=(1, 3)))
    d_segs[0] = d_segs[0] + np.where(zero, d_fused, 0.0)
    return d_segs, d_weights


def init_stacked_fusion(
    params: ParamBundle, rng: np.random.Generator, n_agents: int, n_classes: int, prefix: str = "fusion"
) -> None:
    """1x1 kernel over N*C stacked log-distributions; starts as 'use the target'."""
    add_conv(params, prefix, n_agents * n_classes, n_classes, rng, init="identity")


def _stack_logs(target_seg: np.ndarray, warped: list[np.ndarray]) -> np.ndarray:
    return np.log(np.maximum(np.concatenate([target_seg] + list(warped), axis=-1), LOG_FLOOR))


def fuse_stacked(
    target_seg: np.ndarray, warped: list[np.ndarray], params: ParamBundle, prefix: str = "fusion"
) -> tuple[np.ndarray, np.ndarray]:
    """Learned 1x1 fusion of the stacked log-distributions, then softmax.

    Returns the fused distribution and the stacked input (for backward).
    """
    layer = Conv(params, prefix)
    n_in = layer.in_channels
    C = target_seg.shape[-1]
    if n_in != C * (1 + len(warped)):
        raise ConfigError(
            f"stacked fusion was trained for {n_in // C} agents, got {1 + len(warped)}"
        )
    stack = _stack_logs(target_seg, warped)
    return channel_softmax(layer.forward(stack)), stack


def fuse_stacked_backward(
    d_fused: np.ndarray, fused: np.ndarray, stack: np.ndarray, params: ParamBundle, prefix: str = "fusion"
) -> list[np.ndarray]:
    """Accumulate kernel gradients; return gradients w.r.t. each stacked distribution."""
    layer = Conv(params, prefix)
    d_logits = softmax_backward(fused, d_fused)
    d_stack = layer.backward(d_logits, stack)
    probs = np.exp(stack)
    d_stack = d_stack / probs * (probs > LOG_FLOOR)
    C = fused.shape[-1]
    return [d_stack[..., i * C : (i + 1) * C] for i in range(stack.shape[-1] // C)]


def final_mask(fused: np.ndarray) -> np.ndarray:
    return np.argmax(fused, axis=-1)
