"""End-to-end training: per-agent, fused-output and correspondence losses.

Per sample the loss is::

    sum_a seg_loss(agent a) + seg_loss(fused target) + corr_weight * sum_s corr_loss(target, s)

Gradients are propagated by hand through fusion, warping (match indices are
constants), smoothing, the cost volume, the encoders and the backbones.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import distribution_nll, seg_loss
from .codec import fold_tied_grads, tie_key_encoder
from .config import TrainConfig
from .errors import ConfigError, DataError
from .fusion import (
    WarpPlan,
    fuse_soft,
    fuse_soft_backward,
    fuse_stacked,
    fuse_stacked_backward,
    self_confidence,
    warp_backward,
    warp_distribution,
)
from .grid import ParamBundle, channel_softmax, softmax_backward
from .model import HandshakeModel
from .smoother import correspondence_loss, corrupt_fibers, match_detector_init
from .volume import build_volume, volume_backward
from .world import SceneSample

log = logging.getLogger(__name__)

TERMS = ("seg", "fused", "corr")


@dataclass
class StepTerms:
    seg: float = 0.0
    fused: float = 0.0
    corr: float = 0.0
    corr_weight: float = 1.0

    @property
    def total(self) -> float:
        return self.seg + self.fused + self.corr_weight * self.corr


def sample_gradients(
    model: HandshakeModel,
    sample: SceneSample,
    target: int,
    corr_weight: float = 1.0,
    fusion: str = "soft",
    fused_weight: float = 1.0,
) -> StepTerms:
    """Forward + backward for one sample; gradients accumulate into ``model.params``."""
    n = sample.n_agents
    if not 0 <= target < n:
        raise ConfigError(f"target {target} outside 0..{n - 1}")
    mcfg = model.cfg
    terms = StepTerms(corr_weight=corr_weight)
    states = [model.agent_forward(obs, a, query=(a == target), key=(a != target)) for a, obs in enumerate(sample.observations)]

    d_logits = []
    for a, st in enumerate(states):
        loss, g = seg_loss(st.backbone.seg_logits, sample.gt_masks[a])
        terms.seg += loss
        d_logits.append(g)
    d_seg = [np.zeros_like(st.backbone.seg_distribution) for st in states]
    d_feat = [np.zeros_like(st.backbone.feature_map) for st in states]
    _check(terms.seg, "per-agent segmentation loss")

    supporters = [s for s in range(n) if s != target]
    if supporters:
        tq = states[target].query
        p = model.transform.forward(tq)
        keys = np.stack([states[s].key for s in supporters])
        raw = np.stack([build_volume(p, k, mcfg.metric).logits for k in keys])
        smoothed, acts = model.smoother.forward(raw)
        scale = mcfg.softmax_scale
        z = smoothed * scale
        prob = channel_softmax(z)
        d_z = np.zeros_like(z)
        for i, s in enumerate(supporters):
            loss, g = correspondence_loss(z[i], sample.correspondences[(target, s)])
            terms.corr += loss
            d_z[i] += corr_weight * g
        _check(terms.corr, "correspondence loss")

        if fused_weight > 0:
            own = states[target].backbone.seg_distribution
            idx = np.argmax(prob, axis=-1)
            no_match = prob.shape[-1] - 1
            matched = idx != no_match
            conf = np.take_along_axis(prob, idx[..., None], -1)[..., 0]
            warped = []
            plans = [WarpPlan(idx[i], conf[i], target, s) for i, s in enumerate(supporters)]
            for i, s in enumerate(supporters):
                w, _ = warp_distribution(plans[i], states[s].backbone.seg_distribution, own)
                warped.append(w)
            gt_t = sample.gt_masks[target]
            d_conf = np.zeros_like(conf)
            if fusion == "soft":
                confs, mlist = list(conf * matched), list(matched)
                sc = self_confidence(confs, mlist)
                contributions = list(zip(warped, confs))
                fused = fuse_soft(own, contributions, sc)
                loss, d_fused = distribution_nll(fused, gt_t)
                d_fused *= fused_weight
                d_segs, d_weights = fuse_soft_backward(d_fused, fused, own, contributions, sc)
                d_own = d_segs[0]
                d_warped = d_segs[1:]
                for i in range(len(supporters)):
                    d_conf[i] = (d_weights[i + 1] - d_weights[0] / len(supporters)) * matched[i]
            elif fusion == "stacked":
                fused, stack = fuse_stacked(own, warped, model.params)
                loss, d_fused = distribution_nll(fused, gt_t)
                d_fused *= fused_weight
                d_inputs = fuse_stacked_backward(d_fused, fused, stack, model.params)
                d_own, d_warped = d_inputs[0], d_inputs[1:]
            else:
                raise ConfigError(f"fusion mode {fusion!r} cannot be trained")
            terms.fused = fused_weight * loss
            _check(terms.fused, "fused segmentation loss")
            d_seg[target] += d_own
            for i, s in enumerate(supporters):
                d_src, d_self = warp_backward(plans[i], d_warped[i])
                d_seg[s] += d_src
                d_seg[target] += d_self
            if np.any(d_conf):
                d_prob = np.zeros_like(prob)
                np.put_along_axis(d_prob, idx[..., None], d_conf[..., None], -1)
                d_z += softmax_backward(prob, d_prob)

        d_raw = model.smoother.backward(d_z * scale, acts)
        d_p = np.zeros_like(p)
        for i, s in enumerate(supporters):
            dp, dk = volume_backward(d_raw[i], p, keys[i], mcfg.metric)
            d_p += dp
            d_feat[s] += model.key_enc.backward(dk, states[s].key_acts)
        d_q = model.transform.backward(d_p, tq)
        d_feat[target] += model.query_enc.backward(d_q, states[target].query_acts)

    for a, st in enumerate(states):
        g = d_logits[a]
        if np.any(d_seg[a]):
            g = g + softmax_backward(st.backbone.seg_distribution, d_seg[a])
        model.backbone.backward(st.backbone, d_feat[a], g)
    return terms


def _check(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise DataError(f"non-finite {what}: {value}")


class SGD:
    """Plain SGD, with optional heavy-ball momentum (``momentum=0`` is plain).

    ``lr_scales`` maps name prefixes to learning-rate multipliers (longest
    matching prefix wins). ``trainable`` restricts updates to the listed
    prefixes; other gradients are discarded.
    """

    def __init__(
        self,
        params: ParamBundle,
        lr: float,
        momentum: float = 0.0,
        trainable: tuple[str, ...] | None = None,
        clip_norm: float | None = None,
        lr_scales: dict[str, float] | None = None,
    ):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.trainable = trainable
        self.clip_norm = clip_norm
        self.lr_scales = dict(lr_scales or {})
        self.velocity = {n: np.zeros_like(p.value) for n, p in params.items()}

    def _is_trainable(self, name: str) -> bool:
        return self.trainable is None or name.startswith(self.trainable)

    def lr_for(self, name: str) -> float:
        best = ""
        for prefix in self.lr_scales:
            if name.startswith(prefix) and len(prefix) > len(best):
                best = prefix
        return self.lr * self.lr_scales.get(best, 1.0) if best else self.lr

    def _clip_scale(self, scale: float) -> float:
        if not self.clip_norm:
            return scale
        sq = sum(float((p.grad**2).sum()) for n, p in self.params.items() if self._is_trainable(n))
        norm = scale * math.sqrt(sq)
        return scale * self.clip_norm / norm if norm > self.clip_norm else scale

    def _update(self, name: str, value: np.ndarray, g: np.ndarray) -> None:
        if self.momentum:
            v = self.velocity[name]
            v *= self.momentum
            v += g
            g = v
        value -= self.lr_for(name) * g

    def step(self, scale: float = 1.0) -> None:
        scale = self._clip_scale(scale)
        for name, p in self.params.items():
            if self._is_trainable(name):
                self._update(name, p.value, p.grad * scale)
            p.grad[...] = 0.0


class Adam(SGD):
    """Adam with bias correction; ``momentum`` is beta1."""

    def __init__(self, params, lr, momentum=0.9, trainable=None, clip_norm=None, lr_scales=None, beta2=0.999, eps=1e-8):
        super().__init__(params, lr, momentum, trainable, clip_norm, lr_scales)
        self.beta2 = beta2
        self.eps = eps
        self.second = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.t = 0

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        super().step(scale)

    def _update(self, name: str, value: np.ndarray, g: np.ndarray) -> None:
        b1, b2 = self.momentum, self.beta2
        m, v = self.velocity[name], self.second[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**self.t)
        v_hat = v / (1 - b2**self.t)
        value -= self.lr_for(name) * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(params: ParamBundle, cfg: TrainConfig, trainable: tuple[str, ...] | None = None) -> SGD:
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.momentum or 0.9, trainable, cfg.clip_norm, cfg.lr_scales)
    return SGD(params, cfg.learning_rate, cfg.momentum, trainable, cfg.clip_norm, cfg.lr_scales)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, terms: dict[str, float]) -> None:
        for term, value in terms.items():
            self.rows.append({"epoch": epoch, "term": term, "value": value})

    def series(self, term: str = "total") -> list[float]:
        return [r["value"] for r in self.rows if r["term"] == term]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "term", "value"])
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "value": repr(r["value"])})


def lr_factor(cfg: TrainConfig, epoch: int) -> float:
    """Learning-rate multiplier for ``epoch`` (cosine decays to 0 by the last epoch)."""
    if cfg.lr_schedule == "cosine" and cfg.epochs > 1:
        return 0.5 * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    return 1.0


def _targets_for(sample: SceneSample, cfg: TrainConfig, epoch: int, index: int) -> int:
    if cfg.target >= 0:
        return min(cfg.target, sample.n_agents - 1)
    return (epoch + index) % sample.n_agents


def train(
    model: HandshakeModel,
    dataset: list[SceneSample],
    cfg: TrainConfig,
    trainable: tuple[str, ...] | None = None,
    callback=None,
) -> History:
    """Train ``model`` in place and return the per-epoch loss history.

    Epoch ``e`` in the history reports mean terms over the samples visited in
    that epoch (epoch 0 is the first pass). ``cfg.target < 0`` rotates the
    target agent across samples.
    """
    cfg.validate()
    if not dataset:
        raise DataError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    if cfg.calibrate:
        model.calibrate(dataset)
    opt = make_optimizer(model.params, cfg, trainable)
    model.params.zero_grad()
    hist = History()
    for epoch in range(cfg.epochs):
        opt.lr = cfg.learning_rate * lr_factor(cfg, epoch)
        order = rng.permutation(len(dataset))
        sums = dict.fromkeys(TERMS, 0.0)
        pending = 0
        for i, j in enumerate(order):
            sample = dataset[j]
            t = _targets_for(sample, cfg, epoch, int(j))
            terms = sample_gradients(model, sample, t, cfg.corr_weight, cfg.fusion, cfg.fused_weight)
            sums["seg"] += terms.seg
            sums["fused"] += terms.fused
            sums["corr"] += terms.corr
            pending += 1
            if pending == cfg.batch_size or i == len(order) - 1:
                if cfg.tie_codec:
                    fold_tied_grads(model.params)
                opt.step(1.0 / pending)
                if cfg.tie_codec:
                    tie_key_encoder(model.params)
                pending = 0
        means = {k: v / len(dataset) for k, v in sums.items()}
        means["total"] = means["seg"] + means["fused"] + cfg.corr_weight * means["corr"]
        _check(means["total"], "total loss")
        hist.add(epoch, means)
        log.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in means.items()))
        if callback is not None:
            callback(epoch, means)
    return hist


# ---------------------------------------------------------------------------
# smoother-only training on corrupted volumes


def pair_volumes(
    model: HandshakeModel, dataset: list[SceneSample], targets: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Raw volumes and ground truth for every (target, supporter) pair.

    Only the first ``targets`` agents act as targets when given.
    """
    vols, gts = [], []
    for sample in dataset:
        n = sample.n_agents
        states = [model.agent_forward(obs, a) for a, obs in enumerate(sample.observations)]
        for t in range(n if targets is None else min(targets, n)):
            p = model.transform.forward(states[t].query)
            for s in range(n):
                if s != t:
                    vols.append(build_volume(p, states[s].key, model.cfg.metric).logits)
                    gts.append(sample.correspondences[(t, s)])
    if not vols:
        raise DataError("no agent pairs to build volumes from")
    return np.stack(vols), np.stack(gts)


def train_smoother(
    model: HandshakeModel,
    volumes: np.ndarray,
    gts: np.ndarray,
    epochs: int = 20,
    learning_rate: float = 1e-3,
    corrupt_frac: float = 0.3,
    batch_size: int = 8,
    seed: int = 0,
    reinit: bool = True,
) -> list[float]:
    """Fit only ``smoother.*`` (Adam) on freshly corrupted copies of fixed volumes.

    With ``reinit`` the smoother first gets :func:`match_detector_init`.
    Returns the mean correspondence loss per epoch.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    rng = np.random.default_rng(seed)
    if reinit:
        match_detector_init(model.params, rng)
    opt = Adam(model.params, learning_rate, 0.9, trainable=("smoother.",))
    model.params.zero_grad()
    history = []
    for _ in range(epochs):
        noisy = corrupt_fibers(volumes, corrupt_frac, rng)
        order = rng.permutation(len(volumes))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            out, acts = model.smoother.forward(noisy[idx])
            loss, g = correspondence_loss(out, gts[idx])
            _check(loss, "smoother correspondence loss")
            total += loss * len(idx)
            model.smoother.backward(g, acts)
            opt.step()
        history.append(total / len(volumes))
    return history


def fit(model: HandshakeModel, dataset: list[SceneSample], cfg: TrainConfig, callback=None) -> History:
    """End-to-end training followed by the smoother refinement stage.

    Refinement losses are appended to the history under the term ``refine``.
    """
    hist = train(model, dataset, cfg, callback=callback)
    if cfg.smoother_epochs:
        vols, gts = pair_volumes(model, dataset, cfg.smoother_targets)
        losses = train_smoother(
            model, vols, gts, cfg.smoother_epochs, cfg.smoother_lr, cfg.corrupt_frac, seed=cfg.seed
        )
        for e, value in enumerate(losses):
            hist.add(cfg.epochs + e, {"refine": value})
    return hist
