"""Comparison baselines: InputStack, OutputStack and WarpedOutputStack.

All three produce the target agent's mask from every agent's data stacked in
a fixed order (target first, then the others by agent id):

* InputStack runs one backbone over the unwarped ``H x W x 3N`` image stack.
* OutputStack fuses the unwarped per-agent distributions with a learned 1x1 kernel.
* WarpedOutputStack does the same after warping each distribution with the
  ground-truth correspondence (an evaluation-time privilege, hence an upper bound).

The stacked kernels live in the same :class:`ParamBundle` as the model under
``outstack.*`` / ``warpstack.*`` and the InputStack backbone under
``instack.*``. The model's own ``fusion.*`` kernel is fitted the same way.
"""

from __future__ import annotations

import logging

import numpy as np

from .backbone import PixelBackbone, distribution_nll, init_backbone, seg_loss
from .config import TrainConfig
from .errors import ConfigError, DataError
from .fusion import (
    final_mask,
    fuse_stacked,
    fuse_stacked_backward,
    init_stacked_fusion,
    plan_from_correspondence,
    warp_distribution,
)
from .model import HandshakeModel, infer_target
from .training import Adam
from .world import SceneSample

log = logging.getLogger(__name__)

BASELINES = ("single", "input_stack", "output_stack", "warped_output_stack")


def agent_order(n_agents: int, target: int) -> list[int]:
    return [target] + [a for a in range(n_agents) if a != target]


def _check_target(sample: SceneSample, target: int) -> None:
    if not 0 <= target < sample.n_agents:
        raise ConfigError(f"target {target} outside 0..{sample.n_agents - 1}")


def input_stack(sample: SceneSample, target: int = 0) -> np.ndarray:
    _check_target(sample, target)
    return np.concatenate([sample.observations[a] for a in agent_order(sample.n_agents, target)], axis=-1)


def stacked_distributions(
    model: HandshakeModel, sample: SceneSample, target: int = 0, warp_with_gt: bool = False
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Target distribution plus the others' (optionally gt-warped) distributions."""
    _check_target(sample, target)
    segs = [model.backbone.forward(obs).seg_distribution for obs in sample.observations]
    own = segs[target]
    others = []
    for a in agent_order(sample.n_agents, target)[1:]:
        if warp_with_gt:
            plan = plan_from_correspondence(sample.correspondences[(target, a)], target, a)
            others.append(warp_distribution(plan, segs[a], own)[0])
        else:
            others.append(segs[a])
    return own, others


def baseline_input_stack(sample: SceneSample, params, patch: int, target: int = 0) -> np.ndarray:
    bb = PixelBackbone(params, patch, prefix="instack")
    return final_mask(bb.forward(input_stack(sample, target)).seg_distribution)


def baseline_output_stack(model: HandshakeModel, sample: SceneSample, target: int = 0) -> np.ndarray:
    own, others = stacked_distributions(model, sample, target)
    return final_mask(fuse_stacked(own, others, model.params, "outstack")[0])


def baseline_warped_output_stack(model: HandshakeModel, sample: SceneSample, target: int = 0) -> np.ndarray:
    own, others = stacked_distributions(model, sample, target, warp_with_gt=True)
    return final_mask(fuse_stacked(own, others, model.params, "warpstack")[0])


def baseline_single(model: HandshakeModel, sample: SceneSample, target: int = 0) -> np.ndarray:
    _check_target(sample, target)
    return final_mask(model.backbone.forward(sample.observations[target]).seg_distribution)


def predict(model: HandshakeModel, name: str, sample: SceneSample, target: int = 0) -> np.ndarray:
    """Target mask for a baseline ``name`` (see :data:`BASELINES`)."""
    if name == "single":
        return baseline_single(model, sample, target)
    if name == "input_stack":
        return baseline_input_stack(sample, model.params, model.patch, target)
    if name == "output_stack":
        return baseline_output_stack(model, sample, target)
    if name == "warped_output_stack":
        return baseline_warped_output_stack(model, sample, target)
    raise ConfigError(f"unknown baseline {name!r}")


# ---------------------------------------------------------------------------
# training


def fit_stack_kernel(
    params,
    prefix: str,
    examples: list[tuple[np.ndarray, list[np.ndarray], np.ndarray]],
    epochs: int = 10,
    learning_rate: float = 0.002,
    seed: int = 0,
) -> list[float]:
    """Fit a stacked-fusion kernel on ``(own, others, gt_mask)`` examples (Adam)."""
    if not examples:
        raise DataError("no examples to fit the stacked kernel on")
    rng = np.random.default_rng(seed)
    params.zero_grad()
    step = Adam(params, learning_rate, trainable=(prefix + ".",)).step
    history = []
    for _ in range(epochs):
        total = 0.0
        for i in rng.permutation(len(examples)):
            own, others, gt = examples[i]
            fused, stack = fuse_stacked(own, others, params, prefix)
            loss, d = distribution_nll(fused, gt)
            fuse_stacked_backward(d, fused, stack, params, prefix)
            step()
            total += loss
        history.append(total / len(examples))
    return history


def fit_input_stack(
    params,
    dataset: list[SceneSample],
    patch: int,
    hidden: int,
    feature_dim: int,
    n_classes: int,
    epochs: int = 10,
    learning_rate: float = 0.01,
    seed: int = 0,
) -> list[float]:
    """Train the InputStack backbone on every (sample, target) combination."""
    n = dataset[0].n_agents
    rng = np.random.default_rng(seed)
    if "instack.conv1.weight" not in params:
        init_backbone(params, rng, 3 * n, hidden, feature_dim, n_classes, prefix="instack")
    bb = PixelBackbone(params, patch, prefix="instack")
    params.zero_grad()
    step = Adam(params, learning_rate, trainable=("instack.",)).step
    jobs = [(s, t) for s in dataset for t in range(n)]
    history = []
    for _ in range(epochs):
        total = 0.0
        for i in rng.permutation(len(jobs)):
            sample, t = jobs[i]
            out = bb.forward(input_stack(sample, t))
            loss, g = seg_loss(out.seg_logits, sample.gt_masks[t])
            bb.backward(out, None, g)
            step()
            total += loss
        history.append(total / len(jobs))
    return history


def fit_baselines(
    model: HandshakeModel, dataset: list[SceneSample], cfg: TrainConfig, epochs: int = 10
) -> dict[str, list[float]]:
    """Fit every learned comparator, plus the model's stacked-fusion head.

    The shared backbone stays frozen; each kernel sees every (sample, target)
    pair of ``dataset``.
    """
    if not dataset:
        raise DataError("baseline training set is empty")
    n = dataset[0].n_agents
    if any(s.n_agents != n for s in dataset):
        raise DataError("stacked baselines need a fixed agent count")
    params = model.params
    C = model.world.n_classes
    rng = np.random.default_rng(cfg.seed)
    for prefix in ("outstack", "warpstack"):
        if f"{prefix}.weight" not in params:
            init_stacked_fusion(params, rng, n, C, prefix)
    if "fusion.weight" not in params or params["fusion.weight"].shape[1] != n * C:
        if "fusion.weight" in params:
            raise ConfigError(f"model fusion head expects {params['fusion.weight'].shape[1] // C} agents, data has {n}")
        init_stacked_fusion(params, rng, n, C, "fusion")

    plain, warped, mash = [], [], []
    for sample in dataset:
        for t in range(n):
            gt = sample.gt_masks[t]
            own, others = stacked_distributions(model, sample, t)
            plain.append((own, others, gt))
            own, others = stacked_distributions(model, sample, t, warp_with_gt=True)
            warped.append((own, others, gt))
            mash.append(_mash_stack(model, sample, t) + (gt,))
    history = {
        # unaligned stacks are nearly uninformative; larger steps overshoot the fit
        "output_stack": fit_stack_kernel(params, "outstack", plain, epochs, learning_rate=2e-4, seed=cfg.seed),
        "warped_output_stack": fit_stack_kernel(params, "warpstack", warped, epochs, seed=cfg.seed),
        "fusion": fit_stack_kernel(params, "fusion", mash, epochs, seed=cfg.seed),
        "input_stack": fit_input_stack(
            params, dataset, model.patch, model.cfg.hidden_dim, model.cfg.feature_dim, C, epochs, seed=cfg.seed
        ),
    }
    for name, losses in history.items():
        log.info("baseline %s: loss %.4f -> %.4f", name, losses[0], losses[-1])
    return history


def _mash_stack(model: HandshakeModel, sample: SceneSample, target: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Own distribution and the handshake-warped supporting distributions."""
    states = [
        model.agent_forward(obs, a, query=(a == target), key=(a != target))
        for a, obs in enumerate(sample.observations)
    ]
    own = states[target].backbone.seg_distribution
    others = []
    for s in agent_order(sample.n_agents, target)[1:]:
        pair = model.pair_forward(states[target].query, states[s].key, target, s)
        others.append(warp_distribution(pair.plan, states[s].backbone.seg_distribution, own)[0])
    return own, others


def mash_mask(model: HandshakeModel, sample: SceneSample, target: int, mode: str) -> np.ndarray:
    return infer_target(model, sample, target, mode).mask
