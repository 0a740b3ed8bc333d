"""Dataset-level evaluation of a trained model and of the baselines."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .baselines import BASELINES, predict
from .errors import ConfigError, DataError
from .metrics import MetricsAccumulator, MetricsBundle
from .model import FUSION_MODES, HandshakeModel
from .smoother import corrupt_fibers
from .swarm import check_ledger, ledger_predict, run_round
from .world import SceneSample


def _require(dataset: list[SceneSample]) -> None:
    if not dataset:
        raise DataError("evaluation split is empty")


def evaluate_checkpoint(
    dataset: list[SceneSample],
    model: HandshakeModel,
    fusion: str = "hard",
    wire_bytes: int = 4,
    targets: list[int] | None = None,
) -> MetricsBundle:
    """Run a swarm round per sample and score every target's fused mask.

    Weights are only read. The bundle's ``bandwidth`` entry summarizes the
    ledgers: mean selection factor, scalars per round and the naive cost of
    shipping raw images instead.
    """
    _require(dataset)
    if fusion not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {fusion!r}")
    acc = MetricsAccumulator(model.world.n_classes)
    rs, scalars, naive, queries, responses, mismatches = [], 0, 0, 0, 0, 0
    for sample in dataset:
        result = run_round(sample, model, fusion, targets, wire_bytes)
        for t, mask in result.masks.items():
            acc.add(mask, sample.gt_masks[t], sample.obstruction_masks[t])
        led = result.ledger
        rs.extend(led.selection.values())
        scalars += led.total_scalars
        queries += sum(led.query_scalars.values())
        responses += sum(led.response_scalars.values())
        H, W = sample.view_shape
        pred = ledger_predict(H, W, model.world.n_classes, model.world.feat_rows, model.world.feat_cols,
                              model.cfg.query_dim, sample.n_agents, 0)
        naive += pred["naive"] * len(result.masks)
        mismatches += len(check_ledger(result, sample, model))
    mean_r = float(sum(rs, Fraction(0)) / len(rs)) if rs else 0.0
    bandwidth = {
        "mean_r": mean_r,
        "rounds": len(dataset),
        "total_scalars": scalars,
        "query_scalars": queries,
        "response_scalars": responses,
        "naive_scalars": naive,
        "fraction_of_naive": scalars / naive if naive else None,
        "ledger_mismatches": mismatches,
    }
    return acc.result(bandwidth)


def evaluate_baseline(dataset: list[SceneSample], model: HandshakeModel, name: str) -> MetricsBundle:
    """Score a baseline with every agent taking a turn as the target."""
    _require(dataset)
    if name not in BASELINES:
        raise ConfigError(f"unknown baseline {name!r}")
    acc = MetricsAccumulator(model.world.n_classes)
    for sample in dataset:
        for t in range(sample.n_agents):
            acc.add(predict(model, name, sample, t), sample.gt_masks[t], sample.obstruction_masks[t])
    return acc.result()


def available_baselines(model: HandshakeModel) -> list[str]:
    need = {"input_stack": "instack.conv1.weight", "output_stack": "outstack.weight", "warped_output_stack": "warpstack.weight"}
    return [b for b in BASELINES if b not in need or need[b] in model.params]


def compare_methods(
    dataset: list[SceneSample], model: HandshakeModel, fusions=("hard", "soft", "stacked"), wire_bytes: int = 4
) -> dict[str, MetricsBundle]:
    """Metrics for each fusion rule and each baseline the checkpoint carries."""
    out = {}
    for name in available_baselines(model):
        out[name] = evaluate_baseline(dataset, model, name)
    for mode in fusions:
        if mode == "stacked" and not model.has_stacked_fusion:
            continue
        out[f"mash_{mode}"] = evaluate_checkpoint(dataset, model, mode, wire_bytes)
    return out


def warp_recovery(dataset: list[SceneSample], model: HandshakeModel, targets: list[int] | None = None) -> dict:
    """Agreement of argmax warp plans with ground truth.

    ``overlap`` is the share of matched ground-truth cells recovered exactly,
    ``no_match`` the share of no-match cells predicted as no-match.
    """
    _require(dataset)
    hit = total = nm_hit = nm_total = 0
    for sample in dataset:
        states = [model.agent_forward(obs, a) for a, obs in enumerate(sample.observations)]
        for t in targets if targets is not None else range(sample.n_agents):
            for s in range(sample.n_agents):
                if s == t:
                    continue
                plan = model.pair_forward(states[t].query, states[s].key, t, s).plan
                gt = sample.correspondences[(t, s)]
                nm = gt == gt.size
                hit += int((plan.match_index[~nm] == gt[~nm]).sum())
                total += int((~nm).sum())
                nm_hit += int((plan.match_index[nm] == gt.size).sum())
                nm_total += int(nm.sum())
    return {
        "overlap": hit / total if total else None,
        "no_match": nm_hit / nm_total if nm_total else None,
        "overlap_cells": total,
        "no_match_cells": nm_total,
    }


def smoother_benefit(model: HandshakeModel, volumes: np.ndarray, gts: np.ndarray, frac: float = 0.3, seed: int = 0) -> dict:
    """Argmax error of raw vs smoothed volumes after corrupting ``frac`` of fibers."""
    noisy = corrupt_fibers(volumes, frac, np.random.default_rng(seed))
    raw_err = float((np.argmax(noisy, -1) != gts).mean())
    smoothed = model.smoother.forward(noisy)[0]
    sm_err = float((np.argmax(smoothed, -1) != gts).mean())
    return {
        "raw_error": raw_err,
        "smoothed_error": sm_err,
        "relative_reduction": (raw_err - sm_err) / raw_err if raw_err else 0.0,
    }
