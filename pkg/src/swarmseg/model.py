"""The full handshake model: parameters, per-agent and per-pair forward passes.

:class:`HandshakeModel` owns one :class:`ParamBundle` with entries under
``backbone.*``, ``query.*``, ``key.*``, ``qk.*``, ``smoother.*`` and
``fusion.*``. The swarm harness calls the per-agent and per-pair pieces on
different agents; :func:`infer_target` runs them centrally for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneOutput, PixelBackbone, init_backbone
from .codec import calibrate_codec, init_codec, key_encoder, qk_transform, query_encoder
from .config import ModelConfig, WorldConfig
from .errors import ConfigError
from .fusion import (
    WarpPlan,
    extract_warp_plan,
    final_mask,
    fuse_hard,
    fuse_soft,
    fuse_stacked,
    init_stacked_fusion,
    self_confidence,
    warp_distribution,
)
from .grid import ParamBundle, channel_softmax, load_params, save_params
from .smoother import Smoother, init_smoother
from .volume import build_volume
from .world import SceneSample

FUSION_MODES = ("hard", "soft", "stacked")


@dataclass
class AgentState:
    agent_id: int
    backbone: BackboneOutput
    query: np.ndarray | None = None
    query_acts: list = field(default_factory=list, repr=False)
    key: np.ndarray | None = None
    key_acts: list = field(default_factory=list, repr=False)


@dataclass
class PairState:
    target: int
    support: int
    p: np.ndarray
    raw_logits: np.ndarray
    logits: np.ndarray  # smoothed
    prob: np.ndarray
    plan: WarpPlan
    smoother_acts: list = field(default_factory=list, repr=False)


class HandshakeModel:
    def __init__(self, params: ParamBundle, model_cfg: ModelConfig, world_cfg: WorldConfig):
        self.params = params
        self.cfg = model_cfg
        self.world = world_cfg
        self.patch = world_cfg.patch
        self.backbone = PixelBackbone(params, self.patch)
        self.query_enc = query_encoder(params)
        self.key_enc = key_encoder(params)
        self.transform = qk_transform(params)
        self.smoother = Smoother(params)

    @property
    def n_cells(self) -> int:
        return self.world.feat_rows * self.world.feat_cols

    @property
    def has_stacked_fusion(self) -> bool:
        return "fusion.weight" in self.params

    # -- per agent -------------------------------------------------------

    def agent_forward(self, observation: np.ndarray, agent_id: int, query: bool = True, key: bool = True) -> AgentState:
        bb = self.backbone.forward(observation)
        st = AgentState(agent_id, bb)
        if query:
            st.query, st.query_acts = self.query_enc.forward(bb.feature_map)
        if key:
            st.key, st.key_acts = self.key_enc.forward(bb.feature_map)
        return st

    # -- per pair (runs on the supporting agent) ---------------------------

    def comparable(self, query: np.ndarray) -> np.ndarray:
        if query.shape[-1] != self.transform.in_channels:
            raise ConfigError(
                f"query has {query.shape[-1]} channels, transform expects {self.transform.in_channels}"
            )
        return self.transform.forward(query)

    def pair_forward(self, query: np.ndarray, key: np.ndarray, target: int, support: int) -> PairState:
        p = self.comparable(query)
        vol = build_volume(p, key, self.cfg.metric, target, support)
        smoothed, acts = self.smoother.forward(vol.logits)
        prob = channel_softmax(smoothed, self.cfg.softmax_scale)
        plan = extract_warp_plan(prob, target, support)
        return PairState(target, support, p, vol.logits, smoothed, prob, plan, acts)

    def calibrate(self, samples: list[SceneSample], limit: int = 8) -> None:
        """Data-dependent codec init from the backbone features of ``samples``."""
        feats = [
            self.backbone.forward(obs).feature_map for s in samples[:limit] for obs in s.observations
        ]
        if not feats:
            raise ConfigError("no samples to calibrate on")
        calibrate_codec(self.params, np.stack(feats))

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        save_params(path, self.params)


def init_model(model_cfg: ModelConfig, world_cfg: WorldConfig, seed: int = 0, stacked: bool = True) -> HandshakeModel:
    model_cfg.validate()
    rng = np.random.default_rng(seed)
    params = ParamBundle()
    init_backbone(params, rng, 3, model_cfg.hidden_dim, model_cfg.feature_dim, world_cfg.n_classes)
    init_codec(params, rng, model_cfg.feature_dim, model_cfg.query_dim, model_cfg.key_dim)
    channels = world_cfg.feat_rows * world_cfg.feat_cols + 1
    init_smoother(params, rng, channels, model_cfg.smoother_width)
    if stacked:
        init_stacked_fusion(params, rng, model_cfg.stack_agents, world_cfg.n_classes)
    return HandshakeModel(params, model_cfg, world_cfg)


REQUIRED_PREFIXES = ("backbone.", "query.", "key.", "qk.", "smoother.")


def load_model(path, model_cfg: ModelConfig, world_cfg: WorldConfig) -> HandshakeModel:
    params = load_params(path)
    for prefix in REQUIRED_PREFIXES:
        if not params.names(prefix):
            raise ConfigError(f"checkpoint {path} has no {prefix}* weights")
    q = params["qk.transform.weight"].shape[1]
    k = params["qk.transform.weight"].shape[2]
    model_cfg = type(model_cfg)(**{**model_cfg.__dict__, "query_dim": q, "key_dim": k})
    return HandshakeModel(params, model_cfg, world_cfg)


# ---------------------------------------------------------------------------
# centralized inference


@dataclass
class TargetResult:
    fused: np.ndarray
    mask: np.ndarray
    own_mask: np.ndarray
    plans: dict[int, WarpPlan]
    self_conf: np.ndarray


def fuse(
    model: HandshakeModel,
    mode: str,
    own_seg: np.ndarray,
    warped: list[np.ndarray],
    confs: list[np.ndarray],
    matched: list[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Fuse a target's own distribution with its warped contributions.

    Returns ``(fused distribution, self-confidence grid)``.
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if not warped:
        hs, ws = model.world.feat_rows, model.world.feat_cols
        return own_seg.copy(), np.ones((hs, ws))
    # only transmitted cells carry a confidence; the rest are the target's own patch
    confs = [c * m for c, m in zip(confs, matched)]
    sc = self_confidence(confs, matched)
    contributions = list(zip(warped, confs))
    if mode == "hard":
        fused, _ = fuse_hard(own_seg, contributions, sc)
    elif mode == "soft":
        fused = fuse_soft(own_seg, contributions, sc)
    else:
        if not model.has_stacked_fusion:
            raise ConfigError("model has no stacked-fusion weights")
        fused, _ = fuse_stacked(own_seg, warped, model.params)
    return fused, sc


def infer_target(model: HandshakeModel, sample: SceneSample, target: int, mode: str = "hard") -> TargetResult:
    """Run the whole pipeline for one target on a single machine."""
    states = [
        model.agent_forward(obs, a, query=(a == target), key=(a != target))
        for a, obs in enumerate(sample.observations)
    ]
    own = states[target].backbone.seg_distribution
    warped, confs, matched, plans = [], [], [], {}
    for s, st in enumerate(states):
        if s == target:
            continue
        pair = model.pair_forward(states[target].query, st.key, target, s)
        w, m = warp_distribution(pair.plan, st.backbone.seg_distribution, own)
        warped.append(w)
        confs.append(pair.plan.confidence)
        matched.append(m)
        plans[s] = pair.plan
    fused, sc = fuse(model, mode, own, warped, confs, matched)
    return TargetResult(fused, final_mask(fused), final_mask(own), plans, sc)
