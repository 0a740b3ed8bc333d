"""Simulated swarm: agents, the two-message handshake and a bandwidth ledger.

One round runs, for every target ``T`` and supporting agent ``S``:

1. every agent runs its backbone; targets encode and broadcast a query,
2. each supporter encodes its key once, then per received query computes the
   comparable map, cost volume, smoothed volume and warp plan, and replies
   with the matched (warped) patches of its own distribution plus their
   confidences,
3. each target fuses its own distribution with the replies.

Agents only exchange :class:`SwarmMessage` values. Every scalar that crosses
the simulated channel is counted in a :class:`BandwidthLedger`, and every
computation is recorded in an operation log tagged with the agent that ran it.
"""

from __future__ import annotations

import json
import struct
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .fusion import WarpPlan, final_mask, from_cells, to_cells
from .grid import save_tensors
from .model import FUSION_MODES, AgentState, HandshakeModel, fuse
from .world import SceneSample

QUERY = "query"
RESPONSE = "response"
BROADCAST = -1

_WIRE_DTYPES = {2: "<f2", 4: "<f4", 8: "<f8"}


def wire_dtype(wire_bytes: int) -> np.dtype:
    if wire_bytes not in _WIRE_DTYPES:
        raise ConfigError(f"unsupported wire scalar width {wire_bytes}")
    return np.dtype(_WIRE_DTYPES[wire_bytes])


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class SwarmMessage:
    """A typed wire unit. ``payload`` holds the encoded bytes."""

    kind: str
    sender: int
    receiver: int
    scalar_count: int
    payload: bytes
    header_bytes: int

    @property
    def scalar_bytes(self) -> int:
        return len(self.payload) - self.header_bytes


_QUERY_HEADER = struct.Struct("<i3i")
_RESPONSE_HEADER = struct.Struct("<ii5i")


def encode_query_msg(sender: int, q: np.ndarray, wire_bytes: int = 4) -> SwarmMessage:
    """QueryMsg: sender id, three shape integers, raw little-endian scalars."""
    rows, cols, ch = q.shape
    header = _QUERY_HEADER.pack(sender, rows, cols, ch)
    body = np.ascontiguousarray(q, dtype=wire_dtype(wire_bytes)).tobytes()
    return SwarmMessage(QUERY, sender, BROADCAST, q.size, header + body, len(header))


def decode_query_msg(msg: SwarmMessage, wire_bytes: int = 4) -> tuple[int, np.ndarray]:
    if msg.kind != QUERY:
        raise DataError(f"expected a query message, got {msg.kind}")
    sender, rows, cols, ch = _QUERY_HEADER.unpack_from(msg.payload)
    body = np.frombuffer(msg.payload, dtype=wire_dtype(wire_bytes), offset=_QUERY_HEADER.size)
    if body.size != rows * cols * ch:
        raise DataError("query payload length does not match its header")
    return sender, body.astype(np.float64).reshape(rows, cols, ch)


@dataclass
class Response:
    """Decoded reply: matched-cell patches already turned into the target frame."""

    sender: int
    receiver: int
    cells: np.ndarray  # (Hs, Ws) bool, transmitted cells
    patches: np.ndarray  # (n_cells, ph, pw, C)
    confidence: np.ndarray  # (n_cells,)


def encode_response_msg(
    sender: int, receiver: int, plan: WarpPlan, source_seg: np.ndarray, wire_bytes: int = 4
) -> SwarmMessage:
    """ResponseMsg: ids, grid/patch dims, a cell bitmask, then patches and confidences.

    Only matched cells are sent; each contributes ``ph*pw*C`` distribution
    scalars and one confidence scalar.
    """
    hs, ws = plan.match_index.shape
    cells = plan.matched
    src = np.rot90(to_cells(source_seg, hs, ws), plan.quarter_turns, axes=(1, 2))
    patches = src[plan.match_index[cells]]
    conf = plan.confidence[cells]
    _, ph, pw, C = src.shape
    dt = wire_dtype(wire_bytes)
    header = _RESPONSE_HEADER.pack(sender, receiver, hs, ws, ph, pw, C)
    mask = np.packbits(cells.ravel()).tobytes()
    body = np.ascontiguousarray(patches, dtype=dt).tobytes() + np.ascontiguousarray(conf, dtype=dt).tobytes()
    return SwarmMessage(RESPONSE, sender, receiver, patches.size + conf.size, header + mask + body, len(header) + len(mask))


def decode_response_msg(msg: SwarmMessage, wire_bytes: int = 4) -> Response:
    if msg.kind != RESPONSE:
        raise DataError(f"expected a response message, got {msg.kind}")
    sender, receiver, hs, ws, ph, pw, C = _RESPONSE_HEADER.unpack_from(msg.payload)
    off = _RESPONSE_HEADER.size
    n_mask = (hs * ws + 7) // 8
    bits = np.frombuffer(msg.payload, np.uint8, n_mask, off)
    cells = np.unpackbits(bits)[: hs * ws].astype(bool).reshape(hs, ws)
    n = int(cells.sum())
    body = np.frombuffer(msg.payload, wire_dtype(wire_bytes), offset=off + n_mask).astype(np.float64)
    if body.size != n * (ph * pw * C + 1):
        raise DataError("response payload length does not match its bitmask")
    patches = body[: n * ph * pw * C].reshape(n, ph, pw, C)
    return Response(sender, receiver, cells, patches, body[n * ph * pw * C :])


def assemble_warped(resp: Response, own_seg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Target-side: warped distribution and confidence grid from a reply."""
    hs, ws = resp.cells.shape
    cells = to_cells(own_seg, hs, ws).copy()
    flat = resp.cells.ravel()
    cells[flat] = resp.patches
    conf = np.zeros(hs * ws)
    conf[flat] = resp.confidence
    return from_cells(cells, hs, ws), conf.reshape(hs, ws)


# ---------------------------------------------------------------------------
# bandwidth


@dataclass
class AgentCounters:
    tx_scalars: int = 0
    rx_scalars: int = 0
    tx_bytes: int = 0
    rx_bytes: int = 0
    tx_header_bytes: int = 0
    rx_header_bytes: int = 0


@dataclass
class BandwidthLedger:
    """Per-agent traffic plus per-pair selection factors.

    A broadcast query is transmitted once and received by every other agent.
    ``response_scalars`` and ``query_scalars`` are keyed by ``(target, support)``
    and target respectively.
    """

    n_agents: int
    wire_bytes: int = 4
    agents: dict[int, AgentCounters] = field(default_factory=dict)
    selection: dict[tuple[int, int], Fraction] = field(default_factory=dict)
    cells_sent: dict[tuple[int, int], int] = field(default_factory=dict)
    response_scalars: dict[tuple[int, int], int] = field(default_factory=dict)
    query_scalars: dict[int, int] = field(default_factory=dict)
    broadcasts: int = 0

    def __post_init__(self) -> None:
        for a in range(self.n_agents):
            self.agents.setdefault(a, AgentCounters())

    def record(self, msg: SwarmMessage, receivers: list[int]) -> None:
        n_bytes = len(msg.payload)
        tx = self.agents[msg.sender]
        tx.tx_scalars += msg.scalar_count
        tx.tx_bytes += n_bytes
        tx.tx_header_bytes += msg.header_bytes
        for r in receivers:
            rx = self.agents[r]
            rx.rx_scalars += msg.scalar_count
            rx.rx_bytes += n_bytes
            rx.rx_header_bytes += msg.header_bytes
        if msg.kind == QUERY:
            self.broadcasts += 1
            self.query_scalars[msg.sender] = msg.scalar_count

    def record_response(self, target: int, support: int, msg: SwarmMessage, n_cells: int, total_cells: int) -> None:
        self.record(msg, [target])
        self.cells_sent[(target, support)] = n_cells
        self.selection[(target, support)] = Fraction(n_cells, total_cells)
        self.response_scalars[(target, support)] = msg.scalar_count

    @property
    def total_scalars(self) -> int:
        return sum(c.tx_scalars for c in self.agents.values())

    def to_dict(self) -> dict:
        return {
            "wire_bytes": self.wire_bytes,
            "broadcasts": self.broadcasts,
            "total_tx_scalars": self.total_scalars,
            "agents": {str(a): vars(c).copy() for a, c in self.agents.items()},
            "pairs": [
                {
                    "target": t,
                    "support": s,
                    "r": float(r),
                    "cells": self.cells_sent[(t, s)],
                    "response_scalars": self.response_scalars[(t, s)],
                }
                for (t, s), r in sorted(self.selection.items())
            ],
            "query_scalars": {str(a): v for a, v in sorted(self.query_scalars.items())},
        }


def ledger_predict(H: int, W: int, C: int, Hs: int, Ws: int, Q: int, N: int, r) -> dict:
    """Closed-form scalar counts per role for one target.

    ``support_tx`` is the segmentation term ``H*W*C*r`` and
    ``support_confidence`` the extra confidence scalar per transmitted cell;
    ``naive`` is sending every raw image to the target. Pass ``r`` as a
    :class:`~fractions.Fraction` for exact results.
    """
    if min(H, W, C, Hs, Ws, Q, N) <= 0:
        raise ConfigError("all dimensions must be positive")
    r = Fraction(r)
    if not 0 <= r <= 1:
        raise ConfigError("selection factor must lie in [0, 1]")
    return {
        "target_tx": Hs * Ws * Q,
        "support_tx": H * W * C * r,
        "support_confidence": Hs * Ws * r,
        "naive": (N - 1) * H * W * 3,
        "raw_image": H * W * 3,
    }


def target_fraction(H: int, W: int, Hs: int, Ws: int, Q: int) -> Fraction:
    """Target query transmission as a fraction of one raw RGB image."""
    return Fraction(ledger_predict(H, W, 1, Hs, Ws, Q, 2, 0)["target_tx"], H * W * 3)


# ---------------------------------------------------------------------------
# agents and the round


@dataclass
class OpRecord:
    agent: int
    step: str
    target: int | None = None
    support: int | None = None
    macs: int = 0

    @property
    def role(self) -> str:
        if self.target is None:
            return "local"
        return "target" if self.agent == self.target else "supporting"


def _conv_macs(layers, rows: int, cols: int) -> int:
    return sum(rows * cols * int(np.prod(layer.weight.shape)) for layer in layers)


class Agent:
    """One swarm member; holds only its own observation and received messages."""

    def __init__(self, agent_id: int, observation: np.ndarray, model: HandshakeModel, wire_bytes: int):
        self.id = agent_id
        self.observation = observation
        self.model = model
        self.wire_bytes = wire_bytes
        self.state: AgentState | None = None
        self.log: list[OpRecord] = []
        self.inbox: list[SwarmMessage] = []

    def _op(self, step: str, target=None, support=None, macs: int = 0) -> None:
        self.log.append(OpRecord(self.id, step, target, support, macs))

    def perceive(self, is_target: bool, is_support: bool) -> SwarmMessage | None:
        m = self.model
        H, W, _ = self.observation.shape
        hs, ws = m.world.feat_rows, m.world.feat_cols
        self.state = m.agent_forward(self.observation, self.id, query=is_target, key=is_support)
        bb = m.backbone
        self._op("backbone", macs=_conv_macs(bb.trunk.layers + [bb.head], H, W))
        if is_support:
            self._op("encode_key", macs=_conv_macs(m.key_enc.layers, hs, ws))
        if not is_target:
            return None
        self._op("encode_query", self.id, macs=_conv_macs(m.query_enc.layers, hs, ws))
        msg = encode_query_msg(self.id, self.state.query, self.wire_bytes)
        self._op("broadcast_query", self.id)
        return msg

    def respond(self, msg: SwarmMessage) -> tuple[SwarmMessage, WarpPlan]:
        m = self.model
        target, q = decode_query_msg(msg, self.wire_bytes)
        hs, ws = m.world.feat_rows, m.world.feat_cols
        K = m.cfg.key_dim
        pair = m.pair_forward(q, self.state.key, target, self.id)
        self._op("qk_transform", target, self.id, _conv_macs([m.transform], hs, ws))
        self._op("cost_volume", target, self.id, (hs * ws) ** 2 * K + hs * ws * K)
        self._op("smooth", target, self.id, _conv_macs(m.smoother.net.layers, hs, ws))
        self._op("warp_plan", target, self.id, hs * ws * (hs * ws + 1))
        seg = self.state.backbone.seg_distribution
        reply = encode_response_msg(self.id, target, pair.plan, seg, self.wire_bytes)
        self._op("warp_response", target, self.id, int(pair.plan.matched.sum()) * m.patch**2 * seg.shape[-1])
        return reply, pair.plan

    def fuse(self, replies: list[SwarmMessage], mode: str) -> tuple[np.ndarray, np.ndarray]:
        own = self.state.backbone.seg_distribution
        warped, confs, matched = [], [], []
        for msg in sorted(replies, key=lambda r: r.sender):
            resp = decode_response_msg(msg, self.wire_bytes)
            w, c = assemble_warped(resp, own)
            warped.append(w)
            confs.append(c)
            matched.append(resp.cells)
        fused, _ = fuse(self.model, mode, own, warped, confs, matched)
        self._op("fuse", self.id, macs=own.size * (1 + len(warped)))
        return fused, final_mask(fused)


@dataclass
class RoundResult:
    masks: dict[int, np.ndarray]
    fused: dict[int, np.ndarray]
    ledger: BandwidthLedger
    log: list[OpRecord]
    plans: dict[tuple[int, int], WarpPlan]

    def log_lines(self) -> list[str]:
        return [json.dumps(vars(rec), sort_keys=True) for rec in self.log]

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_tensors(out / "masks.bin", {f"mask.{t}": m[..., None].astype(np.float64) for t, m in self.masks.items()})
        (out / "ledger.json").write_text(json.dumps(self.ledger.to_dict(), indent=2))
        (out / "oplog.jsonl").write_text("\n".join(self.log_lines()) + "\n")


def run_round(
    sample: SceneSample,
    model: HandshakeModel,
    fusion: str = "hard",
    targets: list[int] | None = None,
    wire_bytes: int = 4,
    schedule: str = "sequential",
) -> RoundResult:
    """One handshake round over ``sample``; every agent is a target by default."""
    n = sample.n_agents
    if n < 2:
        raise ConfigError("a round needs at least two agents")
    if fusion not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {fusion!r}")
    if fusion == "stacked":
        if not model.has_stacked_fusion:
            raise ConfigError("model has no stacked-fusion weights")
        width = model.params["fusion.weight"].shape[1] // model.world.n_classes
        if width != n:
            raise ConfigError(f"stacked fusion was trained for {width} agents, sample has {n}")
    if schedule not in ("sequential", "parallel"):
        raise ConfigError(f"unknown schedule {schedule!r}")
    targets = list(range(n)) if targets is None else sorted(set(targets))
    if any(not 0 <= t < n for t in targets):
        raise ConfigError(f"targets must lie in 0..{n - 1}")
    wire_dtype(wire_bytes)

    agents = [Agent(a, sample.observations[a], model, wire_bytes) for a in range(n)]
    ledger = BandwidthLedger(n, wire_bytes)
    hs, ws = model.world.feat_rows, model.world.feat_cols
    is_support = {a: any(t != a for t in targets) for a in range(n)}

    def run(fn, items):
        if schedule == "parallel":
            with ThreadPoolExecutor(max_workers=len(items) or 1) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    # phase 1: perception and query broadcast
    queries = run(lambda a: a.perceive(a.id in targets, is_support[a.id]), agents)
    for a, msg in zip(agents, queries):
        if msg is None:
            continue
        receivers = [b.id for b in agents if b.id != a.id]
        ledger.record(msg, receivers)
        for r in receivers:
            agents[r].inbox.append(msg)

    # phase 2: every supporter answers every query it received
    def answer(agent: Agent):
        return [(msg.sender, *agent.respond(msg)) for msg in sorted(agent.inbox, key=lambda m: m.sender)]

    replies: dict[int, list[SwarmMessage]] = defaultdict(list)
    plans = {}
    for agent, answers in zip(agents, run(answer, agents)):
        for target, msg, plan in answers:
            ledger.record_response(target, agent.id, msg, int(plan.matched.sum()), hs * ws)
            replies[target].append(msg)
            plans[(target, agent.id)] = plan

    # phase 3: fusion on each target
    fused_out = run(lambda t: agents[t].fuse(replies[t], fusion), targets)
    fused = {t: f for t, (f, _) in zip(targets, fused_out)}
    masks = {t: m for t, (_, m) in zip(targets, fused_out)}
    log = [rec for a in agents for rec in a.log]
    return RoundResult(masks, fused, ledger, log, plans)


def check_ledger(result: RoundResult, sample: SceneSample, model: HandshakeModel) -> list[str]:
    """Differences between the logged ledger and :func:`ledger_predict`; empty when exact."""
    H, W = sample.view_shape
    C = model.world.n_classes
    hs, ws = model.world.feat_rows, model.world.feat_cols
    Q = model.cfg.query_dim
    led = result.ledger
    problems = []
    for t, count in led.query_scalars.items():
        want = ledger_predict(H, W, C, hs, ws, Q, sample.n_agents, 0)["target_tx"]
        if count != want:
            problems.append(f"query of {t}: {count} != {want}")
    for (t, s), r in led.selection.items():
        pred = ledger_predict(H, W, C, hs, ws, Q, sample.n_agents, r)
        want = pred["support_tx"] + pred["support_confidence"]
        if led.response_scalars[(t, s)] != want:
            problems.append(f"response {s}->{t}: {led.response_scalars[(t, s)]} != {want}")
    expected_total = sum(led.query_scalars.values()) + sum(led.response_scalars.values())
    if led.total_scalars != expected_total:
        problems.append(f"total {led.total_scalars} != {expected_total}")
    return problems


def agent_compute_profile(log: list[OpRecord]) -> dict:
    """Step counts and multiply-accumulate share per role and per agent."""
    steps: dict[str, Counter] = defaultdict(Counter)
    macs: Counter = Counter()
    per_agent: dict[int, Counter] = defaultdict(Counter)
    for rec in log:
        steps[rec.role][rec.step] += 1
        macs[rec.role] += rec.macs
        per_agent[rec.agent][rec.step] += 1
    total = sum(macs.values()) or 1
    return {
        "steps": {role: dict(c) for role, c in sorted(steps.items())},
        "macs": dict(macs),
        "mac_fraction": {role: macs[role] / total for role in macs},
        "per_agent": {a: dict(c) for a, c in sorted(per_agent.items())},
    }
