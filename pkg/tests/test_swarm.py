from fractions import Fraction

import numpy as np
import pytest

from swarmseg.errors import ConfigError, DataError
from swarmseg.fusion import WarpPlan, identity_plan
from swarmseg.model import infer_target
from swarmseg.swarm import (
    QUERY,
    BandwidthLedger,
    agent_compute_profile,
    assemble_warped,
    check_ledger,
    decode_query_msg,
    decode_response_msg,
    encode_query_msg,
    encode_response_msg,
    ledger_predict,
    run_round,
    target_fraction,
)
from swarmseg.world import Viewport, generate_world, render_sample

from conftest import TINY_WORLD

SUPPORT_STEPS = {"qk_transform", "cost_volume", "smooth", "warp_plan", "warp_response"}


def silence_matches(model):
    # a large no-match bias makes every supporter decline every cell
    model.params["smoother.conv3.bias"].value[..., -1] = 100.0


def scripted_sample(origins, rotations=None):
    world = generate_world(TINY_WORLD, 11)
    rotations = rotations or [0] * len(origins)
    vps = [Viewport(a, o, r, 32, 32) for a, (o, r) in enumerate(zip(origins, rotations))]
    return render_sample(world, vps, 4, 4)


class TestMessages:
    @pytest.mark.parametrize("wire", [2, 4, 8])
    def test_query_round_trip(self, rng, wire):
        q = rng.standard_normal((4, 4, 3))
        msg = encode_query_msg(2, q, wire)
        assert msg.kind == QUERY and msg.scalar_count == 48 and msg.scalar_bytes == 48 * wire
        sender, back = decode_query_msg(msg, wire)
        assert sender == 2
        np.testing.assert_allclose(back, q, rtol=2.0 ** -(10 if wire == 2 else 23))
        if wire == 8:
            np.testing.assert_array_equal(back, q)

    def test_response_round_trip(self, rng):
        src = rng.random((8, 8, 3))
        idx = np.array([[0, 4], [3, 4]])
        plan = WarpPlan(idx, np.array([[0.9, 0.1], [0.7, 0.2]]))
        msg = encode_response_msg(1, 0, plan, src, 8)
        assert msg.scalar_count == 2 * (16 * 3 + 1)
        resp = decode_response_msg(msg, 8)
        assert (resp.sender, resp.receiver) == (1, 0)
        np.testing.assert_array_equal(resp.cells, [[True, False], [True, False]])
        np.testing.assert_array_equal(resp.confidence, [0.9, 0.7])
        own = np.zeros_like(src)
        warped, conf = assemble_warped(resp, own)
        np.testing.assert_array_equal(warped[:4, :4], src[:4, :4])
        np.testing.assert_array_equal(warped[4:, :4], src[4:, 4:])
        assert not warped[:, 4:].any()
        np.testing.assert_array_equal(conf, [[0.9, 0.0], [0.7, 0.0]])

    def test_wrong_kind(self, rng):
        msg = encode_query_msg(0, rng.random((2, 2, 2)))
        with pytest.raises(DataError):
            decode_response_msg(msg)

    def test_bad_wire_width(self, rng):
        with pytest.raises(ConfigError):
            encode_query_msg(0, rng.random((2, 2, 2)), 3)

    def test_empty_response(self, rng):
        plan = WarpPlan(np.full((2, 2), 4), np.ones((2, 2)))
        msg = encode_response_msg(1, 0, plan, rng.random((4, 4, 2)))
        assert msg.scalar_count == 0
        assert decode_response_msg(msg).patches.shape == (0, 2, 2, 2)

    def test_identity_response_scalar_count(self, rng):
        msg = encode_response_msg(1, 0, identity_plan(4, 4), rng.random((32, 32, 4)))
        assert msg.scalar_count == 16 * (64 * 4 + 1)


class TestLedgerPredict:
    @pytest.mark.parametrize("q, frac", [(16, Fraction(1, 12)), (32, Fraction(1, 6)), (64, Fraction(1, 3))])
    def test_target_fraction(self, q, frac):
        assert target_fraction(256, 256, 32, 32, q) == frac

    def test_terms(self):
        pred = ledger_predict(64, 64, 6, 8, 8, 16, 6, Fraction(1, 4))
        assert pred == {
            "target_tx": 1024,
            "support_tx": 64 * 64 * 6 // 4,
            "support_confidence": 16,
            "naive": 5 * 64 * 64 * 3,
            "raw_image": 64 * 64 * 3,
        }

    def test_zero_selection(self):
        pred = ledger_predict(256, 256, 6, 32, 32, 64, 6, 0)
        assert pred["support_tx"] == 0 and pred["support_confidence"] == 0

    @pytest.mark.parametrize("args", [(0, 1, 1, 1, 1, 1, 2, 0), (1, 1, 1, 1, 1, 1, 2, Fraction(3, 2))])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            ledger_predict(*args)


def test_ledger_counts_broadcast_once(rng):
    led = BandwidthLedger(3)
    led.record(encode_query_msg(0, rng.random((2, 2, 2))), [1, 2])
    assert led.broadcasts == 1
    assert led.agents[0].tx_scalars == 8 and led.agents[1].rx_scalars == 8 and led.agents[2].rx_scalars == 8
    assert led.total_scalars == 8


class TestRound:
    def test_ledger_exact(self, tiny_model, tiny_samples):
        for sample in tiny_samples:
            result = run_round(sample, tiny_model)
            assert check_ledger(result, sample, tiny_model) == []
            for (t, s), r in result.ledger.selection.items():
                assert r == Fraction(int(result.plans[(t, s)].matched.sum()), 16)

    def test_disjoint_round(self, tiny_model):
        sample = scripted_sample([(0, 0), (32, 32)])
        assert (sample.correspondences[(0, 1)] == 16).all()
        silence_matches(tiny_model)
        result = run_round(sample, tiny_model)
        assert all(r == 0 for r in result.ledger.selection.values())
        assert all(v == 0 for v in result.ledger.response_scalars.values())
        for t in (0, 1):
            own = tiny_model.backbone.forward(sample.observations[t]).seg_distribution
            np.testing.assert_array_equal(result.fused[t], own)
            np.testing.assert_array_equal(result.masks[t], infer_target(tiny_model, sample, t).own_mask)
        assert check_ledger(result, sample, tiny_model) == []

    def test_sequential_equals_parallel(self, tiny_model, tiny_samples):
        a = run_round(tiny_samples[0], tiny_model, "soft", schedule="sequential")
        b = run_round(tiny_samples[0], tiny_model, "soft", schedule="parallel")
        for t in a.masks:
            np.testing.assert_array_equal(a.masks[t], b.masks[t])
            np.testing.assert_array_equal(a.fused[t], b.fused[t])
        assert a.ledger.to_dict() == b.ledger.to_dict()
        assert a.log_lines() == b.log_lines()

    def test_deterministic(self, tiny_model, tiny_samples):
        a = run_round(tiny_samples[1], tiny_model)
        b = run_round(tiny_samples[1], tiny_model)
        assert a.log_lines() == b.log_lines()
        for t in a.masks:
            np.testing.assert_array_equal(a.fused[t], b.fused[t])

    def test_placement(self, tiny_model, tiny_samples):
        sample = tiny_samples[0]
        result = run_round(sample, tiny_model)
        n = sample.n_agents
        for rec in result.log:
            if rec.step in SUPPORT_STEPS:
                assert rec.role == "supporting" and rec.agent == rec.support != rec.target
        for t in range(n):
            for s in range(n):
                if s == t:
                    continue
                steps = [r.step for r in result.log if r.target == t and r.support == s]
                assert sorted(steps) == sorted(SUPPORT_STEPS)
        prof = agent_compute_profile(result.log)
        assert "cost_volume" not in prof["steps"]["target"]
        assert set(prof["steps"]["target"]) == {"encode_query", "broadcast_query", "fuse"}
        assert prof["steps"]["supporting"]["cost_volume"] == n * (n - 1)

    def test_query_broadcast_once_per_target(self, tiny_model, tiny_samples):
        result = run_round(tiny_samples[0], tiny_model)
        n = tiny_samples[0].n_agents
        assert result.ledger.broadcasts == n
        assert sum(1 for r in result.log if r.step == "broadcast_query") == n

    def test_no_raw_pixels_on_the_wire(self, tiny_model, tiny_samples, monkeypatch):
        sample = tiny_samples[0]
        sent = []
        real = BandwidthLedger.record

        def spy(self, msg, receivers):
            sent.append(msg.payload)
            real(self, msg, receivers)

        monkeypatch.setattr(BandwidthLedger, "record", spy)
        run_round(sample, tiny_model)
        pixels = {obs.astype("<f4")[i, j].tobytes() for obs in sample.observations for i in range(0, 32, 3) for j in range(0, 32, 3)}
        for payload in sent:
            for off in range(0, len(payload) - 11):
                assert payload[off : off + 12] not in pixels

    def test_subset_of_targets(self, tiny_model, tiny_samples):
        result = run_round(tiny_samples[0], tiny_model, targets=[1])
        assert set(result.masks) == {1}
        assert set(result.plans) == {(1, 0), (1, 2)}
        assert result.ledger.broadcasts == 1

    def test_round_errors(self, tiny_model, tiny_samples):
        with pytest.raises(ConfigError):
            run_round(tiny_samples[0], tiny_model, "median")
        with pytest.raises(ConfigError):
            run_round(tiny_samples[0], tiny_model, targets=[7])
        with pytest.raises(ConfigError):
            run_round(tiny_samples[0], tiny_model, schedule="async")
        single = scripted_sample([(0, 0)])
        with pytest.raises(ConfigError):
            run_round(single, tiny_model)

    def test_save(self, tiny_model, tiny_samples, tmp_path):
        run_round(tiny_samples[0], tiny_model).save(tmp_path)
        assert {p.name for p in tmp_path.iterdir()} == {"masks.bin", "ledger.json", "oplog.jsonl"}
