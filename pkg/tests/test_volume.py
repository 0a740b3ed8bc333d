import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmseg.errors import ConfigError
from swarmseg.volume import build_volume, compute_volume, no_match_scores, to_distribution


def quad_loop_volume(p, k):
    """Brute-force Eq.-1 logits plus the no-match channel, scalar by scalar."""
    ht, wt, K = p.shape
    hs, ws, _ = k.shape
    out = np.zeros((ht, wt, hs * ws + 1))
    for x in range(ht):
        for y in range(wt):
            for xs in range(hs):
                for ys in range(ws):
                    out[x, y, xs * ws + ys] = -math.sqrt(sum((p[x, y, c] - k[xs, ys, c]) ** 2 for c in range(K)))
            out[x, y, -1] = -math.sqrt(sum(p[x, y, c] ** 2 for c in range(K)))
    return out


def test_exact_pair_is_zero(rng):
    p = rng.standard_normal((2, 2, 3))
    k = rng.standard_normal((2, 2, 3))
    k[0, 0] = p[0, 0]
    assert compute_volume(p, k)[0, 0, 0] == 0.0


def test_shape_8x8():
    assert build_volume(np.ones((8, 8, 4)), np.ones((8, 8, 4))).logits.shape == (8, 8, 65)


def test_random_3x3_oracle(rng):
    p, k = rng.standard_normal((3, 3, 4)), rng.standard_normal((3, 3, 4))
    np.testing.assert_allclose(build_volume(p, k).logits, quad_loop_volume(p, k), rtol=0, atol=1e-12)


def test_no_match_scores():
    assert no_match_scores(np.zeros((1, 1, 2)))[0, 0] == 0.0
    assert no_match_scores(np.array([[[3.0, 4.0]]]))[0, 0] == -5.0


def test_no_match_norm_oracle(rng):
    p = rng.standard_normal((3, 2, 5))
    want = [[-math.sqrt(sum(v * v for v in p[i, j])) for j in range(2)] for i in range(3)]
    np.testing.assert_allclose(no_match_scores(p), want, rtol=0, atol=1e-12)


def test_channel_mismatch():
    with pytest.raises(ConfigError):
        compute_volume(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))


def test_decode():
    vol = build_volume(np.ones((2, 3, 2)), np.ones((2, 3, 2)))
    assert vol.decode(4) == (1, 1)
    assert vol.decode(6) is None


def test_exact_match_dominance(rng):
    k = rng.standard_normal((3, 3, 4)) * 3
    p = np.zeros((1, 1, 4))
    p[0, 0] = k[1, 2]
    dist = to_distribution(build_volume(p, k).logits)
    assert np.argmax(dist[0, 0]) == 1 * 3 + 2


def test_permutation_equivariance(rng):
    p, k = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 3, 3))
    perm = rng.permutation(6)
    kp = k.reshape(6, 3)[perm].reshape(2, 3, 3)
    a = build_volume(p, k).logits
    b = build_volume(p, kp).logits
    np.testing.assert_array_equal(b[..., :6], a[..., :6][..., perm])
    np.testing.assert_array_equal(b[..., 6], a[..., 6])


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_logit_upper_bound(seed):
    r = np.random.default_rng(seed)
    p, k = r.standard_normal((2, 3, 3)), r.standard_normal((3, 2, 3))
    p[0, 0] = 0.0
    v = build_volume(p, k).logits
    assert (v <= 0).all()
    assert v[0, 0, -1] == 0.0
    assert (v[..., -1].ravel()[1:] < 0).all()


def test_distribution_sums_to_one(rng):
    v = build_volume(rng.standard_normal((3, 3, 2)), rng.standard_normal((3, 3, 2))).logits
    assert np.all(np.abs(to_distribution(v).sum(-1) - 1) <= 1e-9)


@pytest.mark.parametrize("metric", ["l1", "cosine"])
def test_other_metrics_are_nonpositive(metric, rng):
    v = build_volume(rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3)), metric).logits
    assert v.shape == (2, 2, 5) and (v <= 1e-12).all()


def test_unknown_metric():
    with pytest.raises(ConfigError):
        build_volume(np.ones((1, 1, 1)), np.ones((1, 1, 1)), "hamming")
