"""Residual convolutional smoother for correspondence logits.

``out = v + s * net(v / s)`` where ``net`` is conv3(relu(conv2(relu(conv1(.)))))
with 3x3 same-padded convolutions and ``s = -v[..., -1]`` is the magnitude of
each cell's no-match score. The branch therefore sees distances relative to
the query norm and the whole map is scale-equivariant. The last layer starts
at zero, so an untrained smoother is exactly the identity map.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError
from .grid import ConvStack, ParamBundle, add_conv, channel_log_softmax, glorot_uniform


def init_smoother(
    params: ParamBundle, rng: np.random.Generator, channels: int, width: int = 64, prefix: str = "smoother"
) -> None:
    add_conv(params, f"{prefix}.conv1", channels, width, rng, ksize=3)
    add_conv(params, f"{prefix}.conv2", width, width, rng, ksize=3)
    add_conv(params, f"{prefix}.conv3", width, channels, rng, ksize=3, init="zeros")


SCALE_FLOOR = 1e-6


def match_detector_init(
    params: ParamBundle,
    rng: np.random.Generator,
    alpha: float = 20.0,
    theta: float = 0.05,
    prefix: str = "smoother",
) -> None:
    """Re-initialise the smoother for infilling.

    Hidden unit ``c`` of the first layer becomes ``relu(alpha * (u_c + theta))``
    on the centre tap, which fires only when source cell ``c`` is a (near)
    exact match for the scaled score ``u``. The second layer is redrawn and the
    last zeroed, so the map starts as the identity again and only has to learn
    how neighbouring matches vote for the centre cell.
    """
    w1 = params[f"{prefix}.conv1.weight"].value
    taps, cin, width = w1.shape
    n = min(cin - 1, width)
    w1[...] = 0.0
    w1[taps // 2, np.arange(n), np.arange(n)] = alpha
    b1 = params[f"{prefix}.conv1.bias"].value
    b1[...] = 0.0
    b1[..., :n] = alpha * theta
    w2 = params[f"{prefix}.conv2.weight"].value
    w2[...] = glorot_uniform(rng, w2.shape)
    params[f"{prefix}.conv2.bias"].value[...] = 0.0
    params[f"{prefix}.conv3.weight"].value[...] = 0.0
    params[f"{prefix}.conv3.bias"].value[...] = 0.0


class Smoother:
    def __init__(self, params: ParamBundle, prefix: str = "smoother"):
        self.net = ConvStack(params, [f"{prefix}.conv{i}" for i in (1, 2, 3)])

    @property
    def channels(self) -> int:
        return self.net.layers[0].in_channels

    def forward(self, logits: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        if logits.shape[-1] != self.channels:
            raise ConfigError(
                f"volume has {logits.shape[-1]} channels, smoother was built for {self.channels}"
            )
        s = np.maximum(-logits[..., -1:], SCALE_FLOOR)
        delta, acts = self.net.forward(logits / s)
        return logits + s * delta, acts + [s, delta]

    def backward(self, d_out: np.ndarray, acts: list[np.ndarray]) -> np.ndarray:
        *acts, s, delta = acts
        u = acts[0]
        d_u = self.net.backward(d_out * s, acts)
        r = d_u / s
        d_in = d_out + r
        d_s = (d_out * delta).sum(-1, keepdims=True) - (r * u).sum(-1, keepdims=True)
        d_in[..., -1:] -= d_s * (s > SCALE_FLOOR)
        return d_in


def smooth(logits: np.ndarray, params: ParamBundle) -> np.ndarray:
    return Smoother(params).forward(logits)[0]


def correspondence_loss(logits: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-cell cross-entropy against ground-truth channel indices.

    The no-match channel (last) is an ordinary class. Returns the loss and
    its gradient w.r.t. ``logits``.
    """
    n_ch = logits.shape[-1]
    if gt.shape != logits.shape[:-1]:
        raise ConfigError(f"gt shape {gt.shape} does not match volume {logits.shape}")
    if gt.min() < 0 or gt.max() >= n_ch:
        raise DataError(f"ground-truth correspondence outside [0, {n_ch - 1}]")
    logp = channel_log_softmax(logits)
    idx = gt[..., None].astype(np.int64)
    count = gt.size
    loss = -float(np.take_along_axis(logp, idx, -1).sum()) / count
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, -1) - 1.0, -1)
    return loss, grad / count


def corrupt_fibers(volumes: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Replace the match scores of a random ``frac`` of cells with uniform noise.

    ``volumes`` is (..., Ht, Wt, channels); noise for a volume is drawn from
    ``[min logit of that volume, 0]`` so it stays on the scale of real scores.
    The no-match score depends only on the target's own query and is kept.
    """
    if not 0.0 <= frac <= 1.0:
        raise ConfigError("corruption fraction must lie in [0, 1]")
    out = np.array(volumes, dtype=np.float64, copy=True)
    hit = rng.random(out.shape[:-1]) < frac
    lo = out.min(axis=(-3, -2, -1), keepdims=True)
    noise = rng.random(out.shape) * lo
    noise[..., -1] = out[..., -1]
    out[hit] = noise[hit]
    return out
