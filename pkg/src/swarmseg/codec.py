"""Query/key compression and the supporting-side query-key transform.

The target squeezes its feature map to ``Q`` channels and broadcasts it; each
supporting agent lifts the received query to ``K`` channels with a bias-free
1x1 map so it can be compared against its own ``K``-channel key.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import Conv, ConvStack, ParamBundle, add_conv


@dataclass
class QueryMap:
    q: np.ndarray  # (Hs, Ws, Q)
    agent_id: int

    @property
    def scalar_count(self) -> int:
        return int(self.q.size)


@dataclass
class KeyMap:
    k: np.ndarray  # (Hs, Ws, K)
    agent_id: int


@dataclass
class ComparableMap:
    p: np.ndarray  # (Hs, Ws, K)
    target: int
    support: int


def init_codec(
    params: ParamBundle,
    rng: np.random.Generator,
    feature_dim: int,
    query_dim: int,
    key_dim: int,
    init: str = "glorot",
    tied: bool = True,
) -> None:
    """Register encoder and transform weights.

    With ``tied`` the key encoder starts as ``transform o query encoder``, so
    two views of the same patch are at distance exactly 0 from the first step.
    """
    if query_dim > key_dim:
        raise ConfigError(f"query dim {query_dim} exceeds key dim {key_dim}")
    mid = max(feature_dim // 2, 1)
    add_conv(params, "query.conv1", feature_dim, mid, rng, init=init)
    add_conv(params, "query.conv2", mid, query_dim, rng, init=init)
    add_conv(params, "key.conv1", feature_dim, mid, rng, init=init)
    add_conv(params, "key.conv2", mid, key_dim, rng, init=init)
    add_conv(params, "qk.transform", query_dim, key_dim, rng, bias=False, init=init)
    if tied:
        tie_key_encoder(params)


def tie_key_encoder(params: ParamBundle) -> None:
    """Set the key encoder to ``transform o query encoder`` (exact on every input)."""
    t = params["qk.transform.weight"].value[0]
    params["key.conv1.weight"].value[...] = params["query.conv1.weight"].value
    params["key.conv1.bias"].value[...] = params["query.conv1.bias"].value
    params["key.conv2.weight"].value[...] = params["query.conv2.weight"].value @ t
    params["key.conv2.bias"].value[...] = params["query.conv2.bias"].value @ t


def fold_tied_grads(params: ParamBundle) -> None:
    """Move key-encoder gradients onto the query encoder and transform.

    Valid while the key encoder is tied (see :func:`tie_key_encoder`): the
    chain rule through ``key.conv2 = query.conv2 @ T`` and ``key.conv1 =
    query.conv1``. Key gradients are zeroed afterwards.
    """
    t = params["qk.transform.weight"]
    q1w, q1b = params["query.conv1.weight"], params["query.conv1.bias"]
    q2w, q2b = params["query.conv2.weight"], params["query.conv2.bias"]
    k1w, k1b = params["key.conv1.weight"], params["key.conv1.bias"]
    k2w, k2b = params["key.conv2.weight"], params["key.conv2.bias"]
    q1w.grad += k1w.grad
    q1b.grad += k1b.grad
    tt = t.value[0].T
    q2w.grad[0] += k2w.grad[0] @ tt
    q2b.grad[0] += k2b.grad[0] @ tt
    t.grad[0] += q2w.value[0].T @ k2w.grad[0] + q2b.value[0].T @ k2b.grad[0]
    for p in (k1w, k1b, k2w, k2b):
        p.grad[...] = 0.0


def calibrate_codec(params: ParamBundle, features: np.ndarray, eps: float = 1e-8) -> None:
    """Data-dependent init: standardize the query path on sample features, then re-tie.

    ``features`` is any ``(..., F)`` array of backbone feature fibres. Each
    layer's pre-activations are rescaled to unit variance and shifted to zero
    mean, so the comparable maps start centred instead of sharing one large
    common offset.
    """
    x = features.reshape(-1, features.shape[-1])
    if x.shape[0] < 2:
        raise ConfigError("need at least two feature fibres to calibrate")
    for i, name in enumerate(("query.conv1", "query.conv2")):
        w = params[f"{name}.weight"].value[0]
        pre = x @ w
        w /= pre.std(axis=0) + eps
        b = -(x @ w).mean(axis=0)
        params[f"{name}.bias"].value[0, 0] = b
        x = x @ w + b
        if i == 0:
            x = np.maximum(x, 0.0)
    tie_key_encoder(params)


def query_encoder(params: ParamBundle) -> ConvStack:
    return ConvStack(params, ["query.conv1", "query.conv2"])


def key_encoder(params: ParamBundle) -> ConvStack:
    return ConvStack(params, ["key.conv1", "key.conv2"])


def qk_transform(params: ParamBundle) -> Conv:
    return Conv(params, "qk.transform")


def encode_query(f: np.ndarray, params: ParamBundle, agent_id: int = 0) -> QueryMap:
    enc = query_encoder(params)
    if f.shape[-1] != enc.layers[0].in_channels:
        raise ConfigError(f"feature map has {f.shape[-1]} channels, encoder expects {enc.layers[0].in_channels}")
    return QueryMap(enc.forward(f)[0], agent_id)


def encode_key(f: np.ndarray, params: ParamBundle, agent_id: int = 0) -> KeyMap:
    enc = key_encoder(params)
    if f.shape[-1] != enc.layers[0].in_channels:
        raise ConfigError(f"feature map has {f.shape[-1]} channels, encoder expects {enc.layers[0].in_channels}")
    return KeyMap(enc.forward(f)[0], agent_id)


def query_key_transform(q: QueryMap, params: ParamBundle, support: int = 0) -> ComparableMap:
    layer = qk_transform(params)
    if q.q.shape[-1] != layer.in_channels:
        raise ConfigError(
            f"query has {q.q.shape[-1]} channels but the transform was trained for {layer.in_channels}"
        )
    return ComparableMap(layer.forward(q.q), q.agent_id, support)
