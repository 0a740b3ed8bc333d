"""Dense correspondence volumes between a target and a supporting agent.

Every target cell is scored against every supporting cell by negated feature
distance; a final channel scores the target cell against the zero vector
("no match"). Channel ``c < Hs*Ws`` decodes to supporting cell
``(c // Ws, c % Ws)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import channel_softmax

_EPS = 1e-12


@dataclass
class CorrespondenceVolume:
    logits: np.ndarray  # (Ht, Wt, Hs*Ws + 1)
    target: int = 0
    support: int = 0
    source_shape: tuple[int, int] = (0, 0)

    @property
    def no_match(self) -> int:
        return self.logits.shape[-1] - 1

    def decode(self, channel: int) -> tuple[int, int] | None:
        if channel == self.no_match:
            return None
        return divmod(int(channel), self.source_shape[1])


def _flat(t: np.ndarray) -> np.ndarray:
    return t.reshape(-1, t.shape[-1])


def pairwise_distance(p: np.ndarray, k: np.ndarray, metric: str = "l2") -> np.ndarray:
    """Distance of each target fiber to each key fiber: (Ht*Wt, Hs*Ws)."""
    a, b = _flat(p), _flat(k)
    if metric == "l2":
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt((diff * diff).sum(-1))
    if metric == "l1":
        return np.abs(a[:, None, :] - b[None, :, :]).sum(-1)
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1, keepdims=True)
        nb = np.linalg.norm(b, axis=1, keepdims=True)
        return 1.0 - (a @ b.T) / np.maximum(na * nb.T, _EPS)
    raise ConfigError(f"unknown metric {metric!r}")


def zero_distance(p: np.ndarray, metric: str = "l2") -> np.ndarray:
    """Distance of each fiber to the zero vector, shaped (Ht, Wt)."""
    if metric == "l2":
        return np.linalg.norm(p, axis=-1)
    if metric == "l1":
        return np.abs(p).sum(-1)
    if metric == "cosine":
        # cosine similarity to the zero vector is taken as 0
        return np.ones(p.shape[:-1])
    raise ConfigError(f"unknown metric {metric!r}")


def compute_volume(p: np.ndarray, k: np.ndarray, metric: str = "l2") -> np.ndarray:
    """Negated pairwise distances, (Ht, Wt, Hs*Ws) without the no-match channel."""
    if p.shape[-1] != k.shape[-1]:
        raise ConfigError(f"comparable map has {p.shape[-1]} channels, key map has {k.shape[-1]}")
    d = pairwise_distance(p, k, metric)
    return -d.reshape(p.shape[0], p.shape[1], -1)


def no_match_scores(p: np.ndarray, metric: str = "l2") -> np.ndarray:
    return -zero_distance(p, metric)


def build_volume(
    p: np.ndarray, k: np.ndarray, metric: str = "l2", target: int = 0, support: int = 0
) -> CorrespondenceVolume:
    """Full volume: pairwise logits with the no-match score appended last."""
    logits = np.concatenate([compute_volume(p, k, metric), no_match_scores(p, metric)[..., None]], axis=-1)
    return CorrespondenceVolume(logits, target, support, (k.shape[0], k.shape[1]))


def volume_backward(
    d_logits: np.ndarray, p: np.ndarray, k: np.ndarray, metric: str = "l2"
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`build_volume` logits w.r.t. ``p`` and ``k``."""
    a, b = _flat(p), _flat(k)
    g = d_logits.reshape(a.shape[0], -1)
    g_pair, g_none = g[:, :-1], g[:, -1]
    if metric == "l2":
        diff = a[:, None, :] - b[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        # subgradient 0 at coincident fibers
        w = -g_pair / np.where(dist > _EPS, dist, np.inf)
        da = w.sum(1, keepdims=True) * a - w @ b
        db = w.T.sum(1, keepdims=True) * b - w.T @ a
        norm = np.linalg.norm(a, axis=1, keepdims=True)
        da -= g_none[:, None] * a / np.where(norm > _EPS, norm, np.inf)
    elif metric == "l1":
        s = np.sign(a[:, None, :] - b[None, :, :]) * (-g_pair)[..., None]
        da = s.sum(1) - g_none[:, None] * np.sign(a)
        db = -s.sum(0)
    elif metric == "cosine":
        na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), _EPS)
        nb = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), _EPS)
        ua, ub = a / na, b / nb
        cos = ua @ ub.T
        # logits = cos - 1, so dL/dcos = g_pair
        da = (g_pair @ ub - (g_pair * cos).sum(1, keepdims=True) * ua) / na
        db = (g_pair.T @ ua - (g_pair * cos).sum(0)[:, None] * ub) / nb
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    return da.reshape(p.shape), db.reshape(k.shape)


def to_distribution(logits: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return channel_softmax(logits, scale)
