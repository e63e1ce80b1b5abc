"""Server-side aggregation of round updates.

Every rule first orders updates by device id, which makes the output
independent of input order and gives all tie-breaks a fixed meaning: the
lower device id wins. Non-finite deltas are rejected outright.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import NonFiniteError, RoundUpdate

KINDS = ("mean", "median", "krum", "multi_krum", "clipping", "k_norm", "k_loss", "tilted")


class TooFewUpdates(ValueError):
    pass


@dataclass(frozen=True)
class AggregatorSpec:
    """``f``/``k`` of ``None`` means: use the expected number of selected adversaries."""

    kind: str = "mean"
    f: int | None = None
    k: int | None = None
    t: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown aggregator {self.kind!r}")
        for name in ("f", "k"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.kind == "tilted" and not self.t > 0:
            raise ValueError("tilt t must be > 0")

    @property
    def label(self) -> str:
        if self.kind == "tilted":
            return f"tilted(t={self.t:g})"
        return self.kind


def _sorted(updates) -> list[RoundUpdate]:
    if not updates:
        raise TooFewUpdates("no updates to aggregate")
    ups = sorted(updates, key=lambda u: u.device_id)
    for u in ups:
        if not np.isfinite(u.delta).all():
            raise NonFiniteError(f"non-finite update from device {u.device_id}")
    return ups


def _stack(ups) -> np.ndarray:
    return np.stack([u.delta for u in ups])


def agg_mean(updates, weights=None) -> np.ndarray:
    ups = _sorted(updates)
    D = _stack(ups)
    if weights is None:
        return D.sum(axis=0) / len(ups)
    order = np.argsort([u.device_id for u in updates], kind="stable")
    w = np.asarray(weights, dtype=np.float64)[order]
    if w.shape[0] != len(ups) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per update, with positive sum")
    return (w / w.sum()) @ D


def agg_coord_median(updates) -> np.ndarray:
    # np.median averages the two middle order statistics for even counts
    return np.median(_stack(_sorted(updates)), axis=0)


def krum_scores(updates, f: int) -> tuple[list[int], np.ndarray]:
    """Device ids (ascending) and their Krum scores."""
    ups = _sorted(updates)
    m = len(ups)
    if m < f + 3:
        raise TooFewUpdates(f"Krum with f={f} needs at least {f + 3} updates, got {m}")
    D = _stack(ups)
    sq = np.sum((D[:, None, :] - D[None, :, :]) ** 2, axis=-1)
    n_near = m - f - 2
    scores = np.empty(m)
    for i in range(m):
        others = np.delete(sq[i], i)
        scores[i] = np.sort(others)[:n_near].sum()
    return [u.device_id for u in ups], scores


def _krum_order(updates, f):
    ups = _sorted(updates)
    ids, scores = krum_scores(ups, f)
    # lexsort: primary key scores, ties by id
    order = np.lexsort((np.asarray(ids), scores))
    return ups, order


def krum_select(updates, f: int) -> int:
    ups, order = _krum_order(updates, f)
    return ups[order[0]].device_id


def agg_krum(updates, f: int) -> np.ndarray:
    ups, order = _krum_order(updates, f)
    return ups[order[0]].delta.copy()


def agg_multi_krum(updates, f: int, n_select: int | None = None) -> np.ndarray:
    """Mean of the ``n_select`` (default ``m - f``) updates with the lowest Krum scores."""
    ups = _sorted(updates)
    m = len(ups)
    if n_select is None:
        n_select = m - f
    if not 1 <= n_select <= m:
        raise ValueError(f"n_select must be in [1, {m}], got {n_select}")
    if f == 0 and n_select == m:
        return agg_mean(ups)
    _, order = _krum_order(ups, f)
    chosen = [ups[i] for i in sorted(order[:n_select])]
    return agg_mean(chosen)


def clip_updates(updates) -> tuple[list[RoundUpdate], float]:
    ups = _sorted(updates)
    threshold = float(np.median([u.norm for u in ups]))
    clipped = []
    for u in ups:
        if u.norm > threshold:
            clipped.append(RoundUpdate(u.device_id, u.delta * (threshold / u.norm), u.train_loss))
        else:
            clipped.append(u)
    return clipped, threshold


def agg_clipping(updates) -> np.ndarray:
    clipped, _ = clip_updates(updates)
    return agg_mean(clipped)


def agg_k_norm(updates, k: int) -> np.ndarray:
    ups = _sorted(updates)
    if len(ups) <= k:
        raise TooFewUpdates(f"k-norm with k={k} needs more than {k} updates, got {len(ups)}")
    ranked = sorted(ups, key=lambda u: (-u.norm, u.device_id))
    return agg_mean(ranked[k:])


def agg_k_loss(updates, k: int) -> np.ndarray:
    """The single delta whose reported train loss ranks (k+1)-th largest."""
    ups = _sorted(updates)
    if len(ups) < k + 1:
        raise TooFewUpdates(f"k-loss with k={k} needs at least {k + 1} updates, got {len(ups)}")
    ranked = sorted(ups, key=lambda u: (-u.train_loss, u.device_id))
    return ranked[k].delta.copy()


def tilted_weights(losses, t: float) -> np.ndarray:
    z = t * np.asarray(losses, dtype=np.float64)
    return np.exp(z - logsumexp(z))


def agg_tilted(updates, t: float) -> np.ndarray:
    ups = _sorted(updates)
    w = tilted_weights([u.train_loss for u in ups], t)
    return w @ _stack(ups)


def expected_malicious(fraction: float, num_selected: int) -> int:
    return int(math.floor(fraction * num_selected + 0.5))


def aggregate(spec: AggregatorSpec, updates, malicious_fraction: float = 0.0) -> np.ndarray:
    """Dispatch on ``spec``; unset f/k default to round(fraction * |S_t|)."""
    m = len(updates)
    auto = expected_malicious(malicious_fraction, m)
    kind = spec.kind
    if kind == "mean":
        return agg_mean(updates)
    if kind == "median":
        return agg_coord_median(updates)
    if kind == "krum":
        return agg_krum(updates, auto if spec.f is None else spec.f)
    if kind == "multi_krum":
        return agg_multi_krum(updates, auto if spec.f is None else spec.f)
    if kind == "clipping":
        return agg_clipping(updates)
    if kind == "k_norm":
        return agg_k_norm(updates, auto if spec.k is None else spec.k)
    if kind == "k_loss":
        return agg_k_loss(updates, auto if spec.k is None else spec.k)
    return agg_tilted(updates, spec.t)
