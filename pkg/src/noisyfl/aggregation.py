"""Server-side model combination rules.

FedAvg and the distance-aware rule weight by client sample counts; Krum,
coordinate-wise Median and TrimmedMean follow their count-based
definitions and ignore sample counts.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError
from .model import ModelParams, l2_distance, unflatten


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ModelParams
    n_samples: int
    clean: bool = True


def _validate(updates):
    if not updates:
        raise InvalidInputError("aggregation input is empty")
    shapes = updates[0].params.shapes()
    for u in updates:
        if u.params.shapes() != shapes:
            raise InvalidInputError("aggregation inputs have mismatched shapes")
        if u.n_samples < 1:
            raise InvalidInputError(f"client {u.client_id} reports n_samples < 1")
    return shapes


def _weighted_mean(updates, weights) -> ModelParams:
    shapes = updates[0].params.shapes()
    flat = np.stack([u.params.flatten() for u in updates])
    return unflatten(shapes, weights @ flat)


def fedavg(updates) -> ModelParams:
    """Coordinate-wise mean weighted by each client's sample count."""
    _validate(updates)
    n = np.array([u.n_samples for u in updates], dtype=np.float64)
    return _weighted_mean(updates, n / n.sum())


def da_aggregate(updates) -> ModelParams:
    """Distance-aware mean: noisy clients are down-weighted by e^{-D}.

    A clean client has distance 0; a noisy client's distance is the minimum
    parameter distance to any clean client, normalised by the largest such
    distance. Weights are n_i * exp(-D_i), renormalised. Without any clean
    client the rule falls back to plain FedAvg with a warning.
    """
    _validate(updates)
    clean = [u for u in updates if u.clean]
    if not clean:
        warnings.warn("no clean clients in aggregation input; falling back to fedavg")
        return fedavg(updates)
    d = np.zeros(len(updates))
    for i, u in enumerate(updates):
        if not u.clean:
            d[i] = min(l2_distance(u.params, c.params) for c in clean)
    d_max = d.max()
    normalized = d / d_max if d_max > 0 else d
    raw = np.array([u.n_samples for u in updates], dtype=np.float64) * np.exp(-normalized)
    return _weighted_mean(updates, raw / raw.sum())


def krum(updates, ratio: float) -> ModelParams:
    """Return the input model with the smallest sum of squared distances to
    its n - f - 2 nearest peers, f = floor(ratio * n); ties pick the lowest
    client id."""
    _validate(updates)
    n = len(updates)
    if n < 3:
        raise InvalidInputError(f"krum needs at least 3 clients, got {n}")
    f = int(np.floor(ratio * n))
    n_neighbors = n - f - 2
    if n_neighbors < 1:
        raise ConfigError(f"krum infeasible: n={n}, f={f} leaves {n_neighbors} neighbors")
    flat = np.stack([u.params.flatten() for u in updates])
    diff = flat[:, None, :] - flat[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:n_neighbors].sum()
    order = sorted(range(n), key=lambda i: (scores[i], updates[i].client_id))
    return updates[order[0]].params.copy()


def coordinate_median(updates) -> ModelParams:
    """Per-coordinate median; even counts average the two middle values."""
    shapes = _validate(updates)
    flat = np.stack([u.params.flatten() for u in updates])
    return unflatten(shapes, np.median(flat, axis=0))


def trimmed_mean(updates, trim_count: int = 1) -> ModelParams:
    """Per coordinate, drop the trim_count largest and smallest values and
    average the rest."""
    shapes = _validate(updates)
    n = len(updates)
    if trim_count < 0 or n <= 2 * trim_count:
        raise ConfigError(f"trimmed_mean infeasible: n={n}, trim_count={trim_count}")
    flat = np.sort(np.stack([u.params.flatten() for u in updates]), axis=0)
    kept = flat[trim_count : n - trim_count]
    return unflatten(shapes, kept.mean(axis=0))


AGGREGATORS = ("fedavg", "da", "krum", "median", "trimmed_mean")


def aggregate(rule: str, updates, krum_ratio: float = 0.3, trim_count: int = 1) -> ModelParams:
    """Dispatch on the configured rule name."""
    if rule == "fedavg":
        return fedavg(updates)
    if rule == "da":
        return da_aggregate(updates)
    if rule == "krum":
        return krum(updates, krum_ratio)
    if rule == "median":
        return coordinate_median(updates)
    if rule == "trimmed_mean":
        return trimmed_mean(updates, trim_count)
    raise ConfigError(f"unknown aggregator {rule!r}; choose one of {AGGREGATORS}")
