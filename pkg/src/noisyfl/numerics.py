"""Stable elementary probabilistic operations and the deterministic seeding scheme.

Everything here is pure and operates on 64-bit floats. Probabilities are
clamped to [PROB_FLOOR, 1] before any logarithm so that losses stay finite
even for saturated distributions.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

# Clamp applied to probabilities before taking logs.
PROB_FLOOR = 1e-12


def log_clamped(p: np.ndarray) -> np.ndarray:
    """log(max(p, PROB_FLOOR)), elementwise."""
    return np.log(np.maximum(p, PROB_FLOOR))


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    Accepts a single logit vector or a batch of rows; max-subtraction keeps
    the exponentials bounded, so inputs like [1000, 0] do not overflow.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise InvalidInputError("softmax needs at least one logit")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax received non-finite logits")
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(p, target) -> float:
    """-sum(target * log p) with clamped logs.

    `p` and `target` are probability vectors of the same length; the result
    is >= 0 whenever `target` is one-hot.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidInputError(f"length mismatch: p has shape {p.shape}, target {t.shape}")
    return float(-np.sum(t * log_clamped(p)))


def entropy(p) -> float:
    """Shannon entropy -sum(p log p) in nats; 0*log 0 is treated as 0."""
    p = np.asarray(p, dtype=np.float64)
    return float(-np.sum(p * log_clamped(p)))


def logit_adjust(logits, prior) -> np.ndarray:
    """Shift logits by log(prior), the class-prior adjustment for imbalanced data."""
    z = np.asarray(logits, dtype=np.float64)
    pi = np.asarray(prior, dtype=np.float64)
    if np.any(pi <= 0.0):
        raise InvalidInputError("prior has non-positive entries; smooth it first")
    return z + np.log(pi)


def check_prob_vector(p, tol: float = 1e-9) -> np.ndarray:
    """Validate that `p` is a probability vector; returns it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError("probability vector must be 1-D and nonempty")
    if np.any(p < -tol) or np.any(p > 1.0 + tol):
        raise InvalidInputError("probability entries outside [0, 1]")
    if abs(float(np.sum(p)) - 1.0) > tol:
        raise InvalidInputError(f"probabilities sum to {np.sum(p)}, not 1")
    return p


@dataclass(frozen=True)
class SeedSpec:
    """Deterministic seed derivation tree.

    A stream is identified by the experiment seed plus a derivation path of
    (round, client, purpose) parts. Identical (seed, path) pairs always yield
    the identical generator; distinct paths yield independent streams. The
    child seed is a hash of the path, so streams do not depend on the order
    in which they are created or consumed.
    """

    experiment_seed: int
    path: tuple = ()

    def child(self, *parts) -> "SeedSpec":
        return SeedSpec(self.experiment_seed, self.path + tuple(parts))

    def rng(self) -> np.random.Generator:
        key = repr((self.experiment_seed,) + self.path).encode("utf-8")
        digest = hashlib.blake2b(key, digest_size=8).digest()
        return np.random.default_rng(int.from_bytes(digest, "little"))
