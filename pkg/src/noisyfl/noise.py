"""Label corruption: transition matrices, per-client rate schedules, injection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Partition
from .errors import InvalidInputError
from .numerics import SeedSpec

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"

ROW_SUM_TOL = 1e-9


def _check_rate(rate: float):
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(f"noise rate {rate} outside [0, 1]")


def symmetric_matrix(rate: float, n_classes: int) -> np.ndarray:
    """Keep the true class with probability 1-rate, spread rate uniformly
    over the other classes."""
    _check_rate(rate)
    if n_classes < 2:
        raise InvalidInputError("transition matrix needs at least 2 classes")
    m = np.full((n_classes, n_classes), rate / (n_classes - 1))
    np.fill_diagonal(m, 1.0 - rate)
    return m


def asymmetric_matrix(rate: float, n_classes: int) -> np.ndarray:
    """Pairwise flip: class i sends probability `rate` to class (i+1) mod M."""
    _check_rate(rate)
    if n_classes < 2:
        raise InvalidInputError("transition matrix needs at least 2 classes")
    m = np.eye(n_classes) * (1.0 - rate)
    for i in range(n_classes):
        m[i, (i + 1) % n_classes] += rate
    return m


def linear_rates(n_clients: int, max_rate: float) -> np.ndarray:
    """Per-client rates rising linearly from 0 to max_rate with the client index."""
    _check_rate(max_rate)
    if n_clients < 1:
        raise InvalidInputError("need at least one client")
    if n_clients == 1:
        return np.zeros(1)
    return max_rate * np.arange(n_clients) / (n_clients - 1)


@dataclass(frozen=True)
class NoiseAssignment:
    client_id: int
    pattern: str
    rate: float


@dataclass(frozen=True)
class NoisePlan:
    """One (pattern, rate) entry per client."""

    entries: tuple

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.pattern not in (SYMMETRIC, ASYMMETRIC):
                raise InvalidInputError(f"unknown noise pattern {e.pattern!r}")
            _check_rate(e.rate)
            if e.client_id in seen:
                raise InvalidInputError(f"duplicate client {e.client_id} in noise plan")
            seen.add(e.client_id)

    def rate_of(self, client_id: int) -> float:
        for e in self.entries:
            if e.client_id == client_id:
                return e.rate
        raise InvalidInputError(f"client {client_id} not covered by the noise plan")


def uniform_pattern_plan(n_clients: int, max_rate: float, pattern: str) -> NoisePlan:
    rates = linear_rates(n_clients, max_rate)
    return NoisePlan(
        tuple(NoiseAssignment(k, pattern, float(rates[k])) for k in range(n_clients))
    )


def mixed_plan(n_clients: int, max_rate: float) -> NoisePlan:
    """First ceil(N/2) clients symmetric, the rest asymmetric; linear rates."""
    if n_clients < 2:
        raise InvalidInputError("mixed plan needs at least 2 clients")
    rates = linear_rates(n_clients, max_rate)
    half = (n_clients + 1) // 2
    entries = tuple(
        NoiseAssignment(k, SYMMETRIC if k < half else ASYMMETRIC, float(rates[k]))
        for k in range(n_clients)
    )
    return NoisePlan(entries)


@dataclass(frozen=True)
class InjectionReport:
    client_id: int
    planned_rate: float
    pattern: str
    n_samples: int
    flips: int

    @property
    def realized_rate(self) -> float:
        return self.flips / self.n_samples if self.n_samples else 0.0


def apply_noise(ds: Dataset, indices, matrix: np.ndarray, seed: SeedSpec) -> int:
    """Resample observed labels from each sample's true-label matrix row.

    Returns the realized flip count. Features and true labels are never
    touched; this is the only mutation a Dataset undergoes and must happen
    once, before training starts.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (ds.n_classes, ds.n_classes):
        raise InvalidInputError(
            f"matrix shape {matrix.shape} does not match class count {ds.n_classes}"
        )
    if np.any(matrix < 0) or np.any(np.abs(matrix.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise InvalidInputError("transition matrix rows must be stochastic")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return 0
    rng = seed.rng()
    cum = np.cumsum(matrix, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(indices.size)
    rows = cum[ds.true[indices]]
    new_labels = (u[:, None] < rows).argmax(axis=1)
    ds.observed[indices] = new_labels
    return int(np.sum(new_labels != ds.true[indices]))


def apply_plan(ds: Dataset, partition: Partition, plan: NoisePlan, seed: SeedSpec):
    """Corrupt each client's slice per the plan; returns per-client reports."""
    builders = {SYMMETRIC: symmetric_matrix, ASYMMETRIC: asymmetric_matrix}
    reports = []
    for entry in plan.entries:
        indices = partition.client_indices[entry.client_id]
        matrix = builders[entry.pattern](entry.rate, ds.n_classes)
        flips = apply_noise(ds, indices, matrix, seed.child("noise", entry.client_id))
        reports.append(
            InjectionReport(entry.client_id, entry.rate, entry.pattern, len(indices), flips)
        )
    return reports
