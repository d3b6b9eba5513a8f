"""Noisy-client detection: two-component diagonal GMM over per-class losses.

Each client contributes a length-M vector of per-class mean losses; the N
vectors form a loss matrix. EM fits two diagonal-covariance Gaussians, the
component with the higher average loss is taken as the noisy cluster, and
each client is assigned by maximum responsibility. Degenerate fits (weight
collapse, or clusters whose mean losses are too close to carry signal)
fall back to tagging every client clean, with a warning.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFitWarning, InvalidInputError
from .numerics import SeedSpec

VAR_FLOOR = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 100
WEIGHT_COLLAPSE = 1e-6
# Two clusters are treated as carrying no noise signal when their mean
# losses differ by less than this fraction of log(M) (the uniform-guess CE).
DEGENERATE_GAP_FRACTION = 0.1

CLEAN = "clean"
NOISY = "noisy"


@dataclass
class GmmModel:
    weights: np.ndarray  # (2,)
    means: np.ndarray  # (2, M)
    variances: np.ndarray  # (2, M), diagonal
    log_likelihoods: list = field(default_factory=list)
    degenerate: bool = False


def _log_gaussian_rows(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var, axis=1)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True))).ravel()


def _pooled_fallback(x: np.ndarray) -> GmmModel:
    mean = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), VAR_FLOOR)
    return GmmModel(
        weights=np.array([0.5, 0.5]),
        means=np.stack([mean, mean.copy()]),
        variances=np.stack([var, var.copy()]),
        degenerate=True,
    )


def fit_gmm_2(
    loss_matrix,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
    var_floor: float = VAR_FLOOR,
    seed: SeedSpec | None = None,
) -> GmmModel:
    """EM fit of a two-component diagonal GMM to the N x M loss matrix.

    Initialisation splits the rows at the median of their row means, which is
    deterministic and permutation-equivariant, so the seed is accepted only
    for interface uniformity. The log-likelihood is non-decreasing across
    iterations; a collapsing mixture weight triggers the degenerate fallback.
    """
    x = np.asarray(loss_matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("loss matrix must be 2-D with at least 2 rows")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("loss matrix has non-finite entries")

    row_means = x.mean(axis=1)
    hi = row_means > np.median(row_means)
    lo = ~hi
    if not hi.any() or not lo.any():
        # All rows at or below the median (e.g. identical rows): no structure.
        warnings.warn("loss rows carry no two-cluster structure", DegenerateFitWarning)
        return _pooled_fallback(x)

    means = np.stack([x[lo].mean(axis=0), x[hi].mean(axis=0)])
    variances = np.maximum(
        np.stack([x[lo].var(axis=0), x[hi].var(axis=0)]), var_floor
    )
    weights = np.array([lo.mean(), hi.mean()])

    model = GmmModel(weights, means, variances)
    prev_ll = -np.inf
    for _ in range(max_iter):
        log_joint = np.stack(
            [
                np.log(model.weights[k]) + _log_gaussian_rows(x, model.means[k], model.variances[k])
                for k in range(2)
            ],
            axis=1,
        )
        log_norm = _logsumexp_rows(log_joint)
        ll = float(np.sum(log_norm))
        model.log_likelihoods.append(ll)
        resp = np.exp(log_joint - log_norm[:, None])

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

        nk = resp.sum(axis=0)
        if nk.min() / x.shape[0] < WEIGHT_COLLAPSE:
            warnings.warn("mixture weight collapsed during EM", DegenerateFitWarning)
            fallback = _pooled_fallback(x)
            fallback.log_likelihoods = model.log_likelihoods
            return fallback
        model.weights = nk / x.shape[0]
        model.means = (resp.T @ x) / nk[:, None]
        sq = np.stack(
            [(resp[:, k : k + 1] * (x - model.means[k]) ** 2).sum(axis=0) for k in range(2)]
        )
        model.variances = np.maximum(sq / nk[:, None], var_floor)
    return model


@dataclass(frozen=True)
class GroupAssignment:
    """Frozen clean/noisy split with per-client noisy responsibility."""

    groups: tuple  # per client, CLEAN or NOISY
    noisy_responsibility: tuple  # per client, in [0, 1]
    degenerate: bool = False

    @property
    def n_clients(self) -> int:
        return len(self.groups)

    def is_noisy(self, client_id: int) -> bool:
        return self.groups[client_id] == NOISY

    def noisy_ids(self):
        return [i for i, g in enumerate(self.groups) if g == NOISY]

    def clean_ids(self):
        return [i for i, g in enumerate(self.groups) if g == CLEAN]


def assign_groups(model: GmmModel, loss_matrix) -> GroupAssignment:
    """Tag each row by its max-responsibility component.

    The noisy component is the one whose mean vector has the larger average
    coordinate. If the fit is degenerate, or the two components' average
    losses are closer than DEGENERATE_GAP_FRACTION * log(M), every client is
    tagged clean.
    """
    x = np.asarray(loss_matrix, dtype=np.float64)
    n, m = x.shape
    comp_levels = model.means.mean(axis=1)
    noisy_comp = int(np.argmax(comp_levels))
    gap = float(abs(comp_levels[1] - comp_levels[0]))
    if model.degenerate or gap <= DEGENERATE_GAP_FRACTION * np.log(m):
        if not model.degenerate:
            warnings.warn(
                f"cluster mean-loss gap {gap:.4f} too small to call any client noisy",
                DegenerateFitWarning,
            )
        return GroupAssignment((CLEAN,) * n, (0.0,) * n, degenerate=True)

    log_joint = np.stack(
        [
            np.log(model.weights[k]) + _log_gaussian_rows(x, model.means[k], model.variances[k])
            for k in range(2)
        ],
        axis=1,
    )
    resp = np.exp(log_joint - _logsumexp_rows(log_joint)[:, None])
    noisy_resp = resp[:, noisy_comp]
    groups = tuple(NOISY if r > 0.5 else CLEAN for r in noisy_resp)
    return GroupAssignment(groups, tuple(float(r) for r in noisy_resp))


def detect(loss_vectors, seed: SeedSpec | None = None) -> GroupAssignment:
    """Assemble per-client loss vectors into a matrix, fit, and assign."""
    matrix = np.stack([np.asarray(v, dtype=np.float64) for v in loss_vectors])
    model = fit_gmm_2(matrix, seed=seed)
    return assign_groups(model, matrix)
