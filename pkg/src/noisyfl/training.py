"""Client-side local updates.

Two procedures exist. Vanilla training minimises logit-adjusted hard-label
cross entropy and is used during warm-up and, afterwards, by clients tagged
clean. Correction training, used by detected noisy clients, maintains one
learnable logit vector per local sample whose softmax is the current soft
estimate of the sample's ground-truth label; the model and these label
logits descend a shared objective, and at the end of each round the label
logits are fused with the model's predictions.

The correction objective per sample is

    total = classification + alpha * compatibility + beta * entropy

where classification is cross entropy of the model's prediction against the
soft label, compatibility is cross entropy of the soft label against the
originally observed label (anchoring the estimate), and entropy penalises
diffuse model predictions. Label logits receive the classification and
compatibility gradients only; per-sample gradients are applied directly
(no batch-mean scaling), so the label learning rate is independent of the
batch size.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DivergenceError, InvalidInputError
from .model import ModelParams, OptimizerState, backward, forward, sgd_step
from .numerics import SeedSpec, log_clamped, logit_adjust, softmax


@dataclass
class LabelState:
    """Learnable per-sample label logits for one client.

    Initialised to scale * one_hot(observed label), so the starting soft
    label is sharply concentrated on the observed class.
    """

    logits: np.ndarray  # (n_k, M)
    scale: float

    def soft_labels(self) -> np.ndarray:
        return softmax(self.logits)

    def estimates(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def init_label_state(observed_labels, n_classes: int, scale: float) -> LabelState:
    labels = np.asarray(observed_labels, dtype=np.int64)
    logits = np.zeros((labels.size, n_classes))
    logits[np.arange(labels.size), labels] = scale
    return LabelState(logits, scale)


@dataclass
class ClientState:
    """Everything the server tracks about one client between rounds."""

    client_id: int
    indices: np.ndarray
    prior: np.ndarray
    label_state: LabelState | None = None

    @property
    def n_samples(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    compatibility: float
    entropy: float
    total: float


def correction_loss(p, observed_onehot, label_logits, alpha: float, beta: float) -> LossBreakdown:
    """Triplet objective for a single sample; total = L_c + alpha*L_comp + beta*L_e."""
    p = np.asarray(p, dtype=np.float64)
    y_hat = np.asarray(observed_onehot, dtype=np.float64)
    y_d = softmax(label_logits)
    if not (p.shape == y_hat.shape == y_d.shape):
        raise InvalidInputError("p, observed label and label logits disagree in length")
    l_c = float(-np.sum(y_d * log_clamped(p)))
    l_comp = float(-np.sum(y_hat * log_clamped(y_d)))
    l_e = float(-np.sum(p * log_clamped(p)))
    return LossBreakdown(l_c, l_comp, l_e, l_c + alpha * l_comp + beta * l_e)


def grad_label_logits(p, observed_onehot, label_logits, alpha: float) -> np.ndarray:
    """Exact gradient of L_c + alpha*L_comp with respect to the label logits.

    With s = softmax(label_logits) and c = log p:
      dL_c/dlogits    = s * (s.c - c)
      dL_comp/dlogits = s - observed_onehot
    The entropy term does not depend on the label logits.
    """
    p = np.asarray(p, dtype=np.float64)
    y_hat = np.asarray(observed_onehot, dtype=np.float64)
    s = softmax(label_logits)
    c = log_clamped(p)
    g_c = s * (np.sum(s * c, axis=-1, keepdims=True) - c)
    return g_c + alpha * (s - y_hat)


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def local_update_vanilla(
    client: ClientState,
    ds: Dataset,
    global_params: ModelParams,
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float,
    weight_decay: float,
    use_logit_adjust: bool,
    seed: SeedSpec,
):
    """Minibatch SGD on (optionally logit-adjusted) hard-label cross entropy.

    Returns (trained params, mean training loss). The passed-in global
    parameters are never mutated.
    """
    if client.n_samples == 0:
        raise InvalidInputError(f"client {client.client_id} has no samples")
    params = global_params.copy()
    if epochs == 0:
        return params, float("nan")
    rng = seed.rng()
    opt = OptimizerState.fresh(params, lr, momentum, weight_decay)
    log_prior = np.log(client.prior) if use_logit_adjust else None
    features = ds.features[client.indices]
    labels = ds.observed[client.indices]
    loss_sum, loss_n = 0.0, 0
    for epoch in range(epochs):
        for batch_no, batch in enumerate(_batches(client.n_samples, batch_size, rng)):
            x, y = features[batch], labels[batch]
            logits, cache = forward(params, x)
            z = logits + log_prior if use_logit_adjust else logits
            p = softmax(z)
            loss = float(-np.mean(log_clamped(p[np.arange(len(y)), y])))
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at client {client.client_id}, "
                    f"epoch {epoch}, batch {batch_no}"
                )
            dz = (p - _one_hot(y, ds.n_classes)) / len(y)
            params = sgd_step(params, backward(params, cache, dz), opt)
            loss_sum += loss
            loss_n += 1
    return params, loss_sum / loss_n


@dataclass
class CorrectionResult:
    params: ModelParams
    estimates: np.ndarray  # (n_k, M) soft labels after fusion
    mean_loss: float
    elapsed_s: float


def local_update_correct(
    client: ClientState,
    ds: Dataset,
    global_params: ModelParams,
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float,
    weight_decay: float,
    label_lr: float,
    alpha: float,
    beta: float,
    label_scale: float,
    seed: SeedSpec,
) -> CorrectionResult:
    """Joint model + label-logit descent, then label/prediction fusion.

    On the client's first correction round the label logits are created from
    the observed labels; afterwards they persist across rounds. Within each
    epoch every sample's label logits take one per-occurrence gradient step
    of size label_lr. After the epoch loop the logits are refreshed to
    label_scale * (model prediction + current soft label) / 2 and the
    resulting soft labels are returned as this round's estimates.
    """
    if client.label_state is None:
        client.label_state = init_label_state(
            ds.observed[client.indices], ds.n_classes, label_scale
        )
    state = client.label_state
    t0 = time.perf_counter()
    params = global_params.copy()
    rng = seed.rng()
    opt = OptimizerState.fresh(params, lr, momentum, weight_decay)
    features = ds.features[client.indices]
    observed = _one_hot(ds.observed[client.indices], ds.n_classes)
    loss_sum, loss_n = 0.0, 0
    for _ in range(epochs):
        for batch in _batches(client.n_samples, batch_size, rng):
            x = features[batch]
            y_hat = observed[batch]
            logits, cache = forward(params, x)
            p = softmax(logits)
            y_d = softmax(state.logits[batch])
            log_p = log_clamped(p)
            l_c = -np.sum(y_d * log_p, axis=1)
            l_comp = -np.sum(y_hat * log_clamped(y_d), axis=1)
            l_e = -np.sum(p * log_p, axis=1)
            loss_sum += float(np.mean(l_c + alpha * l_comp + beta * l_e))
            loss_n += 1
            # Model gradient: classification + entropy terms, batch mean.
            s_rows = np.sum(p * log_p, axis=1, keepdims=True)
            dz = (p - y_d) + beta * (-p * (log_p - s_rows))
            params = sgd_step(params, backward(params, cache, dz / len(batch)), opt)
            # Label-logit gradient of the batch-mean loss: per-sample gradient
            # scaled by 1/batch, the convention label_lr is calibrated for.
            g = y_d * (np.sum(y_d * log_p, axis=1, keepdims=True) - log_p)
            g += alpha * (y_d - y_hat)
            state.logits[batch] -= label_lr / len(batch) * g
            if not np.all(np.isfinite(state.logits[batch])):
                raise DivergenceError(
                    f"label logits diverged at client {client.client_id} "
                    f"(label_lr={label_lr})"
                )
    # Fuse the trained model's predictions with the learned soft labels.
    pred, _ = forward(params, features)
    p_model = softmax(pred)
    state.logits = (p_model + softmax(state.logits)) / 2.0 * label_scale
    estimates = softmax(state.logits)
    mean_loss = loss_sum / loss_n if loss_n else float("nan")
    return CorrectionResult(params, estimates, mean_loss, time.perf_counter() - t0)


def per_class_loss(
    client: ClientState,
    ds: Dataset,
    params: ModelParams,
    use_logit_adjust: bool = True,
):
    """Mean vanilla CE per observed class under the given (global) model.

    Returns (losses, present): losses is length-M, present marks classes the
    client actually holds. Absent classes are filled with the client's mean
    loss over present classes, which keeps downstream mixture fits finite
    without pushing the client toward either cluster.
    """
    features = ds.features[client.indices]
    labels = ds.observed[client.indices]
    logits, _ = forward(params, features)
    z = logit_adjust(logits, client.prior) if use_logit_adjust else logits
    p = softmax(z)
    sample_loss = -log_clamped(p[np.arange(len(labels)), labels])
    losses = np.zeros(ds.n_classes)
    present = np.zeros(ds.n_classes, dtype=bool)
    for m in range(ds.n_classes):
        mask = labels == m
        if mask.any():
            losses[m] = float(np.mean(sample_loss[mask]))
            present[m] = True
    if not present.all():
        fill = float(np.mean(losses[present])) if present.any() else 0.0
        losses[~present] = fill
    return losses, present
