"""The federated round loop: selection, warm-up, detection, correction, aggregation.

Rounds run strictly in sequence. Within a round the selected clients'
updates are independent pure functions of (global params, own state, derived
seed), so they may execute on a thread pool; every per-client random stream
is derived from (experiment seed, round, client id), which makes results
identical for any worker count.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .aggregation import AGGREGATORS, ClientUpdate, aggregate
from .data import Dataset, Partition, class_prior, dirichlet_partition, gen_blobs, load_csv
from .detection import GroupAssignment, detect
from .errors import ConfigError, NoisyFLError
from .metrics import ClassificationMetrics, classification_metrics, confusion_matrix
from .model import ArchSpec, ModelParams, forward, init_params
from .noise import (
    ASYMMETRIC,
    SYMMETRIC,
    NoiseAssignment,
    NoisePlan,
    apply_plan,
    mixed_plan,
    uniform_pattern_plan,
)
from .numerics import SeedSpec
from .training import ClientState, local_update_correct, local_update_vanilla, per_class_loss

NOISE_PATTERNS = (SYMMETRIC, ASYMMETRIC, "mixed", "none")
DATASETS = ("blobs", "csv")


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; field names double as config-file keys."""

    run_name: str = "run"
    seed: int = 0
    n_clients: int = 100
    clients_per_round: int = 10
    t: int = 120  # total global rounds
    t_w: int = 20  # warm-up rounds before detection
    local_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta: float = 1000.0  # learning rate for the per-sample label logits
    alpha: float = 0.2  # compatibility loss weight
    beta: float = 0.5  # entropy loss weight
    label_scale: float = 10.0  # sharpening constant for label logits
    hidden_dims: tuple = (64,)
    gamma: float = 1.0  # Dirichlet concentration; lower = more skew
    min_client_size: int = 64
    dataset: str = "blobs"
    classes: int = 10
    feature_dim: int = 32
    train_per_class: int = 600
    test_per_class: int = 100
    blob_separation: float = 6.0
    blob_noise_std: float = 1.0
    csv_train: str = ""
    csv_test: str = ""
    noise_pattern: str = "symmetric"
    noise_max_rate: float = 0.4
    aggregator: str = "da"
    krum_ratio: float = 0.3
    trim_count: int = 1
    correction: bool = True
    logit_adjust: bool = True
    detection_threshold: float | None = None
    correction_dump: bool = True
    workers: int = 1

    def effective_detection_threshold(self) -> float:
        if self.detection_threshold is not None:
            return self.detection_threshold
        return 0.5 * self.noise_max_rate


CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))


def validate_config(cfg: ExperimentConfig) -> None:
    def bad(msg):
        raise ConfigError(msg)

    if cfg.t < 1:
        bad(f"t={cfg.t} must be >= 1")
    if not 0 <= cfg.t_w < cfg.t:
        bad(f"t_w={cfg.t_w} must satisfy 0 <= t_w < t={cfg.t}")
    if not 1 <= cfg.clients_per_round <= cfg.n_clients:
        bad(
            f"clients_per_round={cfg.clients_per_round} must be in "
            f"[1, n_clients={cfg.n_clients}]"
        )
    if cfg.local_epochs < 0:
        bad(f"local_epochs={cfg.local_epochs} must be >= 0")
    if cfg.batch_size < 1:
        bad(f"batch_size={cfg.batch_size} must be >= 1")
    if cfg.lr <= 0:
        bad(f"lr={cfg.lr} must be positive")
    if not 0 <= cfg.momentum < 1:
        bad(f"momentum={cfg.momentum} must be in [0, 1)")
    for name in ("weight_decay", "eta", "alpha", "beta"):
        if getattr(cfg, name) < 0:
            bad(f"{name}={getattr(cfg, name)} must be >= 0")
    if cfg.label_scale <= 0:
        bad(f"label_scale={cfg.label_scale} must be positive")
    if cfg.gamma <= 0:
        bad(f"gamma={cfg.gamma} must be positive")
    if cfg.min_client_size < 1:
        bad(f"min_client_size={cfg.min_client_size} must be >= 1")
    if cfg.dataset not in DATASETS:
        bad(f"dataset={cfg.dataset!r} must be one of {DATASETS}")
    if cfg.dataset == "blobs":
        if cfg.classes < 2:
            bad(f"classes={cfg.classes} must be >= 2")
        if cfg.feature_dim < 1:
            bad(f"feature_dim={cfg.feature_dim} must be >= 1")
        if cfg.train_per_class < 1 or cfg.test_per_class < 1:
            bad("train_per_class and test_per_class must be >= 1")
        if cfg.blob_separation <= 0:
            bad(f"blob_separation={cfg.blob_separation} must be positive")
        if cfg.blob_noise_std < 0:
            bad(f"blob_noise_std={cfg.blob_noise_std} must be >= 0")
    else:
        if not cfg.csv_train or not cfg.csv_test:
            bad("dataset=csv requires csv_train and csv_test paths")
    if cfg.noise_pattern not in NOISE_PATTERNS:
        bad(f"noise_pattern={cfg.noise_pattern!r} must be one of {NOISE_PATTERNS}")
    if not 0 <= cfg.noise_max_rate <= 1:
        bad(f"noise_max_rate={cfg.noise_max_rate} must be in [0, 1]")
    if cfg.noise_pattern == "mixed" and cfg.n_clients < 2:
        bad("noise_pattern=mixed needs n_clients >= 2")
    if cfg.aggregator not in AGGREGATORS:
        bad(f"aggregator={cfg.aggregator!r} must be one of {AGGREGATORS}")
    if not 0 <= cfg.krum_ratio < 1:
        bad(f"krum_ratio={cfg.krum_ratio} must be in [0, 1)")
    if cfg.trim_count < 0:
        bad(f"trim_count={cfg.trim_count} must be >= 0")
    if cfg.detection_threshold is not None and not 0 <= cfg.detection_threshold <= 1:
        bad(f"detection_threshold={cfg.detection_threshold} must be in [0, 1]")
    if cfg.workers < 1:
        bad(f"workers={cfg.workers} must be >= 1")


def select_clients(round_idx: int, n_clients: int, clients_per_round: int, seed: SeedSpec):
    """Uniform sample without replacement, deterministic per (seed, round)."""
    rng = seed.child("select", round_idx).rng()
    chosen = rng.choice(n_clients, size=clients_per_round, replace=False)
    return np.sort(chosen)


@dataclass
class RoundLog:
    round: int
    stage: int
    selected: tuple
    aggregator: str
    mean_train_loss: float
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    correction_accuracy: float  # nan until correction state exists


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    final_params: ModelParams
    rounds: list
    assignment: GroupAssignment | None
    injection_reports: list
    client_states: list
    correction_rows: list = field(default_factory=list)
    missing_classes: dict = field(default_factory=dict)
    best_accuracy: float = float("nan")
    best_accuracy_round: int = 0
    best_macro_f1: float = float("nan")
    best_macro_f1_round: int = 0
    mean_vanilla_update_s: float = float("nan")
    mean_correction_update_s: float = float("nan")


def build_noise_plan(cfg: ExperimentConfig) -> NoisePlan:
    if cfg.noise_pattern == "none":
        return NoisePlan(
            tuple(NoiseAssignment(k, SYMMETRIC, 0.0) for k in range(cfg.n_clients))
        )
    if cfg.noise_pattern == "mixed":
        return mixed_plan(cfg.n_clients, cfg.noise_max_rate)
    return uniform_pattern_plan(cfg.n_clients, cfg.noise_max_rate, cfg.noise_pattern)


def load_datasets(cfg: ExperimentConfig, root: SeedSpec):
    if cfg.dataset == "csv":
        return load_csv(cfg.csv_train), load_csv(cfg.csv_test)
    center_seed = root.child("data", "centers")
    train = gen_blobs(
        cfg.classes,
        cfg.feature_dim,
        cfg.train_per_class,
        cfg.blob_separation,
        cfg.blob_noise_std,
        root.child("data", "train"),
        center_seed=center_seed,
    )
    test = gen_blobs(
        cfg.classes,
        cfg.feature_dim,
        cfg.test_per_class,
        cfg.blob_separation,
        cfg.blob_noise_std,
        root.child("data", "test"),
        center_seed=center_seed,
    )
    return train, test


def _evaluate(params: ModelParams, test: Dataset) -> ClassificationMetrics:
    logits, _ = forward(params, test.features)
    preds = logits.argmax(axis=1)
    return classification_metrics(confusion_matrix(test.true, preds, test.n_classes))


def _noisy_group_correction_accuracy(assignment, states, ds) -> float:
    """Share of noisy-group samples whose current label estimate is correct.

    Clients not yet visited in stage 2 contribute their observed labels,
    which is exactly what their estimates would decode to at initialisation.
    """
    if assignment is None or not assignment.noisy_ids():
        return float("nan")
    hits, total = 0, 0
    for cid in assignment.noisy_ids():
        st = states[cid]
        truth = ds.true[st.indices]
        if st.label_state is not None:
            est = st.label_state.estimates()
        else:
            est = ds.observed[st.indices]
        hits += int(np.sum(est == truth))
        total += len(truth)
    return hits / total


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run the full two-stage pipeline and return all artifacts in memory."""
    validate_config(cfg)
    root = SeedSpec(cfg.seed)

    train, test = load_datasets(cfg, root)
    partition = dirichlet_partition(
        train, cfg.n_clients, cfg.gamma, cfg.min_client_size, root.child("partition")
    )
    plan = build_noise_plan(cfg)
    reports = apply_plan(train, partition, plan, root)

    states = [
        ClientState(
            client_id=k,
            indices=partition.client_indices[k],
            prior=class_prior(train.observed[partition.client_indices[k]], train.n_classes),
        )
        for k in range(cfg.n_clients)
    ]
    arch = ArchSpec(train.feature_dim, tuple(cfg.hidden_dims), train.n_classes)
    params = init_params(arch, root.child("init"))

    assignment: GroupAssignment | None = None
    missing_classes: dict = {}

    def run_detection(detect_params: ModelParams) -> GroupAssignment:
        vectors = []
        for st in states:
            losses, present = per_class_loss(st, train, detect_params, cfg.logit_adjust)
            if not present.all():
                missing_classes[st.client_id] = [int(m) for m in np.flatnonzero(~present)]
            vectors.append(losses)
        return detect(vectors, root.child("detect"))

    if cfg.t_w == 0:
        assignment = run_detection(params)

    result = ExperimentResult(
        config=cfg,
        final_params=params,
        rounds=[],
        assignment=None,
        injection_reports=reports,
        client_states=states,
        missing_classes=missing_classes,
    )
    vanilla_times: list = []
    correction_times: list = []

    def update_one(round_idx, client_id, global_params, correction_mode):
        st = states[client_id]
        seed = root.child("round", round_idx, "client", client_id)
        start = time.perf_counter()
        try:
            if correction_mode:
                res = local_update_correct(
                    st,
                    train,
                    global_params,
                    cfg.local_epochs,
                    cfg.batch_size,
                    cfg.lr,
                    cfg.momentum,
                    cfg.weight_decay,
                    cfg.eta,
                    cfg.alpha,
                    cfg.beta,
                    cfg.label_scale,
                    seed,
                )
                return client_id, res.params, res.mean_loss, res.estimates, res.elapsed_s
            new_params, loss = local_update_vanilla(
                st,
                train,
                global_params,
                cfg.local_epochs,
                cfg.batch_size,
                cfg.lr,
                cfg.momentum,
                cfg.weight_decay,
                cfg.logit_adjust,
                seed,
            )
            return client_id, new_params, loss, None, time.perf_counter() - start
        except NoisyFLError as exc:
            raise type(exc)(f"round {round_idx}, client {client_id}: {exc}") from exc

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for round_idx in range(1, cfg.t + 1):
            stage = 1 if round_idx <= cfg.t_w else 2
            selected = select_clients(round_idx, cfg.n_clients, cfg.clients_per_round, root)
            correction_flags = {
                int(cid): (
                    stage == 2
                    and cfg.correction
                    and assignment is not None
                    and assignment.is_noisy(int(cid))
                )
                for cid in selected
            }
            if pool is not None:
                futures = {
                    int(cid): pool.submit(
                        update_one, round_idx, int(cid), params, correction_flags[int(cid)]
                    )
                    for cid in selected
                }
                outcomes = {cid: f.result() for cid, f in futures.items()}
            else:
                outcomes = {
                    int(cid): update_one(round_idx, int(cid), params, correction_flags[int(cid)])
                    for cid in selected
                }

            updates, losses = [], []
            for cid in sorted(outcomes):
                _, new_params, loss, estimates, elapsed = outcomes[cid]
                clean = assignment is None or not assignment.is_noisy(cid)
                updates.append(ClientUpdate(cid, new_params, states[cid].n_samples, clean))
                losses.append(loss)
                if correction_flags[cid]:
                    correction_times.append(elapsed)
                    if cfg.correction_dump and estimates is not None:
                        st = states[cid]
                        picks = estimates.argmax(axis=1)
                        for local_i, global_i in enumerate(st.indices):
                            result.correction_rows.append(
                                (
                                    round_idx,
                                    cid,
                                    int(global_i),
                                    int(picks[local_i]),
                                    int(train.observed[global_i]),
                                    int(train.true[global_i]),
                                )
                            )
                else:
                    vanilla_times.append(elapsed)

            rule = cfg.aggregator
            if stage == 1 and cfg.correction:
                rule = "fedavg"
            params = aggregate(rule, updates, cfg.krum_ratio, cfg.trim_count)

            if round_idx == cfg.t_w:
                assignment = run_detection(params)

            m = _evaluate(params, test)
            result.rounds.append(
                RoundLog(
                    round=round_idx,
                    stage=stage,
                    selected=tuple(int(c) for c in selected),
                    aggregator=rule,
                    mean_train_loss=float(np.mean(losses)),
                    accuracy=m.accuracy,
                    macro_precision=m.macro_precision,
                    macro_recall=m.macro_recall,
                    macro_f1=m.macro_f1,
                    correction_accuracy=_noisy_group_correction_accuracy(
                        assignment, states, train
                    ),
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()

    result.final_params = params
    result.assignment = assignment
    if result.rounds:
        by_acc = max(result.rounds, key=lambda r: r.accuracy)
        by_f1 = max(result.rounds, key=lambda r: r.macro_f1)
        result.best_accuracy = by_acc.accuracy
        result.best_accuracy_round = by_acc.round
        result.best_macro_f1 = by_f1.macro_f1
        result.best_macro_f1_round = by_f1.round
    if vanilla_times:
        result.mean_vanilla_update_s = float(np.mean(vanilla_times))
    if correction_times:
        result.mean_correction_update_s = float(np.mean(correction_times))
    return result


def config_with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    return replace(cfg, **overrides)
