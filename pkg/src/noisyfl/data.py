"""Synthetic blob datasets, CSV ingestion, Dirichlet partitioning, class priors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CsvFormatError, InvalidInputError
from .numerics import SeedSpec

# Default smoothing for class priors; keeps log(prior) finite on clients
# that are missing classes entirely.
PRIOR_SMOOTHING = 1e-3


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    observed_label: int
    true_label: int


class Dataset:
    """Columnar sample store: features (n, d), observed and true labels (n,).

    Observed labels are what training sees and may be corrupted; true labels
    are kept only for evaluation and never change after noise injection.
    """

    def __init__(self, features, observed, true, n_classes: int):
        self.features = np.asarray(features, dtype=np.float64)
        self.observed = np.asarray(observed, dtype=np.int64)
        self.true = np.asarray(true, dtype=np.int64)
        self.n_classes = int(n_classes)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise InvalidInputError("dataset must be a nonempty 2-D feature matrix")
        if not (len(self.features) == len(self.observed) == len(self.true)):
            raise InvalidInputError("features and labels disagree in length")
        for labels, name in ((self.observed, "observed"), (self.true, "true")):
            if labels.min() < 0 or labels.max() >= self.n_classes:
                raise InvalidInputError(f"{name} labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.observed[i]), int(self.true[i]))


def gen_blobs(
    n_classes: int,
    feature_dim: int,
    n_per_class: int,
    class_separation: float,
    noise_std: float,
    seed: SeedSpec,
    center_seed: SeedSpec | None = None,
) -> Dataset:
    """Isotropic Gaussian blobs, one cluster per class.

    Centers are drawn from `center_seed` (default: a "centers" child of
    `seed`) and rescaled so the minimum pairwise center distance equals
    `class_separation` exactly. Passing the same center_seed with different
    sample seeds yields disjoint draws from the same distribution, which is
    how train/test splits are generated.
    """
    if n_classes < 2:
        raise InvalidInputError("need at least 2 classes")
    if n_per_class < 1:
        raise InvalidInputError("need at least 1 sample per class")
    if class_separation <= 0:
        raise InvalidInputError("class_separation must be positive")
    crng = (center_seed if center_seed is not None else seed.child("centers")).rng()
    while True:
        centers = crng.standard_normal((n_classes, feature_dim))
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        min_dist = dist[~np.eye(n_classes, dtype=bool)].min()
        if min_dist > 0:
            break
    centers *= class_separation / min_dist

    srng = seed.child("samples").rng()
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centers[labels] + noise_std * srng.standard_normal(
        (n_classes * n_per_class, feature_dim)
    )
    return Dataset(features, labels.copy(), labels.copy(), n_classes)


@dataclass(frozen=True)
class Partition:
    """Disjoint per-client index lists over a parent dataset."""

    client_indices: tuple

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self):
        return [len(ix) for ix in self.client_indices]


def dirichlet_partition(
    ds: Dataset,
    n_clients: int,
    gamma: float,
    min_size: int,
    seed: SeedSpec,
    max_attempts: int = 1000,
) -> Partition:
    """Non-IID split: per class, client proportions ~ Dirichlet(gamma * 1).

    Lower gamma means more skew. The draw is repeated until every client
    holds at least `min_size` samples.
    """
    if n_clients < 1:
        raise InvalidInputError("n_clients must be >= 1")
    if gamma <= 0:
        raise InvalidInputError("gamma must be positive")
    if n_clients * min_size > len(ds):
        raise ConfigError(
            f"min_size {min_size} infeasible: {n_clients} clients need "
            f"{n_clients * min_size} samples, dataset has {len(ds)}"
        )
    rng = seed.rng()
    by_class = [np.flatnonzero(ds.observed == m) for m in range(ds.n_classes)]
    for _ in range(max_attempts):
        buckets = [[] for _ in range(n_clients)]
        for idx in by_class:
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(n_clients, gamma))
            cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
            for cid, part in enumerate(np.split(idx, cuts)):
                buckets[cid].append(part)
        sizes_ok = True
        client_indices = []
        for parts in buckets:
            ix = np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
            if len(ix) < min_size:
                sizes_ok = False
                break
            client_indices.append(ix)
        if sizes_ok:
            return Partition(tuple(client_indices))
    raise ConfigError(
        f"could not satisfy min_size={min_size} for {n_clients} clients "
        f"after {max_attempts} attempts (gamma={gamma})"
    )


def class_prior(observed_labels, n_classes: int, smoothing: float = PRIOR_SMOOTHING) -> np.ndarray:
    """Smoothed empirical class distribution over observed labels.

    prior_m = (count_m + smoothing) / (n + n_classes * smoothing); strictly
    positive for any smoothing > 0.
    """
    labels = np.asarray(observed_labels)
    if labels.size == 0:
        raise InvalidInputError("cannot compute a class prior over an empty slice")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    return (counts + smoothing) / (labels.size + n_classes * smoothing)


def _header(feature_dim: int, with_true: bool):
    cols = [f"f{i}" for i in range(feature_dim)] + ["label"]
    if with_true:
        cols.append("true_label")
    return cols


def write_csv(ds: Dataset, path, include_true: bool = True) -> None:
    """Write `f0,...,f{d-1},label[,true_label]` rows with full-precision floats."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(_header(ds.feature_dim, include_true)) + "\n")
        for i in range(len(ds)):
            fields = [repr(float(v)) for v in ds.features[i]]
            fields.append(str(int(ds.observed[i])))
            if include_true:
                fields.append(str(int(ds.true[i])))
            f.write(",".join(fields) + "\n")


def load_csv(path) -> Dataset:
    """Load a dataset written by write_csv.

    The true_label column is optional and defaults to the observed label.
    Malformed rows raise CsvFormatError with a 1-based line number.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise CsvFormatError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    feature_cols = [c for c in header if c.startswith("f")]
    d = len(feature_cols)
    expected = _header(d, with_true=False)
    expected_true = _header(d, with_true=True)
    if header == expected:
        has_true = False
    elif header == expected_true:
        has_true = True
    else:
        want = expected if "true_label" not in header else expected_true
        missing = [c for c in want if c not in header]
        raise CsvFormatError(
            f"{path}: line 1: bad header, missing or misordered columns "
            f"{missing if missing else header}"
        )
    width = d + (2 if has_true else 1)
    features, observed, true = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise CsvFormatError(
                f"{path}: line {lineno}: expected {width} fields, got {len(fields)}"
            )
        try:
            features.append([float(v) for v in fields[:d]])
            obs = int(fields[d])
            tru = int(fields[d + 1]) if has_true else obs
        except ValueError as exc:
            raise CsvFormatError(f"{path}: line {lineno}: {exc}") from exc
        if obs < 0 or tru < 0:
            raise CsvFormatError(f"{path}: line {lineno}: negative label")
        observed.append(obs)
        true.append(tru)
    if not features:
        raise CsvFormatError(f"{path}: no data rows")
    n_classes = int(max(max(observed), max(true))) + 1
    return Dataset(np.array(features), observed, true, n_classes)
