"""Small MLP with hand-derived forward/backward passes and momentum SGD.

Parameters live in plain numpy arrays. The canonical flat order, used for
aggregation distances and checkpointing, is: layer 0 weights row-major,
layer 0 biases, layer 1 weights, layer 1 biases, and so on.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InvalidInputError, StaleCacheError
from .numerics import SeedSpec


@dataclass(frozen=True)
class ArchSpec:
    """Network shape: input_dim -> hidden_dims (rectifier) -> output_dim."""

    input_dim: int
    hidden_dims: tuple
    output_dim: int

    def layer_dims(self):
        dims = (self.input_dim,) + tuple(self.hidden_dims) + (self.output_dim,)
        return list(zip(dims[:-1], dims[1:]))


class ModelParams:
    """Per-layer weight matrices (fan_in, fan_out) and bias vectors."""

    __slots__ = ("weights", "biases")

    def __init__(self, weights, biases):
        if len(weights) != len(biases):
            raise InvalidInputError("weights and biases must have one entry per layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def shapes(self):
        return [(w.shape[0], w.shape[1]) for w in self.weights]

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flatten(self) -> np.ndarray:
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel(order="C"))
            chunks.append(b.ravel(order="C"))
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights) and all(
            np.all(np.isfinite(b)) for b in self.biases
        )


def unflatten(shapes, vec) -> ModelParams:
    """Inverse of ModelParams.flatten for the given (fan_in, fan_out) shapes."""
    vec = np.asarray(vec, dtype=np.float64)
    expected = sum(fi * fo + fo for fi, fo in shapes)
    if vec.size != expected:
        raise InvalidInputError(f"flat vector has {vec.size} entries, expected {expected}")
    weights, biases, pos = [], [], 0
    for fi, fo in shapes:
        weights.append(vec[pos : pos + fi * fo].reshape(fi, fo).copy())
        pos += fi * fo
        biases.append(vec[pos : pos + fo].copy())
        pos += fo
    return ModelParams(weights, biases)


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def init_params(arch: ArchSpec, seed: SeedSpec) -> ModelParams:
    """Fan-in-scaled uniform init, bound sqrt(6 / fan_in); biases start at zero."""
    dims = arch.layer_dims()
    if any(fi <= 0 or fo <= 0 for fi, fo in dims):
        raise InvalidInputError(f"architecture has a zero-dimension layer: {dims}")
    rng = seed.rng()
    weights, biases = [], []
    for fan_in, fan_out in dims:
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


@dataclass
class ForwardCache:
    """Activations recorded by forward() for the matching backward()."""

    inputs: list = field(default_factory=list)  # input to each layer, post-rectifier
    preacts: list = field(default_factory=list)  # pre-rectifier values of hidden layers
    single: bool = False
    logits_shape: tuple = ()


def forward(params: ModelParams, x):
    """Compute logits for one feature vector or a batch of rows.

    Returns (logits, cache); the cache holds every intermediate activation
    needed by backward(). Hidden layers use the rectifier, the final layer
    is linear.
    """
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != params.weights[0].shape[0]:
        raise InvalidInputError(
            f"input width {a.shape[-1]} does not match model input dim "
            f"{params.weights[0].shape[0]}"
        )
    cache = ForwardCache(single=single)
    n_layers = params.n_layers
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(a)
        z = a @ w + b
        if i < n_layers - 1:
            cache.preacts.append(z)
            a = np.maximum(z, 0.0)
        else:
            a = z
    cache.logits_shape = a.shape
    logits = a[0] if single else a
    return logits, cache


def backward(params: ModelParams, cache: ForwardCache, dl_dlogits) -> ModelParams:
    """Exact parameter gradient given dL/dlogits, summed over the batch rows.

    For a batch-mean loss, pass dL/dlogits already divided by the batch size.
    """
    delta = np.asarray(dl_dlogits, dtype=np.float64)
    if cache.single and delta.ndim == 1:
        delta = delta[None, :]
    if len(cache.inputs) != params.n_layers or delta.shape != cache.logits_shape:
        raise StaleCacheError(
            f"cache/gradient mismatch: dL/dlogits has shape {delta.shape}, "
            f"forward produced {cache.logits_shape}"
        )
    grad = zeros_like(params)
    for i in range(params.n_layers - 1, -1, -1):
        a_in = cache.inputs[i]
        grad.weights[i] = a_in.T @ delta
        grad.biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i].T
            delta = delta * (cache.preacts[i - 1] > 0.0)
    return grad


@dataclass
class OptimizerState:
    """SGD with heavy-ball momentum and L2 weight decay.

    Update rule: buffer <- momentum * buffer + grad + weight_decay * params,
    then params <- params - lr * buffer.
    """

    lr: float
    momentum: float
    weight_decay: float
    buffers: ModelParams | None = None

    @staticmethod
    def fresh(params: ModelParams, lr: float, momentum: float, weight_decay: float):
        return OptimizerState(lr, momentum, weight_decay, zeros_like(params))


def sgd_step(params: ModelParams, grad: ModelParams, opt: OptimizerState) -> ModelParams:
    """One SGD step; returns new parameters, mutates opt.buffers in place."""
    if not grad.all_finite():
        raise DivergenceError("non-finite gradient in sgd_step")
    if opt.buffers is None:
        opt.buffers = zeros_like(params)
    new_w, new_b = [], []
    for i in range(params.n_layers):
        gw = grad.weights[i] + opt.weight_decay * params.weights[i]
        gb = grad.biases[i] + opt.weight_decay * params.biases[i]
        opt.buffers.weights[i] = opt.momentum * opt.buffers.weights[i] + gw
        opt.buffers.biases[i] = opt.momentum * opt.buffers.biases[i] + gb
        new_w.append(params.weights[i] - opt.lr * opt.buffers.weights[i])
        new_b.append(params.biases[i] - opt.lr * opt.buffers.biases[i])
    return ModelParams(new_w, new_b)


def l2_distance(a: ModelParams, b: ModelParams) -> float:
    """Euclidean distance between two parameter sets in the canonical flat order."""
    if a.shapes() != b.shapes():
        raise InvalidInputError(f"shape mismatch: {a.shapes()} vs {b.shapes()}")
    total = 0.0
    for wa, wb in zip(a.weights, b.weights):
        d = wa - wb
        total += float(np.sum(d * d))
    for ba, bb in zip(a.biases, b.biases):
        d = ba - bb
        total += float(np.sum(d * d))
    return float(np.sqrt(total))


_MAGIC = b"NFLP"


def save_params(params: ModelParams, path) -> None:
    """Checkpoint format: magic, version, layer count, (fan_in, fan_out) pairs,
    then all weights and biases as little-endian float64 in canonical order."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", 1, params.n_layers))
        for fi, fo in params.shapes():
            f.write(struct.pack("<II", fi, fo))
        f.write(params.flatten().astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise InvalidInputError(f"{path}: not a parameter checkpoint")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
    shapes, pos = [], 12
    for _ in range(n_layers):
        fi, fo = struct.unpack_from("<II", blob, pos)
        shapes.append((fi, fo))
        pos += 8
    vec = np.frombuffer(blob, dtype="<f8", offset=pos)
    return unflatten(shapes, vec)
