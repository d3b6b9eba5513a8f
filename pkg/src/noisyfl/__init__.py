"""noisyfl: a deterministic federated-learning simulator for label-noise research.

The pipeline trains a global model with FedAvg while monitoring per-client
per-class losses, splits clients into clean and noisy groups with a
two-component Gaussian mixture, and then lets detected noisy clients learn
corrected labels end-to-end while the server down-weights them with
distance-aware aggregation. Robust-aggregation baselines (Krum, Median,
TrimmedMean) and the usual label-noise injection models are included.
"""

__version__ = "0.1.0"
