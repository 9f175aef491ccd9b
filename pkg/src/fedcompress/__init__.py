"""Federated fine-tuning simulator: a sequential compression-layer adapter,
LoRA-family baselines, FedAvg with clipped SGD, and executable bound checks."""

__version__ = "0.1.0"
