"""Numerical laboratory for one-step multi-task feature learning with
two-layer ReLU networks: pretraining, recovery metrics, downstream
embeddings with trained hinge heads, and a random-features baseline."""

from . import analysis, baselines, cli, downstream, network, pretrain, tasks

__all__ = [
    "analysis", "baselines", "cli", "downstream", "network", "pretrain", "tasks",
]
__version__ = "0.1.0"
