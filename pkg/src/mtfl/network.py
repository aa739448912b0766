"""Two-layer ReLU network with per-task heads: forward pass and subgradients.

Subgradient conventions are fixed once so results are deterministic: the ReLU
derivative is 1 only for strictly positive preactivation, and the hinge
subgradient is active only while the margin is strictly below 1. Both kinks
are hit with probability zero under Gaussian data.
"""

import struct
from dataclasses import dataclass

import numpy as np

from ._util import as_generator


@dataclass(frozen=True)
class NetParams:
    """First-layer weights W (m x d), biases b (m), per-task heads (T x m)."""

    W: np.ndarray
    b: np.ndarray
    heads: np.ndarray
    d: int
    r: int
    m: int
    T: int
    nu_w: float = float("nan")
    nu_a: float = float("nan")

    def __post_init__(self):
        if self.W.shape != (self.m, self.d):
            raise ValueError(f"W shape {self.W.shape} != ({self.m}, {self.d})")
        if self.b.shape != (self.m,):
            raise ValueError(f"b shape {self.b.shape} != ({self.m},)")
        if self.heads.shape != (self.T, self.m):
            raise ValueError(f"heads shape {self.heads.shape} != ({self.T}, {self.m})")

    def with_heads(self, heads):
        heads = np.asarray(heads, dtype=float)
        return NetParams(self.W, self.b, heads, self.d, self.r, self.m,
                         heads.shape[0], self.nu_w, self.nu_a)


@dataclass(frozen=True)
class Prediction:
    """Network output plus cached preactivations for gradient reuse."""

    value: float
    preacts: np.ndarray


def is_symmetric_init(params, tol=0.0):
    """True iff params still carry the untouched mirrored structure."""
    if params.m % 2 != 0:
        return False
    half = params.m // 2
    ok_w = np.array_equal(params.W[:half], params.W[half:]) if tol == 0.0 else \
        np.allclose(params.W[:half], params.W[half:], atol=tol)
    ok_a = np.array_equal(params.heads[:, :half], -params.heads[:, half:]) if tol == 0.0 else \
        np.allclose(params.heads[:, :half], -params.heads[:, half:], atol=tol)
    return bool(ok_w and ok_a and not params.b.any())


def symmetric_init(d, r, m, T, nu_w, nu_a, rng):
    """Mirrored random init: paired neurons share weights, heads negate, output is 0."""
    if m % 2 != 0:
        raise ValueError("m must be even for the mirrored initialization")
    if nu_w < 0 or nu_a < 0:
        raise ValueError("nu_w and nu_a must be >= 0")
    gen = as_generator(rng)
    half = m // 2
    W_half = gen.standard_normal((half, d)) * nu_w
    heads_half = gen.standard_normal((T, half)) * nu_a
    W = np.vstack([W_half, W_half])
    heads = np.hstack([heads_half, -heads_half])
    b = np.zeros(m)
    return NetParams(W, b, heads, d, r, m, T, float(nu_w), float(nu_a))


def forward(params, head_index, x):
    """f(x) = sum_j a_j * relu(w_j . x + b_j) for the requested head."""
    if not 0 <= head_index < params.T:
        raise IndexError(f"head index {head_index} out of range [0, {params.T})")
    x = np.asarray(x, dtype=float)
    preacts = params.W @ x + params.b
    value = float(params.heads[head_index] @ np.maximum(preacts, 0.0))
    return Prediction(value, preacts)


def predict_batch(params, head_index, X):
    """Network outputs for an n x d batch (vectorized forward)."""
    if not 0 <= head_index < params.T:
        raise IndexError(f"head index {head_index} out of range [0, {params.T})")
    acts = np.maximum(np.asarray(X, dtype=float) @ params.W.T + params.b, 0.0)
    return acts @ params.heads[head_index]


def hinge(pred, y):
    """max(1 - y * pred, 0)."""
    if y not in (-1, 1):
        raise ValueError(f"label must be -1 or +1, got {y}")
    return float(max(1.0 - y * pred, 0.0))


def task_loss(params, head_index, samples, labels):
    """Mean hinge loss over a batch. Regularizers live in the update rules."""
    samples = np.asarray(samples, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("task_loss needs a nonempty n x d batch")
    if labels.shape != (samples.shape[0],):
        raise ValueError("labels must match the batch length")
    preds = predict_batch(params, head_index, samples)
    return float(np.mean(np.maximum(1.0 - labels * preds, 0.0)))


def grad_head(params, head_index, samples, labels):
    """Subgradient of the mean hinge loss with respect to one head."""
    samples = np.asarray(samples, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("grad_head needs a nonempty n x d batch")
    acts = np.maximum(samples @ params.W.T + params.b, 0.0)
    preds = acts @ params.heads[head_index]
    active = (1.0 - labels * preds) > 0.0
    coeff = np.where(active, -labels, 0.0) / samples.shape[0]
    return coeff @ acts


def grad_weights(params, heads_override, batches):
    """Subgradient of the averaged multi-task hinge loss with respect to W.

    ``batches`` yields one (samples, labels) pair per task; per-task gradients
    are averaged over their batch, then uniformly over tasks, accumulated in
    task order. Accepts any iterable so huge batch streams never have to be
    materialized at once.
    """
    heads_override = np.asarray(heads_override, dtype=float)
    n_tasks = heads_override.shape[0]
    grad = np.zeros_like(params.W)
    count = 0
    for samples, labels in batches:
        if count >= n_tasks:
            raise ValueError(f"more batches than the {n_tasks} heads")
        samples = np.asarray(samples, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise ValueError(f"task {count}: empty batch")
        preacts = samples @ params.W.T + params.b
        gates = preacts > 0.0
        preds = np.maximum(preacts, 0.0) @ heads_override[count]
        active = (1.0 - labels * preds) > 0.0
        coeff = np.where(active, -labels, 0.0) / samples.shape[0]
        # d loss / d w_j = coeff_l * a_j * gate_lj * x_l summed over samples
        grad += (gates * heads_override[count]).T @ (coeff[:, None] * samples)
        count += 1
    if count != n_tasks:
        raise ValueError(f"{count} batches for {n_tasks} heads")
    return grad / n_tasks


def multitask_loss(params, heads_override, batches):
    """Averaged mean hinge loss across tasks with the given heads (no regularizer)."""
    heads_override = np.asarray(heads_override, dtype=float)
    total = 0.0
    for i, (samples, labels) in enumerate(batches):
        samples = np.asarray(samples, dtype=float)
        labels = np.asarray(labels, dtype=float)
        acts = np.maximum(samples @ params.W.T + params.b, 0.0)
        preds = acts @ heads_override[i]
        total += float(np.mean(np.maximum(1.0 - labels * preds, 0.0)))
    return total / heads_override.shape[0]


_HEADER = struct.Struct("<4I")


def params_to_bytes(params):
    """Flat little-endian binary: u32 header (d, r, m, T), then W, b, heads as f64."""
    parts = [_HEADER.pack(params.d, params.r, params.m, params.T)]
    for arr in (params.W, params.b, params.heads):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(blob):
    d, r, m, T = _HEADER.unpack_from(blob, 0)
    offset = _HEADER.size
    W = np.frombuffer(blob, dtype="<f8", count=m * d, offset=offset).reshape(m, d)
    offset += 8 * m * d
    b = np.frombuffer(blob, dtype="<f8", count=m, offset=offset)
    offset += 8 * m
    heads = np.frombuffer(blob, dtype="<f8", count=T * m, offset=offset).reshape(T, m)
    return NetParams(W.copy(), b.copy(), heads.copy(), d, r, m, T)


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
