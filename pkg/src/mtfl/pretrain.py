"""One-step-per-phase pretraining: fit every head once, then update the weights once.

Population expectations are replaced by fresh i.i.d. Monte-Carlo batches of
``n_per_task`` points per task, drawn independently for the head phase and the
weight phase so neither update reuses the other's data.
"""

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import network, tasks
from ._util import as_generator


class ContractViolation(ValueError):
    """A documented calling contract was broken."""


def default_hyperparams(r, d):
    """(eta, lambda_a, lambda_w, nu_w) tuned so one weight step cancels the
    spurious coordinates while keeping a 2^(-r-2) fraction of the relevant ones."""
    if r < 1 or d < r:
        raise ValueError("need r >= 1 and d >= r")
    eta = 1.0
    lambda_a = 1.0 / eta
    lambda_w = (1.0 + (eta**2) * 2.0 ** (-r - 1) / math.pi) / eta
    nu_w = d ** (-1.25)
    return eta, lambda_a, lambda_w, nu_w


@dataclass(frozen=True)
class PretrainConfig:
    d: int
    r: int
    m: int
    T: int
    n_per_task: int
    seed: int
    eta: float = 1.0
    lambda_a: float = None
    lambda_w: float = None
    nu_w: float = None
    nu_a: float = None

    def __post_init__(self):
        if self.r < 1 or self.d < self.r:
            raise ValueError("need r >= 1 and d >= r")
        if self.m % 2 != 0 or self.m < 2:
            raise ValueError("m must be a positive even integer")
        if self.T < 1 or self.n_per_task < 1:
            raise ValueError("T and n_per_task must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.lambda_a is None:
            object.__setattr__(self, "lambda_a", 1.0 / self.eta)
        if self.lambda_w is None:
            lam_w = (1.0 + (self.eta**2) * 2.0 ** (-self.r - 1) / math.pi) / self.eta
            object.__setattr__(self, "lambda_w", lam_w)
        if self.nu_w is None:
            object.__setattr__(self, "nu_w", self.d ** (-1.25))
        if self.nu_a is None:
            object.__setattr__(self, "nu_a", 1.0 / math.sqrt(self.m))
        if self.m > self.d:
            warnings.warn(
                f"m={self.m} exceeds d={self.d}; the recovery guarantees are "
                "derived for m = O(d)", stacklevel=2)

    def to_dict(self):
        return {
            "d": self.d, "r": self.r, "m": self.m, "T": self.T,
            "n_per_task": self.n_per_task, "seed": self.seed, "eta": self.eta,
            "lambda_a": self.lambda_a, "lambda_w": self.lambda_w,
            "nu_w": self.nu_w, "nu_a": self.nu_a,
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


@dataclass(frozen=True)
class PretrainResult:
    W0: np.ndarray
    Wplus: np.ndarray
    heads_plus: np.ndarray
    config: PretrainConfig
    task_set: tasks.TaskSet
    wall_time_s: float
    seed: int

    def params0(self):
        cfg = self.config
        return network.NetParams(
            self.W0, np.zeros(cfg.m), self.heads_plus * 0.0, cfg.d, cfg.r,
            cfg.m, cfg.T, cfg.nu_w, cfg.nu_a)


def head_step(params, task_index, samples, labels, eta, lambda_a, method="gd"):
    """One regularized gradient step on a single head from its mirrored start.

    ``method="closed_form"`` uses the shortcut eta * mean(y * relu(W x)),
    which is only the same update when the network output is identically zero
    (untouched symmetric init, zero biases) and lambda_a equals 1/eta; it
    raises ContractViolation otherwise. With ``method="gd"`` and the shortcut
    applicable, agreement between the two routes is asserted on every call.
    """
    samples = np.asarray(samples, dtype=float)
    labels = np.asarray(labels, dtype=float)
    shortcut_ok = (
        lambda_a == 1.0 / eta
        and network.is_symmetric_init(params)
    )
    if method == "closed_form":
        if not shortcut_ok:
            raise ContractViolation(
                "closed-form head step needs untouched symmetric init and lambda_a = 1/eta")
        acts = np.maximum(samples @ params.W.T, 0.0)
        return eta * (labels @ acts) / samples.shape[0]
    if method != "gd":
        raise ValueError(f"unknown method {method!r}")
    grad = network.grad_head(params, task_index, samples, labels)
    step = (1.0 - eta * lambda_a) * params.heads[task_index] - eta * grad
    if shortcut_ok:
        acts = np.maximum(samples @ params.W.T, 0.0)
        closed = eta * (labels @ acts) / samples.shape[0]
        err = float(np.max(np.abs(step - closed))) if step.size else 0.0
        if err > 1e-12:
            raise AssertionError(f"head-step closed form disagrees by {err:.3e}")
    return step


def representation_step(params, heads_plus, per_task_batches, eta, lambda_w):
    """One regularized gradient step on W against the freshly updated heads."""
    grad = network.grad_weights(params, heads_plus, per_task_batches)
    return (1.0 - eta * lambda_w) * params.W - eta * grad


# Cap on elements of the largest per-block scratch array in the fused phases.
BLOCK_ELEMS = 1 << 23


def _task_block(T, n, d):
    return max(1, min(T, BLOCK_ELEMS // max(n * d, 1)))


def _block_labels(entry_matrix, X3, r):
    """Labels for a (B, n, d) block against rows lo..hi of the task set."""
    B, n = X3.shape[0], X3.shape[1]
    powers = 1 << np.arange(r, dtype=np.int64)
    codes = (X3[:, :, :r] > 0).astype(np.int64) @ powers       # (B, n)
    return np.take_along_axis(entry_matrix, codes.reshape(B, n), axis=1)


def _blocked_head_phase(params, task_set, config, gen):
    """All head steps at once, exploiting the mirrored first layer.

    At the untouched symmetric init every margin is active, so the update is
    affine in the data term; the activations of the duplicated rows coincide,
    so only the m/2 distinct rows are ever multiplied. Draws consume the
    stream in task order, matching the per-task reference path bit for bit.
    """
    T, n, d = config.T, config.n_per_task, config.d
    half = config.m // 2
    W_half = params.W[:half]
    entries = task_set.label_matrix()
    decay = 1.0 - config.eta * config.lambda_a
    heads_plus = decay * params.heads
    block = _task_block(T, n, d)
    for lo in range(0, T, block):
        hi = min(lo + block, T)
        B = hi - lo
        X3 = tasks.sample_gaussian_inputs(d, B * n, gen).reshape(B, n, d)
        pre = X3.reshape(-1, d) @ W_half.T
        np.maximum(pre, 0.0, out=pre)
        y = _block_labels(entries[lo:hi], X3, config.r)
        mean_term = np.matmul(y[:, None, :], pre.reshape(B, n, half))[:, 0, :]
        mean_term *= config.eta / n
        heads_plus[lo:hi, :half] += mean_term
        heads_plus[lo:hi, half:] += mean_term
    return heads_plus


def _blocked_rep_phase(params, heads_plus, task_set, config, gen):
    """The weight step with task-blocked GEMMs; mirrors grad_weights exactly.

    Duplicated rows share gates, so the per-row gradient only differs between
    the two halves through the head entries; when those coincide (the
    lambda_a = 1/eta default) the second gradient product is skipped.
    """
    T, n, d = config.T, config.n_per_task, config.d
    half = config.m // 2
    W_half = params.W[:half]
    entries = task_set.label_matrix()
    a_top, a_bot = heads_plus[:, :half], heads_plus[:, half:]
    halves_equal = np.array_equal(a_top, a_bot)
    grad_top = np.zeros((half, d))
    grad_bot = np.zeros((half, d))
    block = _task_block(T, n, d)
    for lo in range(0, T, block):
        hi = min(lo + block, T)
        B = hi - lo
        X3 = tasks.sample_gaussian_inputs(d, B * n, gen).reshape(B, n, d)
        flat = X3.reshape(-1, d)
        pre = flat @ W_half.T                                   # (B*n, half)
        gated = (pre > 0.0).astype(float)
        np.maximum(pre, 0.0, out=pre)
        y = _block_labels(entries[lo:hi], X3, config.r)
        # full-network prediction: duplicated rows sum the two head halves
        preds = np.matmul(pre.reshape(B, n, half),
                          (a_top[lo:hi] + a_bot[lo:hi])[:, :, None])[:, :, 0]
        coeff = np.where((1.0 - y * preds) > 0.0, -y, 0.0)
        flat *= coeff.reshape(-1, 1)
        gated3 = gated.reshape(B, n, half)
        if not halves_equal:
            gated_bot = gated3 * a_bot[lo:hi, None, :]
            grad_bot += gated_bot.reshape(-1, half).T @ flat
        gated3 *= a_top[lo:hi, None, :]
        grad_top += gated.T @ flat
    if halves_equal:
        grad_bot = grad_top
    grad = np.vstack([grad_top, grad_bot]) / (T * n)
    return (1.0 - config.eta * config.lambda_w) * params.W - config.eta * grad


def pretrain(config):
    """Full two-phase run: init, per-task head steps, one shared weight step.

    Deterministic given config.seed; task draw, init, and the two data phases
    use independent child streams so any one piece can be re-derived alone.
    The fused phases are algebraically identical to composing head_step and
    representation_step over per-task batches (asserted in the test suite);
    they just batch the matrix products.
    """
    t0 = time.perf_counter()
    ss = np.random.SeedSequence(config.seed)
    task_ss, init_ss, head_ss, rep_ss = ss.spawn(4)

    task_set = tasks.sample_tasks(config.r, config.T, as_generator(task_ss))
    params = network.symmetric_init(
        config.d, config.r, config.m, config.T, config.nu_w, config.nu_a,
        as_generator(init_ss))

    heads_plus = _blocked_head_phase(params, task_set, config, as_generator(head_ss))
    Wplus = _blocked_rep_phase(params, heads_plus, task_set, config,
                               as_generator(rep_ss))

    return PretrainResult(
        W0=params.W, Wplus=Wplus, heads_plus=heads_plus, config=config,
        task_set=task_set, wall_time_s=time.perf_counter() - t0,
        seed=config.seed)
