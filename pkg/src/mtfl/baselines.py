"""Sparse-parity tasks and the learned-vs-random-features comparison.

A parity task multiplies the hypercube bits on its support. Data-independent
random features with a bounded-norm guarantee serve as the baseline: a
pretrained stack concentrates on the label-relevant coordinates and keeps
solving parities over them at budgets where the random features stall.
"""

import itertools
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import downstream, pretrain, tasks
from ._util import as_generator, atomic_write_text, dump_json, spectral_norm


@dataclass(frozen=True)
class ParityTask:
    """Label = product of the hypercube bits indexed by the support."""

    u: tuple
    d: int

    def __post_init__(self):
        object.__setattr__(self, "u", tuple(sorted(int(i) for i in self.u)))
        if len(set(self.u)) != len(self.u):
            raise ValueError("support indices must be distinct")
        if any(i < 0 or i >= self.d for i in self.u):
            raise ValueError(f"support index out of range for d={self.d}")

    @property
    def r(self):
        return len(self.u)


def parity_label(task, v):
    """Product of v over the support; the empty support gives the constant +1."""
    v = np.asarray(v, dtype=float)
    if v.shape != (task.d,):
        raise ValueError(f"point has shape {v.shape}, task expects ({task.d},)")
    if not np.all(np.abs(v) == 1.0):
        raise ValueError("parity tasks live on the hypercube")
    if not task.u:
        return 1
    return int(np.prod(v[list(task.u)]))


def parity_labels(task, V):
    """Vectorized parity_label over an n x d block."""
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[1] != task.d:
        raise ValueError(f"points have shape {V.shape}, task expects (*, {task.d})")
    if not task.u:
        return np.ones(V.shape[0])
    return np.prod(V[:, list(task.u)], axis=1)


@dataclass(frozen=True)
class RandomFeatureEmbedding:
    """One random ReLU layer scaled so every hypercube point lands in the unit ball.

    The divisor is the analytic bound sup_v |relu(W v + b)| <= |W|_2 sqrt(d)
    + |b|_2, so the norm condition holds for all v, not just sampled ones.
    """

    W: np.ndarray
    b: np.ndarray
    normalizer: float

    @property
    def d(self):
        return self.W.shape[1]

    @property
    def m_hat(self):
        return self.W.shape[0]

    def embed_batch(self, V):
        V = np.asarray(V, dtype=float)
        feats = np.maximum(V @ self.W.T + self.b, 0.0)
        if self.normalizer == 0.0:
            return np.zeros_like(feats)
        return feats / self.normalizer


def random_feature_embedding(d, m_hat, rng):
    """Rows N(0, I_d / d), biases Unif[-1, 1], normalized by the analytic sup bound."""
    if m_hat < 1:
        raise ValueError("m_hat must be >= 1")
    gen = as_generator(rng)
    W = gen.standard_normal((m_hat, d)) / math.sqrt(d)
    b = gen.uniform(-1.0, 1.0, size=m_hat)
    normalizer = spectral_norm(W) * math.sqrt(d) + float(np.linalg.norm(b))
    return RandomFeatureEmbedding(W, b, normalizer)


def ground_truth_supports(r):
    """Parity supports over the label-relevant coordinates.

    All nonempty subsets of the first r coordinates (just the empty support
    when r = 0). These are the downstream tasks the pretrained stack is
    supposed to cover; arbitrary supports can be passed explicitly instead.
    """
    if r == 0:
        return [()]
    out = []
    for size in range(1, r + 1):
        out.extend(itertools.combinations(range(r), size))
    return out


@dataclass(frozen=True)
class ComparisonRecord:
    rows: list          # one dict per (seed, support, embedding)
    summary: dict
    seeds: tuple

    CSV_COLUMNS = ("seed", "support", "embedding", "eval_loss", "eval_accuracy")

    def to_csv(self, path):
        lines = [",".join(self.CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(str(row[c]) for c in self.CSV_COLUMNS))
        atomic_write_text(path, "\n".join(lines) + "\n")

    def to_json(self, path):
        dump_json(self.summary, path)


def _fit_and_eval(features_train, y_train, features_eval, y_eval,
                  lambda_hat, n_iters):
    head = downstream.fit_hinge_head(features_train, y_train, lambda_hat, n_iters)
    preds = features_eval @ head.a + head.tau
    loss = float(np.mean(np.maximum(1.0 - y_eval * preds, 0.0)))
    acc = float(np.mean(np.where(preds > 0.0, 1.0, -1.0) == y_eval))
    return loss, acc


def separation_experiment(d, r, m_hat, n_train, n_eval, seeds, pretrain_cfg,
                          supports=None, lambda_hat=1e-3, n_iters=2000,
                          gamma=None, gamma_hat=None):
    """Head-to-head parity comparison between a pretrained stack and random features.

    For every seed, every support gets two heads trained on the same data:
    one over the learned embedding (built from a fresh pretrain at that seed),
    one over a width- and budget-matched random-feature map. Reported per
    task: eval loss and accuracy on fresh points; per seed and embedding: the
    worst-task accuracy, mirroring the adversarial-task form of the
    random-feature lower bound.
    """
    if supports is None:
        supports = ground_truth_supports(r)
    supports = [tuple(sorted(u)) for u in supports]
    r_eff = max(r, 1)  # pretraining needs at least one relevant coordinate
    if gamma is None or gamma_hat is None:
        g_def, gh_def = downstream.default_downstream_scales(r_eff)
        gamma = g_def if gamma is None else gamma
        gamma_hat = gh_def if gamma_hat is None else gamma_hat

    rows = []
    per_seed = {"learned": [], "random": []}
    t0 = time.perf_counter()
    for seed in seeds:
        pre_ss, emb_ss, rf_ss, data_ss = np.random.SeedSequence(seed).spawn(4)
        cfg = replace(pretrain_cfg, d=d, r=r_eff,
                      seed=int(pre_ss.generate_state(1)[0]))
        result = pretrain.pretrain(cfg)
        learned, _ = downstream.build_embedding_pair(
            result.W0, result.Wplus, cfg.r, cfg.eta, cfg.nu_w,
            m_hat, gamma, gamma_hat, as_generator(emb_ss))
        psi = random_feature_embedding(d, m_hat, as_generator(rf_ss))

        data_gen = as_generator(data_ss)
        worst = {"learned": 1.0, "random": 1.0}
        for u in supports:
            task = ParityTask(u, d)
            V_train = tasks.sample_hypercube_inputs(d, n_train, data_gen)
            V_eval = tasks.sample_hypercube_inputs(d, n_eval, data_gen)
            y_train = parity_labels(task, V_train)
            y_eval = parity_labels(task, V_eval)
            for name, feats_tr, feats_ev in (
                ("learned", downstream.embed_batch(learned, V_train),
                 downstream.embed_batch(learned, V_eval)),
                ("random", psi.embed_batch(V_train), psi.embed_batch(V_eval)),
            ):
                loss, acc = _fit_and_eval(feats_tr, y_train, feats_ev, y_eval,
                                          lambda_hat, n_iters)
                rows.append({
                    "seed": seed,
                    "support": "|".join(map(str, u)) if u else "const",
                    "embedding": name,
                    "eval_loss": loss,
                    "eval_accuracy": acc,
                })
                worst[name] = min(worst[name], acc)
        per_seed["learned"].append(worst["learned"])
        per_seed["random"].append(worst["random"])

    summary = {
        "d": d, "r": r, "m_hat": m_hat,
        "n_train": n_train, "n_eval": n_eval,
        "lambda_hat": lambda_hat, "n_iters": n_iters,
        "n_supports": len(supports),
        "worst_task_accuracy_per_seed": per_seed,
        "median_worst_task_accuracy": {
            name: float(np.median(vals)) for name, vals in per_seed.items()
        },
        "wall_time_s": time.perf_counter() - t0,
    }
    return ComparisonRecord(rows, summary, tuple(seeds))
