"""Feature-recovery statistics and Monte-Carlo verification of the one-step theory.

The verification side estimates the conditional second-moment operator that
drives the weight update: with a sign pattern u shared by two independent
Gaussian points, the four blocks of E[relu'(w.x) relu'(w.x') x x'^T | u]
admit closed forms that the one-step coefficients are built from. Sampling
conditions exactly by composing signs with half-normal magnitudes, so no
draws are rejected.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tasks
from ._util import as_generator, spectral_norm, worker_count

MC_CHUNK = 65536


def project_parallel(W, r):
    """Columns of W on the label-relevant coordinates (first r)."""
    W = np.asarray(W, dtype=float)
    if not 0 < r < W.shape[1]:
        raise ValueError(f"need 0 < r < d, got r={r}, d={W.shape[1]}")
    return W[:, :r]


def project_perp(W, r):
    """Columns of W on the spurious coordinates (last d - r)."""
    W = np.asarray(W, dtype=float)
    if not 0 < r < W.shape[1]:
        raise ValueError(f"need 0 < r < d, got r={r}, d={W.shape[1]}")
    return W[:, r:]


@dataclass(frozen=True)
class RecoveryMetrics:
    """How much of the update survives on the relevant vs spurious coordinates."""

    prop1_parallel_residual: float
    prop1_perp_norm: float
    thm1_ratio: float
    sigma_r_parallel: float
    m_bar: int
    r: int

    def to_dict(self):
        return {
            "prop1_parallel_residual": self.prop1_parallel_residual,
            "prop1_perp_norm": self.prop1_perp_norm,
            "thm1_ratio": self.thm1_ratio,
            "sigma_r_parallel": self.sigma_r_parallel,
            "m_bar": self.m_bar,
            "r": self.r,
        }


def recovery_metrics(W0, Wplus, r, eta, nu_w):
    """Spectral statistics of one update, computed on the m/2 distinct neurons.

    The parallel block is compared against the predicted shrink-by-
    eta^2 2^(-r-2) copy of its initialization; the spurious block should be
    near zero; their ratio (spurious spectral norm over r-th singular value of
    the parallel block) is the single-number recovery score.
    """
    W0 = np.asarray(W0, dtype=float)
    Wplus = np.asarray(Wplus, dtype=float)
    if W0.shape != Wplus.shape:
        raise ValueError("W0 and Wplus must have identical shapes")
    m = W0.shape[0]
    if m % 2 != 0:
        raise ValueError("expected an even number of neurons (mirrored init)")
    m_bar = m // 2
    top0, top_plus = W0[:m_bar], Wplus[:m_bar]
    coeff = eta**2 * 2.0 ** (-r - 2)
    scale = nu_w * math.sqrt(m_bar)
    par_residual = spectral_norm(
        project_parallel(top_plus, r) - coeff * project_parallel(top0, r)) / scale
    perp_norm = spectral_norm(project_perp(top_plus, r)) / scale
    svals = np.linalg.svd(project_parallel(top_plus, r), compute_uv=False)
    sigma_r = float(svals[r - 1]) if svals.size >= r else 0.0
    if sigma_r > 0.0:
        ratio = perp_norm * scale / sigma_r
    else:
        ratio = math.inf
    return RecoveryMetrics(float(par_residual), float(perp_norm), float(ratio),
                           sigma_r, m_bar, r)


def beta(task_set, x, xp):
    """Average over tasks of the label product of two points; lies in [-1, 1]."""
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    cx = tasks.sign_pattern(x[: task_set.r]).code
    cxp = tasks.sign_pattern(xp[: task_set.r]).code
    mat = task_set.label_matrix()
    return float(np.mean(mat[:, cx] * mat[:, cxp]))


def beta_from_codes(task_set, codes_a, codes_b):
    """Vectorized beta for arrays of sign-pattern codes."""
    mat = task_set.label_matrix()
    return np.mean(mat[:, codes_a] * mat[:, codes_b], axis=0)


@dataclass(frozen=True)
class ContrastivePair:
    """Global loss after the head updates next to its pairwise-alignment form."""

    exact_loss: float
    contrastive_approx: float
    threshold_rate: float
    n: int
    T: int

    def to_dict(self):
        return {
            "exact_loss": self.exact_loss,
            "contrastive_approx": self.contrastive_approx,
            "threshold_rate": self.threshold_rate,
            "n": self.n,
            "T": self.T,
        }


def contrastive_loss_pair(W, task_set, samples, eta=1.0):
    """Empirical loss after one head step vs. 1 - mean of beta-weighted kernel.

    Both quantities are computed on the same sample set: the head for task i
    is eta * mean(y_i * relu(W x)) over the set, and the pairwise form
    averages beta(x_l, x_k) * relu(W x_k).relu(W x_l) over all ordered pairs
    (diagonal included), which makes the two sides identical whenever no
    per-sample prediction crosses the hinge threshold. The fraction that does
    cross is reported.
    """
    W = np.asarray(W, dtype=float)
    X = np.asarray(samples, dtype=float)
    n = X.shape[0]
    acts = np.maximum(X @ W.T, 0.0)                      # n x m
    codes = tasks.pattern_codes(X[:, : task_set.r])
    labels = task_set.label_matrix()[:, codes]           # T x n
    heads_plus = eta * (labels @ acts) / n               # T x m
    preds = acts @ heads_plus.T                          # n x T
    margins = 1.0 - labels.T * preds
    exact = float(np.mean(np.maximum(margins, 0.0)))

    kernel = acts @ acts.T                               # n x n
    beta_mat = (labels.T @ labels) / task_set.label_matrix().shape[0]
    approx = 1.0 - eta * float(np.mean(beta_mat * kernel))

    rate = float(np.mean(np.abs(preds) > 1.0))
    return ContrastivePair(exact, approx, rate, n, len(task_set))


@dataclass(frozen=True)
class ABlockEstimate:
    """Monte-Carlo estimates of the four conditional second-moment blocks."""

    A_pp: np.ndarray
    A_pq: np.ndarray
    A_qp: np.ndarray
    A_qq: np.ndarray
    se_pp: float
    se_pq: float
    se_qp: float
    se_qq: float
    n_mc: int
    seed: object

    def to_dict(self):
        return {
            "n_mc": self.n_mc,
            "seed": self.seed,
            "se_frobenius": {
                "pp": self.se_pp, "pq": self.se_pq,
                "qp": self.se_qp, "qq": self.se_qq,
            },
            "A_pp": self.A_pp.tolist(),
            "A_pq": self.A_pq.tolist(),
            "A_qp": self.A_qp.tolist(),
            "A_qq": self.A_qq.tolist(),
        }


def _a_block_chunk(w, r, size, gen):
    """Partial sums (and square sums) of the block outer products for one chunk."""
    d = w.size
    w_par, w_perp = w[:r], w[r:]
    u = gen.integers(0, 2, size=(size, r)).astype(float) * 2 - 1
    x_par = u * np.abs(gen.standard_normal((size, r)))
    x_perp = gen.standard_normal((size, d - r))
    xp_par = u * np.abs(gen.standard_normal((size, r)))
    xp_perp = gen.standard_normal((size, d - r))
    gate = ((x_par @ w_par + x_perp @ w_perp) > 0.0) & \
           ((xp_par @ w_par + xp_perp @ w_perp) > 0.0)
    g = gate.astype(float)[:, None]
    sums = (
        (x_par * g).T @ xp_par,
        (x_par * g).T @ xp_perp,
        (x_perp * g).T @ xp_par,
        (x_perp * g).T @ xp_perp,
    )
    sqs = (
        (x_par**2 * g).T @ xp_par**2,
        (x_par**2 * g).T @ xp_perp**2,
        (x_perp**2 * g).T @ xp_par**2,
        (x_perp**2 * g).T @ xp_perp**2,
    )
    return sums, sqs


def estimate_A_blocks(w, r, n_mc, rng):
    """Monte-Carlo estimate of the blocks of E[gate(x) gate(x') x x'^T | shared u].

    The conditioning on a shared sign pattern is realized exactly: u is a
    uniform sign vector, the first r coordinates of both points are u times
    independent half-normal magnitudes, and the remaining coordinates are
    independent Gaussians. Chunks own derived generators and are reduced in
    chunk order, so the result is reproducible for any worker count.
    """
    w = np.asarray(w, dtype=float)
    d = w.size
    if not 0 < r < d:
        raise ValueError(f"need 0 < r < d, got r={r}, d={d}")
    if np.linalg.norm(w[r:]) == 0.0:
        raise ValueError("w must have a nonzero spurious block; the closed "
                         "forms divide by its norm")
    if n_mc < 10_000:
        raise ValueError("n_mc below 1e4 gives meaningless standard errors")
    seed_rec = rng if isinstance(rng, (int, np.integer)) else None
    gen = as_generator(rng)
    sizes = [MC_CHUNK] * (n_mc // MC_CHUNK)
    if n_mc % MC_CHUNK:
        sizes.append(n_mc % MC_CHUNK)
    children = gen.spawn(len(sizes))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        parts = list(pool.map(
            lambda args: _a_block_chunk(w, r, args[0], args[1]),
            zip(sizes, children)))

    shape_list = [(r, r), (r, d - r), (d - r, r), (d - r, d - r)]
    sums = [np.zeros(s) for s in shape_list]
    sqs = [np.zeros(s) for s in shape_list]
    for part_sums, part_sqs in parts:
        for k in range(4):
            sums[k] += part_sums[k]
            sqs[k] += part_sqs[k]

    means, ses = [], []
    for k in range(4):
        mean = sums[k] / n_mc
        var = np.maximum(sqs[k] / n_mc - mean**2, 0.0)
        ses.append(float(np.sqrt(np.sum(var) / n_mc)))
        means.append(mean)
    return ABlockEstimate(means[0], means[1], means[2], means[3],
                          ses[0], ses[1], ses[2], ses[3], n_mc, seed_rec)


def a_parallel_perp_candidates(w, r):
    """Both printed closed forms for the parallel-perp block, keyed by coefficient.

    They share the rank-one direction w_par w_perp^T / ||w_perp||^2 and differ
    by a factor of four; the estimator adjudicates between them.
    """
    w = np.asarray(w, dtype=float)
    w_par, w_perp = w[:r], w[r:]
    sq = float(w_perp @ w_perp)
    if sq == 0.0:
        raise ValueError("w must have a nonzero spurious block")
    outer = np.outer(w_par, w_perp) / sq
    return {
        "coeff-1-over-2pi": outer / (2.0 * math.pi),
        "coeff-2-over-pi": outer * (2.0 / math.pi),
    }


def a_block_closed_forms(w, r):
    """(A_pp, A_pq, A_qq) closed forms.

    A_pp is exactly I_r / 4; A_qq is the rank-one spurious form; A_pq uses the
    1/(2 pi) coefficient, the candidate the Monte-Carlo adjudication selects
    (see adjudicate_a_parallel_perp).
    """
    w = np.asarray(w, dtype=float)
    w_par, w_perp = w[:r], w[r:]
    sq_perp = float(w_perp @ w_perp)
    if sq_perp == 0.0:
        raise ValueError("w must have a nonzero spurious block")
    sq_par = float(w_par @ w_par)
    A_pp = 0.25 * np.eye(r)
    A_pq = a_parallel_perp_candidates(w, r)["coeff-1-over-2pi"]
    A_qq = (1.0 - sq_par / sq_perp) * np.outer(w_perp, w_perp) / (2.0 * math.pi * sq_perp)
    return A_pp, A_pq, A_qq


def adjudicate_a_parallel_perp(d, r, n_mc, n_probes, rng):
    """Pick the parallel-perp closed form that the estimator supports.

    Draws ``n_probes`` probe directions w ~ N(0, I_d), estimates the block at
    ``n_mc`` samples each, and scores both candidate coefficients by Frobenius
    error. Returns a report with per-probe errors, the winner, and the
    loser/winner error ratio.
    """
    gen = as_generator(rng)
    probe_gen, mc_gen = gen.spawn(2)
    errors = {"coeff-1-over-2pi": [], "coeff-2-over-pi": []}
    for _ in range(n_probes):
        w = probe_gen.standard_normal(d)
        est = estimate_A_blocks(w, r, n_mc, mc_gen)
        cands = a_parallel_perp_candidates(w, r)
        for name, cand in cands.items():
            errors[name].append(float(np.linalg.norm(est.A_pq - cand)))
    mean_err = {name: float(np.mean(v)) for name, v in errors.items()}
    winner = min(mean_err, key=mean_err.get)
    loser = max(mean_err, key=mean_err.get)
    ratio = mean_err[loser] / mean_err[winner] if mean_err[winner] > 0 else math.inf
    return {
        "winner": winner,
        "loser_over_winner_error": ratio,
        "mean_frobenius_error": mean_err,
        "per_probe_error": errors,
        "n_mc": n_mc,
        "n_probes": n_probes,
    }


def init_sanity(W0, nu_w, m, r):
    """Row-norm envelopes and least-singular-value check for a fresh init.

    Uses the m/2 distinct rows. Envelopes are sqrt(k) +/- c sqrt(log m) in
    units of nu_w with c = 3, which puts each row outside with probability
    well under 1e-4 at desk scale. The singular-value check targets the r-th
    singular value of the parallel block, the quantity the recovery ratio
    divides by.
    """
    W0 = np.asarray(W0, dtype=float)
    if W0.shape[0] != m:
        raise ValueError("m does not match W0")
    if m % 2 != 0:
        raise ValueError("expected an even number of neurons")
    m_bar = m // 2
    top = W0[:m_bar]
    d = top.shape[1]
    c = 3.0
    dev = c * math.sqrt(math.log(m))
    env = {
        "parallel_max": nu_w * (math.sqrt(r) + dev),
        "perp_min": nu_w * (math.sqrt(d - r) - dev),
        "perp_max": nu_w * (math.sqrt(d - r) + dev),
        "full_min": nu_w * (math.sqrt(d) - dev),
        "full_max": nu_w * (math.sqrt(d) + dev),
    }
    norm_par = np.linalg.norm(top[:, :r], axis=1)
    norm_perp = np.linalg.norm(top[:, r:], axis=1)
    norm_full = np.linalg.norm(top, axis=1)
    within = (
        bool(np.max(norm_par) <= env["parallel_max"])
        and bool(np.min(norm_perp) >= env["perp_min"])
        and bool(np.max(norm_perp) <= env["perp_max"])
        and bool(np.min(norm_full) >= env["full_min"])
        and bool(np.max(norm_full) <= env["full_max"])
    )
    svals_par = np.linalg.svd(top[:, :r], compute_uv=False)
    sigma_r_par = float(svals_par[r - 1]) if svals_par.size >= r else 0.0
    sigma_min_full = float(np.linalg.svd(top, compute_uv=False)[-1])
    scale = nu_w * math.sqrt(m_bar)
    sigma_bound = 1.0 - c * math.sqrt(r) / math.sqrt(m_bar)
    sigma_ratio = sigma_r_par / scale if scale > 0 else math.inf
    sigma_ok = bool(sigma_ratio >= sigma_bound)
    return {
        "m_bar": m_bar,
        "envelope_constant": c,
        "envelopes": env,
        "norm_extremes": {
            "parallel_max": float(np.max(norm_par)),
            "parallel_min": float(np.min(norm_par)),
            "perp_max": float(np.max(norm_perp)),
            "perp_min": float(np.min(norm_perp)),
            "full_max": float(np.max(norm_full)),
            "full_min": float(np.min(norm_full)),
        },
        "all_within_envelopes": within,
        "sigma_r_parallel_over_scale": float(sigma_ratio),
        "sigma_min_full_over_scale": float(sigma_min_full / scale) if scale > 0 else math.inf,
        "sigma_bound": float(sigma_bound),
        "sigma_ok": sigma_ok,
        "ok": bool(within and sigma_ok),
    }
