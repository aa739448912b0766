"""Frozen two-hidden-layer embeddings and the trained linear head on top.

The learned stack rescales the updated first-layer weights; its purified twin
replaces them with the initialization's label-relevant columns (zero
elsewhere) so it provably ignores the spurious coordinates. Both stacks share
the random first-layer biases and the entire random second layer, which makes
their outputs directly comparable point by point.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tasks
from ._util import as_generator, atomic_write_bytes, atomic_write_text
from .pretrain import ContractViolation

EMBED_CHUNK = 8192
EXHAUSTIVE_D_MAX = 16
SAMPLED_EVAL_POINTS = 1 << 14


@dataclass(frozen=True)
class EmbeddingStack:
    layer1_W: np.ndarray
    layer1_b: np.ndarray
    layer2_W: np.ndarray
    layer2_b: np.ndarray
    variant: str            # "learned" | "purified"
    scale: float            # first-layer rescale actually applied
    gamma: float
    gamma_hat: float
    pair_id: str

    @property
    def d(self):
        return self.layer1_W.shape[1]

    @property
    def m_bar(self):
        return self.layer1_W.shape[0]

    @property
    def m_hat(self):
        return self.layer2_W.shape[0]


@dataclass(frozen=True)
class DownstreamHead:
    a: np.ndarray
    tau: float
    convergence: dict = None


def default_downstream_scales(r):
    """Bias spreads for the two random layers; the log floor keeps r=1 sane."""
    if r < 1:
        raise ValueError("r must be >= 1")
    log_floor = max(1.0, math.log(r))
    return math.sqrt(r) * log_floor, r**3 * log_floor**4


def one_step_parallel_coeff(r, eta):
    """Surviving fraction of the label-relevant weight block after one update.

    This is the empirically verified value (the per-neuron least-squares fit
    matches it to about 1%): the two relevant second-moment blocks each
    contribute 1/(2 pi), the regularizer removes half of the sum.
    """
    return eta**2 * 2.0 ** (-r - 1) / math.pi


def learned_rescale(r, eta, nu_w, m_bar):
    """Rescale for the updated weights so both stacks see unit-scale inputs.

    Chosen so that multiplying the ideal one-step update
    one_step_parallel_coeff * W0_par by it lands exactly on
    purified_rescale * W0_par, which is what couples the stack pair.
    """
    return purified_rescale(nu_w, m_bar) / one_step_parallel_coeff(r, eta)


def purified_rescale(nu_w, m_bar):
    return 2.0 / (nu_w * math.sqrt(m_bar))


def build_embedding_pair(W0, Wplus, r, eta, nu_w, m_hat, gamma, gamma_hat, rng):
    """Coupled (learned, purified) stacks sharing all random layers.

    First layers use the m/2 distinct neurons. The learned stack rescales the
    updated weights; the purified stack rescales the initialization's first r
    columns and zeroes the rest. Biases and the second layer are drawn once.
    """
    W0 = np.asarray(W0, dtype=float)
    Wplus = np.asarray(Wplus, dtype=float)
    if W0.shape != Wplus.shape:
        raise ValueError("W0 and Wplus must have identical shapes")
    m, d = W0.shape
    if m % 2 != 0:
        raise ValueError("expected an even number of neurons (mirrored init)")
    if m_hat < 1:
        raise ValueError("m_hat must be >= 1")
    m_bar = m // 2
    gen = as_generator(rng)
    pair_id = f"{gen.integers(1 << 62):016x}"
    b1 = gen.uniform(-1.0, 1.0, size=m_bar) * (math.sqrt(2.0) * gamma / math.sqrt(m_bar))
    W2 = gen.standard_normal((m_hat, m_bar)) * math.sqrt(2.0 / m_hat)
    b2 = gen.uniform(-1.0, 1.0, size=m_hat) * (math.sqrt(2.0) * gamma_hat / math.sqrt(m_hat))

    alpha = learned_rescale(r, eta, nu_w, m_bar)
    alpha_hat = purified_rescale(nu_w, m_bar)
    pure_W = np.zeros((m_bar, d))
    pure_W[:, :r] = alpha_hat * W0[:m_bar, :r]

    learned = EmbeddingStack(alpha * Wplus[:m_bar], b1, W2, b2,
                             "learned", alpha, gamma, gamma_hat, pair_id)
    purified = EmbeddingStack(pure_W, b1, W2, b2,
                              "purified", alpha_hat, gamma, gamma_hat, pair_id)
    return learned, purified


def _check_hypercube(V, d):
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[None, :]
    if V.shape[1] != d:
        raise ValueError(f"inputs have dimension {V.shape[1]}, stack expects {d}")
    if not np.all(np.abs(V) == 1.0):
        raise ValueError("downstream inputs must have entries in {-1, +1}")
    return V


def embed(stack, v):
    """Embedding of one hypercube point; entries are nonnegative (outer ReLU)."""
    V = _check_hypercube(v, stack.d)
    return embed_batch(stack, V)[0]


def embed_batch(stack, V):
    """Embeddings of an n x d block of hypercube points, chunked for memory."""
    V = _check_hypercube(V, stack.d)
    out = np.empty((V.shape[0], stack.m_hat))
    for lo in range(0, V.shape[0], EMBED_CHUNK):
        hi = min(lo + EMBED_CHUNK, V.shape[0])
        h = np.maximum(V[lo:hi] @ stack.layer1_W.T + stack.layer1_b, 0.0)
        out[lo:hi] = np.maximum(h @ stack.layer2_W.T + stack.layer2_b, 0.0)
    return out


def enumerate_hypercube(d):
    """All 2^d sign vectors; bit j of the row index gives coordinate j."""
    if d > EXHAUSTIVE_D_MAX:
        raise ValueError(f"exhaustive enumeration capped at d={EXHAUSTIVE_D_MAX}")
    idx = np.arange(1 << d, dtype=np.int64)
    return (((idx[:, None] >> np.arange(d)) & 1) * 2 - 1).astype(float)


def fit_hinge_head(features, labels, lambda_hat, n_iters, init=None,
                   checkpoint_every=100):
    """Averaged deterministic subgradient descent on the regularized hinge.

    Full-batch subgradients, step 1/(lambda_hat * t) at iteration t, iterates
    projected onto the ball ||(a, tau)|| <= sqrt(2/lambda_hat) that must
    contain every minimizer (the zero head already achieves objective 1);
    returns the uniformly averaged iterate. The attached report tracks the
    averaged iterate's objective at checkpoints, its running minimum, and
    whether the final point sits within twice the last-decade decrease of
    that minimum.
    """
    G = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("need a nonempty feature matrix")
    if y.shape != (G.shape[0],):
        raise ValueError("labels must match the number of feature rows")
    if lambda_hat <= 0:
        raise ValueError("lambda_hat must be > 0")
    n, k = G.shape
    a = np.zeros(k) if init is None else np.array(init[0], dtype=float)
    tau = 0.0 if init is None else float(init[1])
    avg_a = np.zeros(k)
    avg_tau = 0.0
    radius = math.sqrt(2.0 / lambda_hat)

    def objective(av, tv):
        margins = 1.0 - y * (G @ av + tv)
        return float(np.mean(np.maximum(margins, 0.0))
                     + 0.5 * lambda_hat * (av @ av + tv * tv))

    checkpoints = []
    for t in range(1, n_iters + 1):
        margins = y * (G @ a + tau)
        active_y = np.where(margins < 1.0, y, 0.0)
        grad_a = lambda_hat * a - (active_y @ G) / n
        grad_tau = lambda_hat * tau - float(np.mean(active_y))
        step = 1.0 / (lambda_hat * t)
        a = a - step * grad_a
        tau = tau - step * grad_tau
        norm = math.sqrt(a @ a + tau * tau)
        if norm > radius:
            a *= radius / norm
            tau *= radius / norm
        avg_a += (a - avg_a) / t
        avg_tau += (tau - avg_tau) / t
        if t % checkpoint_every == 0 or t == n_iters:
            checkpoints.append((t, objective(avg_a, avg_tau)))

    objs = [c[1] for c in checkpoints]
    final_obj = objs[-1]
    min_obj = min(objs)
    decade_start = max(0, int(math.ceil(len(objs) * 0.9)) - 1)
    decade_decrease = max(objs[decade_start] - final_obj, 0.0)
    report = {
        "final_objective": final_obj,
        "min_objective": min_obj,
        "last_decade_decrease": decade_decrease,
        "converged": final_obj - min_obj <= 2.0 * decade_decrease + 1e-12,
        "n_iters": n_iters,
        "lambda_hat": lambda_hat,
        "checkpoints": checkpoints,
    }
    return DownstreamHead(avg_a, float(avg_tau), report)


def train_head(stack, samples, lambda_hat, n_iters):
    """Fit the regularized hinge head on embedded samples.

    ``samples`` is either a (V, y) pair of arrays or a list of (v, y) tuples.
    """
    if isinstance(samples, tuple) and len(samples) == 2:
        V, y = samples
    else:
        if len(samples) == 0:
            raise ValueError("need at least one sample")
        V = np.array([s[0] for s in samples], dtype=float)
        y = np.array([s[1] for s in samples], dtype=float)
    V = _check_hypercube(V, stack.d)
    return fit_hinge_head(embed_batch(stack, V), y, lambda_hat, n_iters)


def predict(stack, head, V):
    return embed_batch(stack, V) @ head.a + head.tau


def _eval_points(stack, eval_inputs):
    if eval_inputs is None:
        if stack.d > EXHAUSTIVE_D_MAX:
            raise ValueError(
                f"exhaustive evaluation needs d <= {EXHAUSTIVE_D_MAX}; "
                "pass eval_inputs explicitly")
        return enumerate_hypercube(stack.d)
    return _check_hypercube(eval_inputs, stack.d)


def eval_loss(stack, head, table, eval_inputs=None):
    """Mean hinge of the head over the given points (all 2^d points if omitted)."""
    V = _eval_points(stack, eval_inputs)
    y = tasks.labels_for(table, V)
    preds = predict(stack, head, V)
    return float(np.mean(np.maximum(1.0 - y * preds, 0.0)))


def eval_accuracy(stack, head, table, eval_inputs=None):
    """Fraction of points whose predicted sign matches the label."""
    V = _eval_points(stack, eval_inputs)
    y = tasks.labels_for(table, V)
    preds = predict(stack, head, V)
    signs = np.where(preds > 0.0, 1.0, -1.0)
    return float(np.mean(signs == y))


def margin_check(stack, table, r, d, points=None, rng=None,
                 lambda_schedule=(1e-2, 1e-3, 1e-4), n_iters=2000):
    """Near-max-margin separability probe for one table over the embedding.

    Trains the hinge head along a decreasing-regularization continuation
    (warm-started), then reports the normalized margin
    min_v y (a.g(v) + tau) / ||(a, tau)|| and whether every point is signed
    correctly.
    """
    if d != stack.d:
        raise ValueError("d must match the stack")
    if points is None:
        if d <= EXHAUSTIVE_D_MAX:
            points = enumerate_hypercube(d)
        else:
            if rng is None:
                raise ValueError("d > 16 needs either points or an rng to sample them")
            points = tasks.sample_hypercube_inputs(d, SAMPLED_EVAL_POINTS, rng)
    points = _check_hypercube(points, d)
    y = tasks.labels_for(table, points)
    G = embed_batch(stack, points)
    head = None
    for lam in lambda_schedule:
        init = None if head is None else (head.a, head.tau)
        head = fit_hinge_head(G, y, lam, n_iters, init=init)
    raw = y * (G @ head.a + head.tau)
    denom = math.sqrt(float(head.a @ head.a) + head.tau**2)
    margin = float(np.min(raw) / denom) if denom > 0 else 0.0
    separable = bool(np.all(raw > 0.0))
    return margin, separable


@dataclass(frozen=True)
class GapStats:
    gaps: np.ndarray
    median: float
    max: float

    def to_dict(self):
        return {"median": self.median, "max": self.max, "n_points": int(self.gaps.size)}


def embedding_gap(learned, purified, inputs):
    """Per-point distance between the coupled embeddings, with summary stats."""
    if learned.pair_id != purified.pair_id:
        raise ContractViolation("stacks were not built as a coupled pair")
    if {learned.variant, purified.variant} != {"learned", "purified"}:
        raise ContractViolation("need one learned and one purified stack")
    V = _check_hypercube(inputs, learned.d)
    diff = embed_batch(learned, V) - embed_batch(purified, V)
    gaps = np.linalg.norm(diff, axis=1)
    return GapStats(gaps, float(np.median(gaps)), float(np.max(gaps)))


def save_stack(stack, prefix):
    """Write <prefix>.json (metadata) and <prefix>.bin (f64 LE matrices)."""
    header = {
        "variant": stack.variant,
        "scale": stack.scale,
        "gamma": stack.gamma,
        "gamma_hat": stack.gamma_hat,
        "pair_id": stack.pair_id,
        "m_bar": stack.m_bar,
        "d": stack.d,
        "m_hat": stack.m_hat,
    }
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for arr in (stack.layer1_W, stack.layer1_b, stack.layer2_W, stack.layer2_b))
    atomic_write_text(prefix + ".json", json.dumps(header, indent=2, sort_keys=True) + "\n")
    atomic_write_bytes(prefix + ".bin", blob)


def load_stack(prefix):
    with open(prefix + ".json") as fh:
        header = json.load(fh)
    m_bar, d, m_hat = header["m_bar"], header["d"], header["m_hat"]
    blob = np.fromfile(prefix + ".bin", dtype="<f8")
    sizes = [m_bar * d, m_bar, m_hat * m_bar, m_hat]
    if blob.size != sum(sizes):
        raise ValueError(f"{prefix}.bin has {blob.size} values, expected {sum(sizes)}")
    offs = np.cumsum([0] + sizes)
    return EmbeddingStack(
        blob[offs[0]:offs[1]].reshape(m_bar, d).copy(),
        blob[offs[1]:offs[2]].copy(),
        blob[offs[2]:offs[3]].reshape(m_hat, m_bar).copy(),
        blob[offs[3]:offs[4]].copy(),
        header["variant"], header["scale"], header["gamma"],
        header["gamma_hat"], header["pair_id"])
