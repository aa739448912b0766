"""Independent reference implementations used only to check the package."""

import numpy as np


def jacobi_svd_values(mat, sweeps=60, tol=1e-14):
    """Singular values by one-sided Jacobi rotations on the columns.

    Completely independent of LAPACK: rotate column pairs until all are
    mutually orthogonal; the singular values are the column norms.
    """
    A = np.array(mat, dtype=float)
    if A.shape[0] < A.shape[1]:
        A = A.T
    n = A.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[:, p] @ A[:, q]
                app = A[:, p] @ A[:, p]
                aqq = A[:, q] @ A[:, q]
                off = max(off, abs(apq) / max(np.sqrt(app * aqq), 1e-300))
                if apq == 0.0:
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_p = A[:, p].copy()
                A[:, p] = c * col_p - s * A[:, q]
                A[:, q] = s * col_p + c * A[:, q]
        if off < tol:
            break
    return np.sort(np.linalg.norm(A, axis=0))[::-1]


def mc_a_blocks_loops(w, r, n_mc, seed):
    """Dense per-sample loop estimate of the conditional second-moment blocks.

    Same conditional law as the package estimator (shared sign pattern,
    half-normal magnitudes) but built sample by sample with explicit python
    loops and its own generator, so shapes, masks, and reductions are all
    re-derived from scratch.
    """
    gen = np.random.default_rng(seed)
    d = w.size
    A = np.zeros((d, d))
    for _ in range(n_mc):
        u = gen.integers(0, 2, size=r) * 2 - 1
        x = np.empty(d)
        xp = np.empty(d)
        x[:r] = u * np.abs(gen.standard_normal(r))
        x[r:] = gen.standard_normal(d - r)
        xp[:r] = u * np.abs(gen.standard_normal(r))
        xp[r:] = gen.standard_normal(d - r)
        if (w @ x) > 0 and (w @ xp) > 0:
            A += np.outer(x, xp)
    A /= n_mc
    return A[:r, :r], A[:r, r:], A[r:, :r], A[r:, r:]
