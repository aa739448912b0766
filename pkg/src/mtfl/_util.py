"""Shared numerical plumbing: RNG handling, spectral norms, worker pools."""

import os
import json
import tempfile

import numpy as np

# Spectral norms go through power iteration with this budget; matrices whose
# short side is at most SVD_CUTOFF (or that fail to converge) fall back to SVD.
POWER_ITERS = 100
POWER_TOL = 1e-10
SVD_CUTOFF = 16


def as_generator(rng):
    """Accept a Generator, a SeedSequence, or an int seed; return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def spectral_norm(mat):
    """Largest singular value of a 2-d array.

    Power iteration on the Gram matrix of the short side, deterministic start
    vector, SVD fallback for small or slowly-converging inputs.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2:
        raise ValueError("spectral_norm expects a 2-d array")
    if mat.size == 0:
        return 0.0
    if min(mat.shape) <= SVD_CUTOFF:
        return float(np.linalg.svd(mat, compute_uv=False)[0])

    gram = mat @ mat.T if mat.shape[0] <= mat.shape[1] else mat.T @ mat
    n = gram.shape[0]
    v = as_generator(20221117).standard_normal(n)
    v /= np.linalg.norm(v)
    for _ in range(POWER_ITERS):
        w = gram @ v
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        gv = gram @ v
        lam = float(v @ gv)
        # eigenvalue error is bounded by the residual norm (symmetric Gram)
        if np.linalg.norm(gv - lam * v) <= POWER_TOL * max(lam, 1e-300):
            return float(np.sqrt(max(lam, 0.0)))
    return float(np.linalg.svd(mat, compute_uv=False)[0])


def worker_count():
    """Worker pool size; capped by the MTFL_THREADS environment variable."""
    cap = os.environ.get("MTFL_THREADS")
    available = os.cpu_count() or 1
    if cap is None:
        return min(4, available)
    try:
        cap = int(cap)
    except ValueError as exc:
        raise ValueError(f"MTFL_THREADS must be an integer, got {cap!r}") from exc
    return max(1, cap)


def atomic_write_text(path, text):
    """Write text to path via a temp file + rename so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, blob):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj, path):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
