"""Binary task universe: sign-pattern labelling functions and input samplers.

Every task labels a point by the signs of its first ``r`` coordinates alone;
a task is therefore a truth table on the 2^r sign patterns. Uniform-random
tables give the pairwise half-agreement property that makes the task family
diverse; the full universe of tables satisfies it exactly.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._util import as_generator

MAX_TABLE_R = 20  # 2^20 entries; anything above this is a config mistake
MAX_UNIVERSE_R = 4  # full universe has 2^(2^r) tables


class CapacityExceeded(ValueError):
    """Requested object would be astronomically large."""


@dataclass(frozen=True)
class SignPattern:
    """Bit code of the signs of a vector: bit j set iff coordinate j > 0 (LSB first)."""

    code: int
    r: int

    def __post_init__(self):
        if not 0 <= self.code < (1 << self.r):
            raise ValueError(f"code {self.code} out of range for r={self.r}")


@dataclass(frozen=True)
class LabelTable:
    """Truth table on the 2^r sign patterns, entries in {-1, +1}."""

    r: int
    entries: tuple

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.r > MAX_TABLE_R:
            raise CapacityExceeded(f"r={self.r} exceeds table limit {MAX_TABLE_R}")
        if len(self.entries) != (1 << self.r):
            raise ValueError(f"need {1 << self.r} entries, got {len(self.entries)}")
        if any(e not in (-1, 1) for e in self.entries):
            raise ValueError("table entries must be -1 or +1")

    def to_string(self):
        return "".join("+" if e > 0 else "-" for e in self.entries)

    @classmethod
    def from_string(cls, r, s):
        if len(s) != (1 << r) or any(c not in "+-" for c in s):
            raise ValueError(f"bad table string {s!r} for r={r}")
        return cls(r, tuple(1 if c == "+" else -1 for c in s))


@dataclass(frozen=True)
class TaskSet:
    """Ordered collection of label tables sharing one r."""

    r: int
    tables: tuple
    provenance: str = "unspecified"

    def __post_init__(self):
        if len(self.tables) < 1:
            raise ValueError("a TaskSet needs at least one table")
        if any(t.r != self.r for t in self.tables):
            raise ValueError("all tables must share the same r")

    def __len__(self):
        return len(self.tables)

    def label_matrix(self):
        """T x 2^r array of table entries, row i = task i."""
        return np.array([t.entries for t in self.tables], dtype=float)

    def to_json(self):
        return json.dumps({"r": self.r, "tables": [t.to_string() for t in self.tables]})

    @classmethod
    def from_json(cls, text, provenance="json"):
        obj = json.loads(text)
        tables = tuple(LabelTable.from_string(obj["r"], s) for s in obj["tables"])
        return cls(obj["r"], tables, provenance)


def sign_pattern(x_head):
    """Encode the signs of a length-r vector as a SignPattern.

    sign(0) counts as negative, so the encoding is total and deterministic.
    """
    x_head = np.asarray(x_head, dtype=float)
    if x_head.ndim != 1 or x_head.size == 0:
        raise ValueError("sign_pattern needs a nonempty 1-d vector")
    r = x_head.size
    bits = (x_head > 0).astype(np.uint64)
    code = int(bits @ (1 << np.arange(r, dtype=np.uint64)))
    return SignPattern(code, r)


def pattern_codes(x_heads):
    """Vectorized sign_pattern: n x r array -> length-n int array of codes."""
    x_heads = np.asarray(x_heads, dtype=float)
    if x_heads.ndim != 2 or x_heads.shape[1] == 0:
        raise ValueError("pattern_codes needs a nonempty n x r array")
    r = x_heads.shape[1]
    return (x_heads > 0).astype(np.int64) @ (1 << np.arange(r, dtype=np.int64))


def label(table, x):
    """Task label of a d-dimensional point: table lookup on the first r signs."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < table.r:
        raise ValueError(f"point has dimension {x.size} < r={table.r}")
    return table.entries[sign_pattern(x[: table.r]).code]


def labels_for(table, xs):
    """Vectorized label: n x d array -> length-n array of +/-1 labels."""
    xs = np.asarray(xs, dtype=float)
    codes = pattern_codes(xs[:, : table.r])
    return np.asarray(table.entries, dtype=float)[codes]


def enumerate_universe(r):
    """All 2^(2^r) label tables, ordered lexicographically by their '+'/'-' strings."""
    if r > MAX_UNIVERSE_R:
        raise CapacityExceeded(f"full universe for r={r} has 2^{1 << r} tables")
    n_entries = 1 << r
    tables = []
    for k in range(1 << n_entries):
        # bit (n_entries-1-p) of k gives entry p, so increasing k is
        # lexicographic order of the '+'/'-' strings ('+' sorts first).
        entries = tuple(
            -1 if (k >> (n_entries - 1 - p)) & 1 else 1 for p in range(n_entries)
        )
        tables.append(LabelTable(r, entries))
    return TaskSet(r, tuple(tables), provenance="full-universe")


def sample_tasks(r, T, rng):
    """T i.i.d. uniform label tables (each entry an independent fair sign)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    gen = as_generator(rng)
    signs = gen.integers(0, 2, size=(T, 1 << r)) * 2 - 1
    tables = tuple(LabelTable(r, tuple(int(e) for e in row)) for row in signs)
    return TaskSet(r, tables, provenance="iid-uniform")


def check_diversity(ts):
    """Empirical same-label frequency for every unordered pair of distinct patterns.

    Returns {(code, code'): fraction of tasks with equal labels on the two codes}.
    """
    n_patterns = 1 << ts.r
    mat = ts.label_matrix()
    T = mat.shape[0]
    out = {}
    for u in range(n_patterns):
        for v in range(u + 1, n_patterns):
            out[(u, v)] = float(np.sum(mat[:, u] == mat[:, v]) / T)
    return out


def sample_gaussian_inputs(d, n, rng):
    """n x d matrix of i.i.d. standard Gaussian rows."""
    if d < 1 or n < 1:
        raise ValueError("d and n must be >= 1")
    return as_generator(rng).standard_normal((n, d))


def sample_hypercube_inputs(d, n, rng):
    """n x d matrix with i.i.d. uniform +/-1 entries."""
    if d < 1 or n < 1:
        raise ValueError("d and n must be >= 1")
    return as_generator(rng).integers(0, 2, size=(n, d)).astype(float) * 2 - 1
