"""Shared numeric primitives and the deterministic RNG used by every chain.

State is a real logit matrix of shape (L, K): L sequence positions, K
vocabulary tokens. Rows map to categorical marginals through a stabilized
softmax. Everything here is pure and operates on float64 arrays.
"""

from __future__ import annotations

import numpy as np

# Probabilities are clamped here before any log. The perturbation this
# introduces is < 1e-12 on every distribution the test suite touches.
LOG_FLOOR = 1e-300

# Fixed 20-letter display alphabet for decoded sequences (display only;
# tokens are integers 0..K-1 everywhere else).
DISPLAY_ALPHABET = "ACDEFGHIKLMNPQRSTVWY"


class Rng:
    """Deterministic random stream backed by numpy's PCG64.

    One Rng per chain; never share across threads. The same seed yields a
    bit-identical draw sequence for a given numpy version. Categorical and
    token draws consume exactly one uniform each (inverse CDF), so the
    draw order of every sampler operation is reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=None) -> np.ndarray | float:
        """Standard normal scalar (shape=None) or array."""
        if shape is None:
            return float(self._gen.standard_normal())
        return self._gen.standard_normal(shape)

    def uniform(self) -> float:
        """One uniform draw in [0, 1)."""
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def bernoulli(self, p: np.ndarray) -> np.ndarray:
        """Independent Bernoulli vector: one uniform per entry of p."""
        p = np.asarray(p, dtype=np.float64)
        return self.uniforms(p.shape[0]) < p

    def categorical(self, weights: np.ndarray) -> int:
        """Index drawn proportional to nonnegative weights (one uniform)."""
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("categorical weights must be a nonempty vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("categorical weights must be finite and nonnegative")
        cdf = np.cumsum(w)
        total = cdf[-1]
        if total <= 0:
            raise ValueError("categorical weights sum to zero")
        idx = int(np.searchsorted(cdf, self.uniform() * total, side="right"))
        return min(idx, w.size - 1)

    def integer(self, n: int) -> int:
        """Uniform token in [0, n) from a single uniform draw."""
        return min(int(self.uniform() * n), n - 1)


def as_logits(logits) -> np.ndarray:
    """Validate and return a float64 (L, K) logit matrix, L >= 1, K >= 2."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"logit matrix must be 2-D, got shape {arr.shape}")
    length, vocab = arr.shape
    if length < 1 or vocab < 2:
        raise ValueError(f"logit matrix needs L >= 1 and K >= 2, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("logit matrix contains non-finite entries")
    return arr


def row_marginals(logits) -> np.ndarray:
    """Per-row softmax of a logit matrix, computed with max subtraction.

    Each output row is a point on the (K-1)-simplex; rows sum to 1 within
    1e-12 and the result is invariant to adding a constant to any row.
    """
    arr = as_logits(logits)
    shifted = arr - arr.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def softmax(vec) -> np.ndarray:
    """Stable softmax of a single vector."""
    v = np.asarray(vec, dtype=np.float64)
    shifted = v - v.max()
    expd = np.exp(shifted)
    return expd / expd.sum()


def argmax_decode(logits) -> np.ndarray:
    """Token sequence of per-row argmax indices; ties break to the lowest index."""
    arr = as_logits(logits)
    return np.argmax(arr, axis=1).astype(np.int64)


def one_hot(tokens, vocab: int) -> np.ndarray:
    """Exact one-hot simplex rows (entries 0.0 or 1.0) for integer tokens."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1:
        raise ValueError("token sequence must be 1-D")
    if np.any(toks < 0) or np.any(toks >= vocab):
        raise ValueError(f"tokens must lie in [0, {vocab})")
    out = np.zeros((toks.size, vocab), dtype=np.float64)
    out[np.arange(toks.size), toks] = 1.0
    return out


def _check_simplex_pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError(f"{name} is not a valid distribution")
        if abs(v.sum() - 1.0) > 1e-8:
            raise ValueError(f"{name} does not sum to 1 (sum={v.sum()!r})")
    return p, q


def cross_entropy(p, q) -> float:
    """-sum_k p[k] log q[k], with q floored at 1e-300 before the log."""
    p, q = _check_simplex_pair(p, q)
    return float(-(p * np.log(np.maximum(q, LOG_FLOOR))).sum())


def entropy(p) -> float:
    """Shannon entropy in nats; 0 log 0 treated as 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; q floored at 1e-300, p-zero terms contribute 0."""
    p, q = _check_simplex_pair(p, q)
    nz = p > 0
    return float((p[nz] * (np.log(p[nz]) - np.log(np.maximum(q[nz], LOG_FLOOR)))).sum())


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence (natural log, midpoint mixture); in [0, ln 2]."""
    p, q = _check_simplex_pair(p, q)
    mid = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, mid) + 0.5 * kl_divergence(q, mid)


def finite_diff_gradient(fn, logits, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a logit matrix.

    This is the independent oracle every analytic gradient in the package
    is checked against. O(2*L*K) function evaluations.
    """
    base = as_logits(logits)
    if h <= 0:
        raise ValueError("step h must be positive")
    grad = np.empty_like(base)
    work = base.copy()
    for i in range(base.shape[0]):
        for k in range(base.shape[1]):
            orig = work[i, k]
            work[i, k] = orig + h
            f_plus = fn(work)
            work[i, k] = orig - h
            f_minus = fn(work)
            work[i, k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(
                    f"non-finite function value while differencing entry ({i}, {k})"
                )
            grad[i, k] = (f_plus - f_minus) / (2.0 * h)
    return grad


def decode_to_letters(tokens) -> str:
    """Display form of a token sequence; only defined for K <= 20 vocabularies."""
    toks = np.asarray(tokens, dtype=np.int64)
    if np.any(toks < 0) or np.any(toks >= len(DISPLAY_ALPHABET)):
        raise ValueError("token out of range for the 20-letter display alphabet")
    return "".join(DISPLAY_ALPHABET[t] for t in toks)
