"""Toy masked sequence model and its relaxed (mixture-input) evaluation.

One frozen network serves both modes through a single code path that takes
per-site marginal rows: discrete mode feeds exact one-hot rows, relaxed mode
feeds softmax marginals of a logit matrix. Masked conditionals at site i are
produced by replacing that site's expected embedding with a mask embedding,
so conditionals never depend on the site's own marginal.

Architecture, per site i over context embeddings e_j = q_j @ embed:
    m_i      = mean_{j != i} (e_j + positional_j)        (0 when L == 1)
    h_i      = tanh(mix @ m_i + mask_embed + positional_i)
    logits_i = bias + readout^T h_i
    p_i      = softmax(logits_i / tau)
The leave-one-out mean is formed incrementally (total minus own term), so a
full conditional table costs O(L * (d^2 + d*K)).
"""

from __future__ import annotations

import numpy as np

from .core import Rng, as_logits, one_hot, row_marginals
from .energy import EnergyModel

LOG_TAU_LOW = float(np.log(0.05))
LOG_TAU_HIGH = float(np.log(20.0))


def _check_marginals(marginals: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    q = np.asarray(marginals, dtype=np.float64)
    if q.shape != shape:
        raise ValueError(f"marginal matrix must have shape {shape}, got {q.shape}")
    if not np.all(np.isfinite(q)) or np.any(q < 0):
        raise ValueError("marginal rows must be finite and nonnegative")
    if np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("marginal rows must sum to 1")
    return q


class MaskedSequenceModel:
    """Frozen toy network exposing masked per-site conditionals.

    Weights are immutable after construction; all methods are pure, so one
    model can serve many chains concurrently.
    """

    def __init__(self, embed, mask_embed, positional, mix, readout, bias):
        self.embed = np.asarray(embed, dtype=np.float64)
        self.mask_embed = np.asarray(mask_embed, dtype=np.float64)
        self.positional = np.asarray(positional, dtype=np.float64)
        self.mix = np.asarray(mix, dtype=np.float64)
        self.readout = np.asarray(readout, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

        vocab, width = self.embed.shape
        length = self.positional.shape[0]
        if self.mask_embed.shape != (width,):
            raise ValueError("mask embedding width mismatch")
        if self.positional.shape != (length, width):
            raise ValueError("positional table must be (L, d)")
        if self.mix.shape != (width, width):
            raise ValueError("mixing matrix must be (d, d)")
        if self.readout.shape != (width, vocab):
            raise ValueError("readout must be (d, K)")
        if self.bias.shape != (vocab,):
            raise ValueError("bias must be (K,)")
        for arr in (self.embed, self.mask_embed, self.positional,
                    self.mix, self.readout, self.bias):
            arr.flags.writeable = False

    @classmethod
    def random(cls, length: int, vocab: int = 20, width: int = 16,
               rng: Rng | None = None) -> "MaskedSequenceModel":
        """Fresh frozen model with N(0, 1/sqrt(d)) weights from the given stream."""
        if rng is None:
            rng = Rng(0)
        scale = 1.0 / np.sqrt(width)
        return cls(
            embed=scale * rng.normal((vocab, width)),
            mask_embed=scale * rng.normal((width,)),
            positional=scale * rng.normal((length, width)),
            mix=scale * rng.normal((width, width)),
            readout=scale * rng.normal((width, vocab)),
            bias=scale * rng.normal((vocab,)),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.positional.shape[0], self.embed.shape[0]

    @property
    def width(self) -> int:
        return self.embed.shape[1]

    def scaled(self, factor: float) -> "MaskedSequenceModel":
        """Copy whose raw masked logits are multiplied by ``factor``."""
        return MaskedSequenceModel(
            self.embed, self.mask_embed, self.positional, self.mix,
            factor * self.readout, factor * self.bias,
        )

    # -- shared code path ---------------------------------------------------

    def expected_embeddings(self, marginals) -> np.ndarray:
        """Mixture-weighted token embeddings, one row per site: z = q @ embed."""
        q = _check_marginals(marginals, self.shape)
        return q @ self.embed

    def masked_logits(self, marginals) -> np.ndarray:
        """Raw (untempered) masked logits at every site, (L, K)."""
        q = _check_marginals(marginals, self.shape)
        return self._forward(q)[0]

    def _forward(self, q: np.ndarray):
        # returns (logits, intermediates for backprop)
        length = q.shape[0]
        z = q @ self.embed                       # (L, d)
        ctx = z + self.positional                # (L, d)
        if length > 1:
            loo = (ctx.sum(axis=0)[None, :] - ctx) / (length - 1.0)
        else:
            loo = np.zeros_like(ctx)             # empty mean convention
        pre = loo @ self.mix.T + self.mask_embed[None, :] + self.positional
        hidden = np.tanh(pre)                    # (L, d)
        logits = hidden @ self.readout + self.bias[None, :]
        return logits, hidden

    def conditionals(self, marginals, tau: float) -> np.ndarray:
        """Masked conditional table p_i(.|q; tau) for all sites, (L, K)."""
        if tau <= 0:
            raise ValueError("temperature tau must be positive")
        logits = self.masked_logits(marginals)
        return _tempered_softmax(logits, tau)

    def log_conditionals(self, marginals, tau: float) -> np.ndarray:
        """log of ``conditionals``, exact in log space (no probability floor)."""
        if tau <= 0:
            raise ValueError("temperature tau must be positive")
        return _tempered_log_softmax(self.masked_logits(marginals), tau)

    # -- discrete / relaxed front doors --------------------------------------

    def conditionals_from_tokens(self, tokens, tau: float) -> np.ndarray:
        """Discrete mode: exact one-hot marginal rows for a token sequence."""
        return self.conditionals(one_hot(tokens, self.shape[1]), tau)

    def conditionals_from_logits(self, logits, tau: float) -> np.ndarray:
        """Relaxed mode: marginal rows are the softmax of a logit matrix."""
        return self.conditionals(row_marginals(logits), tau)

    def log_conditionals_from_logits(self, logits, tau: float) -> np.ndarray:
        return self.log_conditionals(row_marginals(logits), tau)


def _tempered_softmax(logits: np.ndarray, tau: float) -> np.ndarray:
    scaled = logits / tau
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    expd = np.exp(scaled)
    return expd / expd.sum(axis=1, keepdims=True)


def _tempered_log_softmax(logits: np.ndarray, tau: float) -> np.ndarray:
    scaled = logits / tau
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    return scaled - np.log(np.exp(scaled).sum(axis=1, keepdims=True))


def expected_embeddings(model: MaskedSequenceModel, logits) -> np.ndarray:
    """Expected embeddings of a logit matrix's marginals."""
    return model.expected_embeddings(row_marginals(logits))


def soft_conditionals(model: MaskedSequenceModel, logits, tau: float) -> np.ndarray:
    return model.conditionals_from_logits(logits, tau)


def discrete_conditionals(model: MaskedSequenceModel, tokens, tau: float) -> np.ndarray:
    return model.conditionals_from_tokens(tokens, tau)


class SoftPlmEnergy(EnergyModel):
    """Alignment energy between relaxed marginals and masked conditionals.

    E(logits) = sum_i H(q_i, p_i(.|q; tau)) with q = softmax rows of the
    logits. The analytic gradient propagates through both pathways: the
    outer expectation over q_i and the dependence of every conditional on
    the other sites' expected embeddings.
    """

    def __init__(self, model: MaskedSequenceModel, tau: float):
        if tau <= 0:
            raise ValueError("temperature tau must be positive")
        self.model = model
        self.tau = float(tau)

    @property
    def shape(self) -> tuple[int, int]:
        return self.model.shape

    def evaluate(self, logits: np.ndarray) -> tuple[float, np.ndarray]:
        logits = as_logits(logits)
        self._check_dims(logits, "SoftPlmEnergy")
        model, tau = self.model, self.tau
        length = logits.shape[0]

        q = row_marginals(logits)
        raw, hidden = model._forward(q)
        log_p = _tempered_log_softmax(raw, tau)
        p = np.exp(log_p)
        value = float(-(q * log_p).sum())

        # context pathway: dE/d(raw logits at site i) = (p_i - q_i) / tau
        g_raw = (p - q) / tau
        g_hidden = g_raw @ model.readout.T
        g_pre = (1.0 - hidden * hidden) * g_hidden
        g_loo = g_pre @ model.mix                       # rows: mix^T g_pre_i
        if length > 1:
            g_ctx = (g_loo.sum(axis=0)[None, :] - g_loo) / (length - 1.0)
        else:
            g_ctx = np.zeros_like(g_loo)
        dq_context = g_ctx @ model.embed.T

        # outer pathway: dE/dq_i holding conditionals fixed
        dq_outer = -log_p

        dq = dq_outer + dq_context
        inner = (q * dq).sum(axis=1, keepdims=True)
        return value, q * (dq - inner)


def golden_section_minimize(fn, lo: float, hi: float, tol: float) -> float:
    """Golden-section minimum of a unimodal scalar function on [lo, hi]."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def calibrate_temperature(
    model: MaskedSequenceModel,
    reference: MaskedSequenceModel,
    contexts,
    tol: float = 1e-4,
) -> float:
    """Global temperature minimizing KL(reference conditional || model at tau).

    ``contexts`` is a list of (token sequence, site) pairs; reference
    conditionals are taken at temperature 1 on exact one-hot rows. The
    search is golden-section over log tau in [ln 0.05, ln 20] to ``tol``
    in log space.
    """
    contexts = list(contexts)
    if not contexts:
        raise ValueError("temperature calibration needs at least one context")
    if model.shape != reference.shape:
        raise ValueError(
            f"model shape {model.shape} differs from reference {reference.shape}"
        )

    ref_rows = []
    raw_rows = []
    for tokens, site in contexts:
        marg = one_hot(tokens, model.shape[1])
        ref_rows.append(reference.conditionals(marg, 1.0)[site])
        raw_rows.append(model.masked_logits(marg)[site])
    ref_rows = np.stack(ref_rows)
    raw_rows = np.stack(raw_rows)

    def objective(log_tau: float) -> float:
        log_p = _tempered_log_softmax(raw_rows, float(np.exp(log_tau)))
        # mean KL(ref || p); ref entropy term is constant but kept for clarity
        nz = ref_rows > 0
        return float(
            np.sum(ref_rows[nz] * (np.log(ref_rows[nz]) - log_p[nz])) / len(contexts)
        )

    return float(np.exp(golden_section_minimize(objective, LOG_TAU_LOW, LOG_TAU_HIGH, tol)))


# --- model weight file ------------------------------------------------------
#
# Same conventions as the landscape format: shape header, one named block
# per array, 17-significant-digit floats, bit-exact round trip.

_BLOCKS = ("embed", "mask", "positional", "mix", "readout", "bias")


def save_model(model: MaskedSequenceModel, path) -> None:
    length, vocab = model.shape
    width = model.width
    arrays = {
        "embed": model.embed,
        "mask": model.mask_embed[None, :],
        "positional": model.positional,
        "mix": model.mix,
        "readout": model.readout,
        "bias": model.bias[None, :],
    }
    lines = ["# masked-sequence-model v1", f"L {length}", f"K {vocab}", f"d {width}"]
    for name in _BLOCKS:
        lines.append(f"[{name}]")
        lines.extend(
            " ".join(format(v, ".17g") for v in row) for row in arrays[name]
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> MaskedSequenceModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    header = {}
    pos = 0
    while pos < len(lines) and not lines[pos].startswith("["):
        key, val = lines[pos].split()
        header[key] = int(val)
        pos += 1
    length, vocab, width = header["L"], header["K"], header["d"]
    rows = {
        "embed": vocab, "mask": 1, "positional": length,
        "mix": width, "readout": width, "bias": 1,
    }
    arrays = {}
    for name in _BLOCKS:
        if lines[pos] != f"[{name}]":
            raise ValueError(f"expected block [{name}] in {path}")
        pos += 1
        arrays[name] = np.array(
            [[float(x) for x in lines[pos + r].split()] for r in range(rows[name])]
        )
        pos += rows[name]
    return MaskedSequenceModel(
        embed=arrays["embed"],
        mask_embed=arrays["mask"][0],
        positional=arrays["positional"],
        mix=arrays["mix"],
        readout=arrays["readout"],
        bias=arrays["bias"][0],
    )
