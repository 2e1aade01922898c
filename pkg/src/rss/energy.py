"""Differentiable energies over logit matrices.

Every model returns (value, gradient) from a single ``evaluate`` call so the
sampler can cache the pair. The structural surrogates here stand in for an
expensive folding objective: a unimodal profile-matching energy, a pairwise
coupling energy with tunable multimodality, and an analytic Gaussian used as
a correctness oracle for the walk kernel.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .core import Rng, as_logits, row_marginals


class EnergyModel(ABC):
    """Differentiable energy E(logits) with an analytic gradient.

    ``evaluate`` must be deterministic, side-effect free, and finite for all
    finite inputs; the gradient is validated against central differences in
    the test suite (rel. error < 1e-5 at seeded random points).
    """

    @property
    @abstractmethod
    def shape(self) -> tuple[int, int]:
        """(L, K) this model acts on."""

    @abstractmethod
    def evaluate(self, logits: np.ndarray) -> tuple[float, np.ndarray]:
        """Return (energy, gradient) at the given logit matrix."""

    def _check_dims(self, logits: np.ndarray, name: str = "energy"):
        if logits.shape != self.shape:
            raise ValueError(
                f"{name}: logits shape {logits.shape} does not match model shape {self.shape}"
            )


def _softmax_row_backprop(marginals: np.ndarray, dE_dq: np.ndarray) -> np.ndarray:
    # chain rule through row-wise softmax: g_ik = q_ik * (v_ik - <v_i, q_i>)
    inner = (marginals * dE_dq).sum(axis=1, keepdims=True)
    return marginals * (dE_dq - inner)


class CompositeEnergy(EnergyModel):
    """Weighted sum of a structural term and a prior term.

    E = structural + lam * prior, gradients likewise; each component is
    evaluated exactly once per call.
    """

    def __init__(self, structural: EnergyModel, prior: EnergyModel, lam: float):
        if lam < 0:
            raise ValueError("prior weight lam must be >= 0")
        if structural.shape != prior.shape:
            raise ValueError(
                f"component shapes differ: structural {structural.shape}, prior {prior.shape}"
            )
        self.structural = structural
        self.prior = prior
        self.lam = float(lam)

    @property
    def shape(self) -> tuple[int, int]:
        return self.structural.shape

    def evaluate(self, logits: np.ndarray) -> tuple[float, np.ndarray]:
        logits = as_logits(logits)
        if logits.shape != self.structural.shape:
            raise ValueError(
                f"structural component expects {self.structural.shape}, got {logits.shape}"
            )
        e_s, g_s = self.structural.evaluate(logits)
        e_p, g_p = self.prior.evaluate(logits)
        return e_s + self.lam * e_p, g_s + self.lam * g_p


class TargetProfileEnergy(EnergyModel):
    """Cross-entropy of desired per-site compositions against the marginals.

    E = sum_i H(target_i, q_i(logits)); minimized when every row marginal
    matches its target. Gradient per row is simply q_i - target_i. Unimodal,
    used as a smoke-test structural surrogate.
    """

    def __init__(self, targets: np.ndarray):
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim != 2:
            raise ValueError("targets must be an (L, K) matrix")
        if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-8):
            raise ValueError("each target row must lie on the simplex")
        self.targets = targets
        self.targets.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.targets.shape

    def evaluate(self, logits: np.ndarray) -> tuple[float, np.ndarray]:
        logits = as_logits(logits)
        self._check_dims(logits, "TargetProfileEnergy")
        q = row_marginals(logits)
        # log q via the shifted logits avoids log(0) for saturated rows
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_q = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        value = float(-(self.targets * log_q).sum())
        return value, q - self.targets


class PairwiseContactEnergy(EnergyModel):
    """Bilinear coupling energy over marginals with per-site field terms.

    E = sum_{(i,j)} q_i^T M_ij q_j + sum_i q_i^T h_i. Couplings create
    barriers between distant token configurations, which is exactly what the
    jump kernel exists to cross. Also exposes the induced discrete energy
    at exact one-hot marginals: E(x) = sum M_ij[x_i, x_j] + sum h_i[x_i].
    """

    def __init__(self, contacts, fields: np.ndarray):
        fields = np.asarray(fields, dtype=np.float64)
        if fields.ndim != 2:
            raise ValueError("fields must be an (L, K) matrix")
        length, vocab = fields.shape
        idx_i, idx_j, mats = [], [], []
        for i, j, m in contacts:
            m = np.asarray(m, dtype=np.float64)
            if not (0 <= i < length and 0 <= j < length) or i == j:
                raise ValueError(f"contact ({i}, {j}) out of range or self-coupling")
            if m.shape != (vocab, vocab):
                raise ValueError(f"coupling for ({i}, {j}) must be {vocab}x{vocab}")
            idx_i.append(i)
            idx_j.append(j)
            mats.append(m)
        self.fields = fields
        self.idx_i = np.asarray(idx_i, dtype=np.int64)
        self.idx_j = np.asarray(idx_j, dtype=np.int64)
        self.couplings = (
            np.stack(mats) if mats else np.zeros((0, vocab, vocab), dtype=np.float64)
        )
        for arr in (self.fields, self.idx_i, self.idx_j, self.couplings):
            arr.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.fields.shape

    @property
    def contacts(self):
        return [
            (int(i), int(j), self.couplings[c])
            for c, (i, j) in enumerate(zip(self.idx_i, self.idx_j))
        ]

    def evaluate(self, logits: np.ndarray) -> tuple[float, np.ndarray]:
        logits = as_logits(logits)
        self._check_dims(logits, "PairwiseContactEnergy")
        q = row_marginals(logits)
        value = float((q * self.fields).sum())
        dq = self.fields.copy()
        if self.couplings.shape[0]:
            qi = q[self.idx_i]
            qj = q[self.idx_j]
            value += float(np.einsum("ca,cab,cb->", qi, self.couplings, qj))
            np.add.at(dq, self.idx_i, np.einsum("cab,cb->ca", self.couplings, qj))
            np.add.at(dq, self.idx_j, np.einsum("cab,ca->cb", self.couplings, qi))
        return value, _softmax_row_backprop(q, dq)

    def discrete_energy(self, tokens) -> float:
        """Energy of a token sequence at exact one-hot marginals."""
        toks = np.asarray(tokens, dtype=np.int64)
        length, vocab = self.shape
        if toks.shape != (length,) or np.any(toks < 0) or np.any(toks >= vocab):
            raise ValueError("token sequence does not match the landscape dims")
        value = float(self.fields[np.arange(length), toks].sum())
        if self.couplings.shape[0]:
            value += float(
                self.couplings[
                    np.arange(self.couplings.shape[0]),
                    toks[self.idx_i],
                    toks[self.idx_j],
                ].sum()
            )
        return value

    def discrete_energies(self, token_matrix: np.ndarray) -> np.ndarray:
        """Vectorized discrete energies for an (N, L) batch of sequences."""
        toks = np.asarray(token_matrix, dtype=np.int64)
        length = self.shape[0]
        if toks.ndim != 2 or toks.shape[1] != length:
            raise ValueError("token matrix must be (N, L)")
        values = self.fields[np.arange(length), toks].sum(axis=1)
        if self.couplings.shape[0]:
            c_idx = np.arange(self.couplings.shape[0])
            values = values + self.couplings[
                c_idx, toks[:, self.idx_i], toks[:, self.idx_j]
            ].sum(axis=1)
        return values


class GaussianEnergy(EnergyModel):
    """Isotropic quadratic well: E = ||logits - center||^2 / (2 scale^2).

    The Boltzmann target exp(-beta E) is then Gaussian with mean ``center``
    and per-coordinate variance scale^2 / beta, giving analytic moments for
    walk-kernel correctness checks.
    """

    def __init__(self, center: np.ndarray, scale: float):
        center = np.asarray(center, dtype=np.float64)
        if center.ndim != 2:
            raise ValueError("center must be an (L, K) matrix")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.center = center
        self.center.flags.writeable = False
        self.scale = float(scale)

    @property
    def shape(self) -> tuple[int, int]:
        return self.center.shape

    def evaluate(self, logits: np.ndarray) -> tuple[float, np.ndarray]:
        logits = as_logits(logits)
        self._check_dims(logits, "GaussianEnergy")
        diff = logits - self.center
        var = self.scale * self.scale
        return float((diff * diff).sum()) / (2.0 * var), diff / var


class CountingEnergy(EnergyModel):
    """Wrapper counting evaluate() calls; the unit of compute for benchmarks."""

    def __init__(self, inner: EnergyModel):
        self.inner = inner
        self.calls = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.inner.shape

    def evaluate(self, logits: np.ndarray) -> tuple[float, np.ndarray]:
        self.calls += 1
        return self.inner.evaluate(logits)


class LandscapeGenerationError(RuntimeError):
    """Raised when a planted landscape fails its construction checks."""


MAX_ENUMERATION = 10_000_000


def enumerate_token_space(length: int, vocab: int, chunk: int = 262_144):
    """Yield (N, L) chunks covering all vocab**length token sequences.

    Sequences are in lexicographic order with position 0 most significant.
    """
    total = vocab**length
    if total > MAX_ENUMERATION:
        raise ValueError(
            f"K^L = {total} exceeds the enumeration cap {MAX_ENUMERATION}"
        )
    powers = vocab ** np.arange(length - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        yield (idx[:, None] // powers[None, :]) % vocab


def enumerate_discrete_energies(energy: PairwiseContactEnergy) -> np.ndarray:
    """Discrete energies of every token sequence, in lexicographic order."""
    length, vocab = energy.shape
    out = np.empty(vocab**length, dtype=np.float64)
    pos = 0
    for toks in enumerate_token_space(length, vocab):
        out[pos : pos + toks.shape[0]] = energy.discrete_energies(toks)
        pos += toks.shape[0]
    return out


def sequence_index(tokens, vocab: int) -> int:
    """Lexicographic index of a token sequence in the enumeration order."""
    toks = np.asarray(tokens, dtype=np.int64)
    powers = vocab ** np.arange(toks.size - 1, -1, -1, dtype=np.int64)
    return int((toks * powers).sum())


@dataclass
class PlantedLandscape:
    """A coupling energy with construction-verified low-energy modes."""

    energy: PairwiseContactEnergy
    modes: np.ndarray  # (M, L) planted token sequences
    seed: int
    depth: float
    # enumeration facts frozen at construction time
    median_energy: float = field(default=float("nan"))
    designable_threshold: float = field(default=float("nan"))


def _hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int((a != b).sum())


def _draw_separated_sequences(length, vocab, n_modes, rng: Rng, attempts=10_000):
    modes: list[np.ndarray] = []
    for _ in range(attempts):
        cand = np.array([rng.integer(vocab) for _ in range(length)], dtype=np.int64)
        if all(_hamming(cand, m) >= 2 for m in modes):
            modes.append(cand)
            if len(modes) == n_modes:
                return np.stack(modes)
    raise LandscapeGenerationError(
        f"could not draw {n_modes} sequences with pairwise Hamming >= 2"
    )


def planted_landscape(
    length: int,
    vocab: int,
    n_modes: int,
    depth: float,
    rng: Rng,
    noise_scale: float = 0.05,
    designable_quantile: float = 0.05,
    max_retries: int = 50,
) -> PlantedLandscape:
    """Generate a coupling energy whose low-energy modes are known exactly.

    The returned energy has ``n_modes`` planted sequences that are strict
    local minima of the induced discrete energy, pairwise Hamming >= 2
    apart, each at least ``depth`` below the median discrete energy and
    below the ``designable_quantile`` quantile. All of this is verified by
    exhaustive enumeration (vocab**length <= 1e7 enforced) before the
    landscape is returned; construction retries with fresh draws and raises
    LandscapeGenerationError if the checks never pass.

    Construction plants attractive couplings between mode tokens on every
    site pair, strong enough to sink the modes ``depth`` below the bulk,
    plus small random fields/couplings for roughness and tie-breaking.
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    if n_modes < 1 or n_modes > vocab**length:
        raise ValueError("mode count must be in [1, K^L]")
    if vocab**length > MAX_ENUMERATION:
        raise ValueError(
            f"K^L = {vocab ** length} exceeds the enumeration cap {MAX_ENUMERATION}"
        )
    if length < 2:
        raise ValueError("planted landscapes need length >= 2 for couplings")

    pairs = [(i, j) for i in range(length) for j in range(i + 1, length)]
    n_pairs = len(pairs)
    seed = rng.seed

    for _ in range(max_retries):
        modes = _draw_separated_sequences(length, vocab, n_modes, rng)
        # expected bulk-vs-mode gap per mode: ~ c * n_pairs * (1 - M/K^2)
        bulk_match = min(0.9, n_modes / (vocab * vocab))
        coupling_strength = 1.5 * depth / (n_pairs * (1.0 - bulk_match))
        noise = noise_scale * coupling_strength

        contacts = []
        for i, j in pairs:
            m = noise * rng.normal((vocab, vocab))
            for mode in modes:
                m[mode[i], mode[j]] -= coupling_strength
            contacts.append((i, j, m))
        fields = noise * rng.normal((length, vocab))
        energy = PairwiseContactEnergy(contacts, fields)

        landscape = PlantedLandscape(
            energy=energy, modes=modes, seed=seed, depth=depth
        )
        if _verify_planted(landscape, designable_quantile):
            return landscape

    raise LandscapeGenerationError(
        f"landscape checks failed after {max_retries} attempts "
        f"(L={length}, K={vocab}, modes={n_modes}, depth={depth})"
    )


def _verify_planted(landscape: PlantedLandscape, designable_quantile: float) -> bool:
    energy = landscape.energy
    length, vocab = energy.shape
    all_energies = enumerate_discrete_energies(energy)
    median = float(np.median(all_energies))
    threshold = float(np.quantile(all_energies, designable_quantile))

    for mode in landscape.modes:
        e_mode = all_energies[sequence_index(mode, vocab)]
        if not (e_mode <= median - landscape.depth and e_mode < threshold):
            return False
        # strict local minimum over the Hamming-1 neighborhood
        for i in range(length):
            for tok in range(vocab):
                if tok == mode[i]:
                    continue
                neighbor = mode.copy()
                neighbor[i] = tok
                if all_energies[sequence_index(neighbor, vocab)] <= e_mode:
                    return False

    landscape.median_energy = median
    landscape.designable_threshold = threshold
    return True


# --- landscape text format ------------------------------------------------
#
# Line-oriented, human-readable, bit-exact round trip (17 significant digit
# floats). Layout:
#   header:  "planted-landscape v1", then "seed/L/K/contacts/modes/depth"
#   [fields]      L rows of K floats
#   [contact i j] K rows of K floats, one block per contact
#   [modes]       M rows of L ints


def _fmt_row(values) -> str:
    return " ".join(format(v, ".17g") for v in values)


def save_landscape(landscape: PlantedLandscape, path, comment: str | None = None) -> None:
    energy = landscape.energy
    length, vocab = energy.shape
    lines = ["# planted-landscape v1"]
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"seed {landscape.seed}")
    lines.append(f"L {length}")
    lines.append(f"K {vocab}")
    lines.append(f"contacts {energy.couplings.shape[0]}")
    lines.append(f"modes {landscape.modes.shape[0]}")
    lines.append(f"depth {format(landscape.depth, '.17g')}")
    lines.append("[fields]")
    lines.extend(_fmt_row(row) for row in energy.fields)
    for c in range(energy.couplings.shape[0]):
        lines.append(f"[contact {energy.idx_i[c]} {energy.idx_j[c]}]")
        lines.extend(_fmt_row(row) for row in energy.couplings[c])
    lines.append("[modes]")
    lines.extend(" ".join(str(t) for t in mode) for mode in landscape.modes)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_landscape(path) -> PlantedLandscape:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    header = {}
    pos = 0
    while pos < len(lines) and not lines[pos].startswith("["):
        key, val = lines[pos].split(maxsplit=1)
        header[key] = val
        pos += 1
    length, vocab = int(header["L"]), int(header["K"])
    n_contacts, n_modes = int(header["contacts"]), int(header["modes"])

    def read_block(tag_prefix, rows):
        nonlocal pos
        if not lines[pos].startswith(tag_prefix):
            raise ValueError(f"expected block {tag_prefix!r} at line {pos}")
        tag = lines[pos]
        pos += 1
        block = np.array(
            [[float(x) for x in lines[pos + r].split()] for r in range(rows)]
        )
        pos += rows
        return tag, block

    _, fields = read_block("[fields]", length)
    contacts = []
    for _ in range(n_contacts):
        tag, mat = read_block("[contact", vocab)
        i, j = (int(x) for x in tag[len("[contact") : -1].split())
        contacts.append((i, j, mat))
    _, modes = read_block("[modes]", n_modes)

    landscape = PlantedLandscape(
        energy=PairwiseContactEnergy(contacts, fields),
        modes=modes.astype(np.int64),
        seed=int(header["seed"]),
        depth=float(header["depth"]),
    )
    if not _verify_planted(landscape, 0.05):
        raise LandscapeGenerationError(f"loaded landscape failed verification: {path}")
    return landscape


def boltzmann_mode_mass(landscape: PlantedLandscape, beta: float) -> float:
    """Fraction of discrete Boltzmann mass exp(-beta E) held by the modes."""
    energies = enumerate_discrete_energies(landscape.energy)
    log_w = -beta * energies
    log_w -= log_w.max()
    weights = np.exp(log_w)
    idx = [sequence_index(m, landscape.energy.shape[1]) for m in landscape.modes]
    return float(weights[idx].sum() / weights.sum())
