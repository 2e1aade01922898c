"""Independent oracles and the masked-model validation suite.

Everything here is deterministic given (inputs, seed) and side-effect free.
The suite mirrors three checks on the relaxed model: one-hot fidelity
(discrete vs relaxed conditionals on exact one-hot contexts, plus the
substitution-score vs gradient-difference rank correlation), mixture
consistency (relaxed conditionals on blurred contexts vs Monte Carlo
marginalization of the discrete model), and library ranking (relaxed
cross-entropy scores vs discrete pseudo-NLL aggregates). The jump-flow
enumerator is the ground-truth detailed-balance check for the swap kernel.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .core import Rng, cross_entropy, js_divergence, kl_divergence, one_hot
from .energy import EnergyModel
from .sampler import SamplerConfig, mask_log_mass, mask_probabilities
from .softplm import MaskedSequenceModel

EPS_GRID_DEFAULT = (0.0, 0.2, 0.4, 0.6, 0.8)
BLUR_FRACTION = 0.3
OPTION_SIZE = 3
K_VARIANTS_DEFAULT = 256
K_MC_DEFAULT = 8


def spearman(a, b) -> float | None:
    """Rank correlation with average ranks on ties; None when undefined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("spearman needs two equal-length series of length >= 2")
    ra = rankdata(a)
    rb = rankdata(b)
    sa = ra - ra.mean()
    sb = rb - rb.mean()
    denom = np.sqrt((sa * sa).sum() * (sb * sb).sum())
    if denom == 0.0:
        return None
    return float((sa * sb).sum() / denom)


def _random_subset(length: int, count: int, rng: Rng) -> np.ndarray:
    # partial Fisher-Yates; deterministic given the stream
    idx = np.arange(length)
    for k in range(count):
        j = k + rng.integer(length - k)
        idx[k], idx[j] = idx[j], idx[k]
    return np.sort(idx[:count])


def random_sequences(length: int, vocab: int, count: int, rng: Rng) -> np.ndarray:
    return np.array(
        [[rng.integer(vocab) for _ in range(length)] for _ in range(count)],
        dtype=np.int64,
    )


# --- one-hot fidelity ---------------------------------------------------------


@dataclass
class FidelityReport:
    mean_kl: float
    spearman_mean: float
    spearman_median: float
    sample_count: int
    per_site_spearman: list = field(default_factory=list)


def onehot_fidelity(
    model: MaskedSequenceModel,
    sequences,
    rng: Rng,
    tau: float = 1.0,
    sites_per_sequence: int = 1,
) -> FidelityReport:
    """Discrete-vs-relaxed agreement on exact one-hot contexts.

    For each sampled (sequence, site) pair: KL between the discrete
    conditional and the relaxed conditional on the explicitly built one-hot
    marginal rows (zero by shared-path construction), and the Spearman
    correlation between the K-1 substitution scores
    delta(a->b) = -log p(b) + log p(a) from the discrete conditionals and
    the same differences taken from the relaxed loss gradient with respect
    to the site's marginal row (which is -log of the relaxed conditional,
    since the masked context excludes the site's own marginal).
    """
    sequences = np.asarray(sequences, dtype=np.int64)
    if sequences.ndim != 2 or sequences.shape[0] == 0:
        raise ValueError("sequences must be a nonempty (N, L) token matrix")
    length, vocab = model.shape
    kls = []
    rhos = []
    for tokens in sequences:
        marg = one_hot(tokens, vocab)
        discrete = model.conditionals_from_tokens(tokens, tau)
        soft = model.conditionals(marg, tau)
        soft_log = model.log_conditionals(marg, tau)
        for _ in range(sites_per_sequence):
            site = rng.integer(length)
            kls.append(kl_divergence(discrete[site], soft[site]))
            native = tokens[site]
            others = [b for b in range(vocab) if b != native]
            disc_log = np.log(np.maximum(discrete[site], 1e-300))
            deltas = [-disc_log[b] + disc_log[native] for b in others]
            grads = [-soft_log[site, b] + soft_log[site, native] for b in others]
            rho = spearman(deltas, grads)
            if rho is not None:
                rhos.append(rho)
    return FidelityReport(
        mean_kl=float(np.mean(kls)),
        spearman_mean=float(np.mean(rhos)) if rhos else float("nan"),
        spearman_median=float(np.median(rhos)) if rhos else float("nan"),
        sample_count=len(kls),
        per_site_spearman=rhos,
    )


# --- mixture consistency --------------------------------------------------------


@dataclass
class MixtureRow:
    eps: float
    mean_js: float
    top1_agreement: float
    sample_count: int


def _blurred_marginals(tokens, blur_sites, eps: float, vocab: int) -> np.ndarray:
    marg = one_hot(tokens, vocab)
    marg[blur_sites] = (1.0 - eps) * marg[blur_sites] + eps / vocab
    return marg


def mixture_consistency(
    model: MaskedSequenceModel,
    sequences,
    rng: Rng,
    eps_grid=EPS_GRID_DEFAULT,
    k_mc: int = K_MC_DEFAULT,
    tau: float = 1.0,
    blur_fraction: float = BLUR_FRACTION,
) -> list[MixtureRow]:
    """Relaxed conditionals on blurred contexts vs Monte Carlo marginalization.

    Per sequence, a random ``blur_fraction`` of positions is mixed toward
    uniform by each eps in the grid; blur sites are re-drawn per sequence
    from this suite's own stream. The reference averages discrete
    conditionals over k_mc sequences drawn from the blurred marginals.
    Reports mean Jensen-Shannon divergence and top-1 agreement over all
    sites.
    """
    if k_mc < 1:
        raise ValueError("k_mc must be >= 1")
    sequences = np.asarray(sequences, dtype=np.int64)
    length, vocab = model.shape
    n_blur = max(1, round(blur_fraction * length))
    rows = []
    for eps in eps_grid:
        if not 0.0 <= eps < 1.0:
            raise ValueError("eps values must lie in [0, 1)")
        js_vals = []
        hits = 0
        total = 0
        for tokens in sequences:
            blur_sites = _random_subset(length, n_blur, rng)
            marg = _blurred_marginals(tokens, blur_sites, eps, vocab)
            p_soft = model.conditionals(marg, tau)
            p_mc = np.zeros_like(p_soft)
            for _ in range(k_mc):
                draw = tokens.copy()
                for site in blur_sites:
                    draw[site] = rng.categorical(marg[site])
                p_mc += model.conditionals_from_tokens(draw, tau)
            p_mc /= k_mc
            for site in range(length):
                js_vals.append(js_divergence(p_soft[site], p_mc[site]))
                hits += int(np.argmax(p_soft[site]) == np.argmax(p_mc[site]))
                total += 1
        rows.append(
            MixtureRow(
                eps=float(eps),
                mean_js=float(np.mean(js_vals)),
                top1_agreement=hits / total,
                sample_count=total,
            )
        )
    return rows


def exact_mixture_reference(
    model: MaskedSequenceModel, tokens, blur_sites, eps: float, tau: float = 1.0
) -> np.ndarray:
    """Exact marginalization of discrete conditionals over blurred sites.

    Enumerates every assignment of the blurred positions weighted by the
    blurred marginals; feasible only for small vocab**len(blur_sites).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    blur_sites = np.asarray(blur_sites, dtype=np.int64)
    length, vocab = model.shape
    marg = _blurred_marginals(tokens, blur_sites, eps, vocab)
    reference = np.zeros((length, vocab))
    for assignment in itertools.product(range(vocab), repeat=blur_sites.size):
        weight = float(np.prod([marg[s, a] for s, a in zip(blur_sites, assignment)]))
        if weight == 0.0:
            continue
        draw = tokens.copy()
        draw[blur_sites] = assignment
        reference += weight * model.conditionals_from_tokens(draw, tau)
    return reference


# --- library ranking ------------------------------------------------------------


@dataclass
class Library:
    """A combinatorial variant library: edited sites and their token options."""

    tokens: np.ndarray        # base sequence, (L,)
    sites: np.ndarray         # edited positions
    options: list             # per edited position, list of candidate tokens


@dataclass
class RankingReport:
    spearman_mean: float | None
    spearman_best: float | None
    n_libraries: int
    undefined: bool = False


def random_libraries(
    length: int, vocab: int, count: int, rng: Rng,
    n_sites: int = 3, option_size: int = OPTION_SIZE,
) -> list[Library]:
    libs = []
    for _ in range(count):
        tokens = np.array([rng.integer(vocab) for _ in range(length)], dtype=np.int64)
        sites = _random_subset(length, n_sites, rng)
        options = [list(_random_subset(vocab, option_size, rng)) for _ in sites]
        libs.append(Library(tokens=tokens, sites=sites, options=options))
    return libs


def library_score_soft(
    model: MaskedSequenceModel, library: Library, tau: float = 1.0
) -> float:
    """Relaxed library score: cross-entropy of the design prior against the
    relaxed conditionals at the edited sites."""
    length, vocab = model.shape
    marg = one_hot(library.tokens, vocab)
    priors = {}
    for site, opts in zip(library.sites, library.options):
        row = np.zeros(vocab)
        row[list(opts)] = 1.0 / len(opts)
        marg[site] = row
        priors[int(site)] = row
    cond = model.conditionals(marg, tau)
    return float(sum(cross_entropy(priors[int(s)], cond[s]) for s in library.sites))


def library_ranking(
    model: MaskedSequenceModel,
    libraries,
    rng: Rng,
    k_variants: int = K_VARIANTS_DEFAULT,
    tau: float = 1.0,
) -> RankingReport:
    """Rank agreement between relaxed scores and discrete pseudo-NLL baselines.

    The baseline draws k_variants full variants per library (uniform over
    each site's options), scores each by the sum over edited sites of
    -log discrete conditional of the realized token, and aggregates by the
    mean and the best (minimum) over variants. Returns the Spearman
    correlation of the relaxed score against each aggregate across
    libraries; a single library leaves the correlation undefined.
    """
    libraries = list(libraries)
    if k_variants < 1:
        raise ValueError("k_variants must be >= 1")
    soft_scores = []
    mean_scores = []
    best_scores = []
    for lib in libraries:
        for opts in lib.options:
            if len(opts) != OPTION_SIZE:
                warnings.warn(
                    f"library option list of size {len(opts)} (expected {OPTION_SIZE})",
                    stacklevel=2,
                )
        soft_scores.append(library_score_soft(model, lib, tau))
        nlls = []
        for _ in range(k_variants):
            variant = lib.tokens.copy()
            for site, opts in zip(lib.sites, lib.options):
                variant[site] = opts[rng.integer(len(opts))]
            cond = model.conditionals_from_tokens(variant, tau)
            nll = -float(
                np.log(
                    np.maximum(cond[lib.sites, variant[lib.sites]], 1e-300)
                ).sum()
            )
            nlls.append(nll)
        mean_scores.append(float(np.mean(nlls)))
        best_scores.append(float(np.min(nlls)))

    if len(libraries) < 2:
        return RankingReport(None, None, len(libraries), undefined=True)
    rho_mean = spearman(soft_scores, mean_scores)
    rho_best = spearman(soft_scores, best_scores)
    return RankingReport(
        rho_mean, rho_best, len(libraries),
        undefined=rho_mean is None or rho_best is None,
    )


# --- jump-kernel flow enumeration ------------------------------------------------


@dataclass
class JumpFlowResult:
    log_forward: float
    log_reverse: float
    reachable: bool

    @property
    def forward(self) -> float:
        return float(np.exp(self.log_forward)) if self.reachable else 0.0

    @property
    def reverse(self) -> float:
        return float(np.exp(self.log_reverse)) if self.reachable else 0.0


def _swap_decomposition(delta: np.ndarray, gamma: float, tol: float):
    """Rows changed by a gamma-swap: (site, y_plus, y_minus) or None if the
    pair is not reachable by any single swap set."""
    core = []
    for i, row in enumerate(delta):
        if np.all(np.abs(row) <= tol):
            continue
        y_plus = int(np.argmax(row))
        y_minus = int(np.argmin(row))
        expected = np.zeros_like(row)
        expected[y_plus] += gamma
        expected[y_minus] -= gamma
        if y_plus == y_minus or np.any(np.abs(row - expected) > tol):
            return None
        core.append((i, y_plus, y_minus))
    return core


def enumerate_jump_flow(
    energy: EnergyModel,
    model: MaskedSequenceModel,
    cfg: SamplerConfig,
    logits_a: np.ndarray,
    logits_b: np.ndarray,
) -> JumpFlowResult:
    """Total probability flow of the jump kernel between two states.

    Sums, over every auxiliary realization (mask set, forward tokens,
    reference tokens) that maps one state to the other,
      exp(-beta E) * P(mask) * prod p_model(forward token) * (1/K)^|S| * alpha,
    where P(mask) is the true resample-until-valid mask probability and
    alpha is the acceptance exactly as the sampler computes it under
    cfg.mask_mode. In ``exact`` mode forward and reverse flows agree; in
    ``paper`` mode their log ratio equals log Z(p(b)) - log Z(p(a)).

    Only small instances are supported (the realization count grows as
    K^|identity sites|); intended for L <= 4, K <= 4, s_max <= 2.
    """
    a = np.asarray(logits_a, dtype=np.float64)
    b = np.asarray(logits_b, dtype=np.float64)
    length, vocab = a.shape
    tol = 1e-9 * max(1.0, cfg.gamma)

    core = _swap_decomposition(b - a, cfg.gamma, tol)
    if core is None or len(core) > cfg.s_max:
        return JumpFlowResult(-np.inf, -np.inf, reachable=False)

    e_a, g_a = energy.evaluate(a)
    e_b, g_b = energy.evaluate(b)
    p_a = mask_probabilities(g_a, cfg.kappa, cfg.epsilon)
    p_b = mask_probabilities(g_b, cfg.kappa, cfg.epsilon)
    log_cond_a = model.log_conditionals_from_logits(a, cfg.tau)
    log_cond_b = model.log_conditionals_from_logits(b, cfg.tau)

    core_sites = [site for site, _, _ in core]
    identity_sites = [i for i in range(length) if i not in core_sites]
    log_k = float(np.log(vocab))

    def directional_terms(e_from, e_to, p_from, p_to, lc_from, lc_to, swaps):
        # swaps: list of (site, forward token, reference token) for the core
        terms = []
        max_extra = cfg.s_max - len(swaps)
        for n_extra in range(0, max_extra + 1):
            for extra in itertools.combinations(identity_sites, n_extra):
                sites = np.array(sorted(core_sites + list(extra)), dtype=np.int64)
                if sites.size < 1:
                    continue
                swap_map = {site: (yp, ym) for site, yp, ym in swaps}
                for idet in itertools.product(range(vocab), repeat=n_extra):
                    assign = dict(swap_map)
                    for site, y in zip(extra, idet):
                        assign[site] = (y, y)
                    fwd = np.array([assign[s][0] for s in sites])
                    ref = np.array([assign[s][1] for s in sites])
                    log_mask_true = mask_log_mass(sites, p_from, cfg.s_max, "exact")
                    log_draw = float(lc_from[sites, fwd].sum()) - log_k * sites.size
                    log_alpha = min(
                        0.0,
                        -cfg.beta * (e_to - e_from)
                        + mask_log_mass(sites, p_to, cfg.s_max, cfg.mask_mode)
                        - mask_log_mass(sites, p_from, cfg.s_max, cfg.mask_mode)
                        + float(lc_to[sites, ref].sum())
                        - float(lc_from[sites, fwd].sum()),
                    )
                    terms.append(
                        -cfg.beta * e_from + log_mask_true + log_draw + log_alpha
                    )
        return terms

    forward_terms = directional_terms(e_a, e_b, p_a, p_b, log_cond_a, log_cond_b, core)
    reverse_core = [(site, ym, yp) for site, yp, ym in core]
    reverse_terms = directional_terms(e_b, e_a, p_b, p_a, log_cond_b, log_cond_a, reverse_core)

    return JumpFlowResult(
        log_forward=float(logsumexp(forward_terms)),
        log_reverse=float(logsumexp(reverse_terms)),
        reachable=True,
    )


# --- suite driver and report serialization ----------------------------------------


@dataclass
class ValidationReport:
    name: str
    value: float | None
    sample_count: int
    config: dict


def run_validation_suite(
    model: MaskedSequenceModel,
    seed: int,
    n_sequences: int = 100,
    n_libraries: int = 20,
    tau: float = 1.0,
    eps_grid=EPS_GRID_DEFAULT,
    k_mc: int = K_MC_DEFAULT,
    k_variants: int = K_VARIANTS_DEFAULT,
) -> dict[str, ValidationReport]:
    """All validation metric families on one model, reproducible from seed.

    Families and their protocol constants: one-hot fidelity (KL and the
    gradient-vs-substitution Spearman, mean and median), mixture consistency
    (30% blur, eps grid 0.0/0.2/0.4/0.6/0.8, k_mc reference draws), library
    ranking (3 options per edited site, 256 baseline variants).
    """
    length, vocab = model.shape
    base_config = {
        "seed": seed,
        "L": length,
        "K": vocab,
        "tau": tau,
        "n_sequences": n_sequences,
    }
    rng = Rng(seed)
    sequences = random_sequences(length, vocab, n_sequences, rng)

    reports: dict[str, ValidationReport] = {}

    fid = onehot_fidelity(model, sequences, Rng(seed + 1), tau=tau)
    fid_cfg = dict(base_config, sites_per_sequence=1)
    reports["onehot_fidelity_kl"] = ValidationReport(
        "onehot_fidelity_kl", fid.mean_kl, fid.sample_count, fid_cfg
    )
    reports["onehot_fidelity_grad_spearman_mean"] = ValidationReport(
        "onehot_fidelity_grad_spearman_mean", fid.spearman_mean, fid.sample_count, fid_cfg
    )
    reports["onehot_fidelity_grad_spearman_median"] = ValidationReport(
        "onehot_fidelity_grad_spearman_median", fid.spearman_median, fid.sample_count, fid_cfg
    )

    mix_cfg = dict(
        base_config,
        blur_fraction=BLUR_FRACTION,
        eps_grid=list(eps_grid),
        k_mc=k_mc,
    )
    for row in mixture_consistency(
        model, sequences, Rng(seed + 2), eps_grid=eps_grid, k_mc=k_mc, tau=tau
    ):
        tag = format(row.eps, ".1f")
        reports[f"mixture_js_eps{tag}"] = ValidationReport(
            f"mixture_js_eps{tag}", row.mean_js, row.sample_count,
            dict(mix_cfg, eps=row.eps),
        )
        reports[f"mixture_top1_eps{tag}"] = ValidationReport(
            f"mixture_top1_eps{tag}", row.top1_agreement, row.sample_count,
            dict(mix_cfg, eps=row.eps),
        )

    lib_rng = Rng(seed + 3)
    libraries = random_libraries(length, vocab, n_libraries, lib_rng)
    ranking = library_ranking(model, libraries, lib_rng, k_variants=k_variants, tau=tau)
    lib_cfg = dict(
        base_config,
        n_libraries=n_libraries,
        option_size=OPTION_SIZE,
        k_variants=k_variants,
    )
    reports["library_spearman_mean"] = ValidationReport(
        "library_spearman_mean", ranking.spearman_mean, ranking.n_libraries, lib_cfg
    )
    reports["library_spearman_best"] = ValidationReport(
        "library_spearman_best", ranking.spearman_best, ranking.n_libraries, lib_cfg
    )
    return reports


def reports_to_json(reports: dict[str, ValidationReport], meta: dict | None = None) -> str:
    """Flat JSON object metric -> {value, n, config}, stable key order."""
    payload = {
        name: {"value": rep.value, "n": rep.sample_count, "config": rep.config}
        for name, rep in reports.items()
    }
    if meta:
        payload["_meta"] = meta
    return json.dumps(payload, indent=2, sort_keys=True)
