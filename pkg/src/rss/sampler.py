"""Walk-jump mixture kernel over logit matrices.

Each step flips a coin: with probability 1 - p_jump a gradient-drift
Gaussian proposal (MALA) explores locally; otherwise a multi-site token-swap
proposal guided by masked-model conditionals crosses energy barriers. Both
kernels carry exact Metropolis-Hastings corrections, so the chain targets
pi(logits) proportional to exp(-beta * E(logits)).

Acceptance probabilities are computed entirely in log space; exp is taken
only at the final Bernoulli draw. A rejected step leaves the state
bit-identical, and the cached (energy, gradient) pair always matches a
fresh evaluation of the current logits.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .core import Rng, as_logits
from .energy import EnergyModel, CountingEnergy
from .softplm import MaskedSequenceModel

MASK_MODES = ("paper", "exact")
MAX_MASK_ATTEMPTS = 1_000_000
_LOG_FLOOR = 1e-300


class MaskSamplingError(RuntimeError):
    """Mask resampling failed to land in 1 <= |S| <= s_max within the attempt cap."""


@dataclass
class SamplerConfig:
    """All scalar knobs of the chain.

    mask_mode selects how the mask-selection mass enters acceptance:
    ``paper`` uses the raw Bernoulli product; ``exact`` (default) divides by
    Z(p) = P(1 <= |S| <= s_max), which is what the resample-until-valid
    mask draw actually does, and is required for exact reversibility.
    """

    beta: float
    eta: float
    p_jump: float = 0.1
    kappa: float = 0.5
    gamma: float = 2.0
    tau: float = 1.0
    epsilon: float = 1e-8
    steps: int = 1000
    s_max: int = 3
    mask_mode: str = "exact"
    adapt_eta: bool = False
    burn_in: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.p_jump <= 1.0:
            raise ValueError("p_jump must lie in [0, 1]")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")


@dataclass
class ChainState:
    """Current logits with their cached energy and gradient."""

    logits: np.ndarray
    energy: float
    gradient: np.ndarray
    step: int = 0

    @classmethod
    def initialize(cls, logits, energy_model: EnergyModel) -> "ChainState":
        logits = as_logits(logits)
        value, grad = energy_model.evaluate(logits)
        return cls(logits=logits, energy=value, gradient=grad, step=0)


@dataclass
class MoveRecord:
    """Audit trail of one step, sufficient to replay the acceptance test."""

    kind: str                       # "walk" or "jump"
    proposed_energy: float
    log_alpha: float                # min(0, log MH ratio); -inf for vetoed moves
    accepted: bool
    mask_sites: np.ndarray | None = None
    forward_tokens: np.ndarray | None = None
    reference_tokens: np.ndarray | None = None

    @property
    def mask_size(self) -> int:
        return 0 if self.mask_sites is None else int(len(self.mask_sites))


# --- walk kernel (MALA) -----------------------------------------------------


def gaussian_log_density(x: np.ndarray, mean: np.ndarray, var: float) -> float:
    """log N(x; mean, var * I) for matrix-shaped states."""
    diff = np.asarray(x, dtype=np.float64) - mean
    n = diff.size
    return float(-0.5 * n * np.log(2.0 * np.pi * var) - (diff * diff).sum() / (2.0 * var))


@dataclass
class WalkProposal:
    logits: np.ndarray
    energy: float
    gradient: np.ndarray
    log_q_forward: float
    log_q_reverse: float
    finite: bool = True


def walk_propose(
    state: ChainState, cfg: SamplerConfig, energy: EnergyModel, rng: Rng
) -> WalkProposal:
    """Drifted Gaussian proposal plus both proposal log-densities.

    proposal = logits - eta * grad + sqrt(2 eta / beta) * xi. The reverse
    density needs the gradient at the proposal, so the proposal is evaluated
    here once and the (energy, gradient) pair is carried for acceptance and
    for the next state's cache. A non-finite proposal or evaluation yields
    finite=False, which acceptance turns into a recorded veto, not a crash.
    """
    var = 2.0 * cfg.eta / cfg.beta
    noise = rng.normal(state.logits.shape)
    mean_forward = state.logits - cfg.eta * state.gradient
    proposed = mean_forward + np.sqrt(var) * noise

    if not np.all(np.isfinite(proposed)):
        return WalkProposal(proposed, np.nan, np.full_like(state.logits, np.nan),
                            np.nan, np.nan, finite=False)
    with np.errstate(over="ignore", invalid="ignore"):
        value, grad = energy.evaluate(proposed)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        return WalkProposal(proposed, value, grad, np.nan, np.nan, finite=False)

    log_q_forward = gaussian_log_density(proposed, mean_forward, var)
    log_q_reverse = gaussian_log_density(state.logits, proposed - cfg.eta * grad, var)
    return WalkProposal(proposed, value, grad, log_q_forward, log_q_reverse)


def walk_accept(state: ChainState, proposal: WalkProposal, cfg: SamplerConfig) -> float:
    """log acceptance: min(0, -beta (E' - E) + log q_rev - log q_fwd)."""
    if not proposal.finite:
        return -np.inf
    ratio = (
        -cfg.beta * (proposal.energy - state.energy)
        + proposal.log_q_reverse
        - proposal.log_q_forward
    )
    return min(0.0, ratio)


# --- jump kernel (masked-model guided swaps) --------------------------------


def mask_probabilities(gradient: np.ndarray, kappa: float, epsilon: float) -> np.ndarray:
    """Per-site selection probabilities from gradient row norms.

    p_i = min(1, kappa * ||g_i|| / (max_j ||g_j|| + epsilon)). If every row
    norm is zero the formula gives all-zero probabilities and no mask could
    ever be drawn; that degenerate case falls back to uniform p_i = kappa/L.
    """
    grad = np.asarray(gradient, dtype=np.float64)
    norms = np.sqrt((grad * grad).sum(axis=1))
    top = norms.max()
    if top == 0.0:
        return np.full(grad.shape[0], kappa / grad.shape[0])
    return np.minimum(1.0, kappa * norms / (top + epsilon))


def _truncated_size_distribution(probs: np.ndarray, s_max: int) -> np.ndarray:
    # Poisson-binomial size probabilities for sizes 0..s_max; trajectories
    # exceeding s_max are dropped (they can never return). O(L * s_max).
    cap = min(s_max, probs.size)
    dist = np.zeros(cap + 1, dtype=np.float64)
    dist[0] = 1.0
    for p in probs:
        dist[1:] = dist[1:] * (1.0 - p) + dist[:-1] * p
        dist[0] *= 1.0 - p
    return dist


def mask_normalizer(probs: np.ndarray, s_max: int) -> float:
    """Z(p) = P(1 <= |S| <= s_max) for independent Bernoulli site draws."""
    dist = _truncated_size_distribution(np.asarray(probs, dtype=np.float64), s_max)
    return float(dist[1:].sum())


def mask_log_mass(
    sites: np.ndarray, probs: np.ndarray, s_max: int, mask_mode: str
) -> float:
    """log mass of a specific site set under the chosen accounting mode.

    ``paper``: raw product prod p_i^{i in S} (1-p_i)^{i not in S}.
    ``exact``: raw product minus log Z(p), the true probability under
    resample-until-valid.
    """
    probs = np.asarray(probs, dtype=np.float64)
    member = np.zeros(probs.size, dtype=bool)
    member[np.asarray(sites, dtype=np.int64)] = True
    terms = np.where(member, probs, 1.0 - probs)
    raw = float(np.log(np.maximum(terms, _LOG_FLOOR)).sum())
    if mask_mode == "paper":
        return raw
    if mask_mode == "exact":
        z = mask_normalizer(probs, s_max)
        if z <= 0.0:
            raise ValueError("mask normalizer Z(p) is zero; no valid mask exists")
        return raw - float(np.log(z))
    raise ValueError(f"unknown mask_mode {mask_mode!r}")


def sample_mask(
    probs: np.ndarray, s_max: int, rng: Rng, mask_mode: str = "exact"
) -> tuple[np.ndarray, float]:
    """Draw a site set by independent Bernoullis, resampled into 1 <= |S| <= s_max.

    Returns the sorted site indices and their log mass under ``mask_mode``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    for _ in range(MAX_MASK_ATTEMPTS):
        draws = rng.bernoulli(probs)
        size = int(draws.sum())
        if 1 <= size <= s_max:
            sites = np.flatnonzero(draws)
            return sites, mask_log_mass(sites, probs, s_max, mask_mode)
    raise MaskSamplingError(
        f"no mask with 1 <= |S| <= {s_max} in {MAX_MASK_ATTEMPTS} attempts "
        f"(sum p = {probs.sum():.3g})"
    )


@dataclass
class JumpProposal:
    logits: np.ndarray
    energy: float
    gradient: np.ndarray
    sites: np.ndarray
    forward_tokens: np.ndarray
    reference_tokens: np.ndarray
    log_mass_forward: float
    log_plm_forward: float
    finite: bool = True

    @property
    def log_proposal_forward(self) -> float:
        # uniform reference-token factor omitted: it cancels in the ratio
        return self.log_mass_forward + self.log_plm_forward


def jump_propose(
    state: ChainState,
    cfg: SamplerConfig,
    energy: EnergyModel,
    model: MaskedSequenceModel,
    rng: Rng,
) -> JumpProposal:
    """Swap proposal: for each masked site, push gamma of logit mass from a
    uniform reference token onto a token drawn from the masked conditional.

    Sites outside the mask are untouched. Draw order is fixed (sites
    ascending; forward token then reference token) so runs replay exactly.
    """
    probs = mask_probabilities(state.gradient, cfg.kappa, cfg.epsilon)
    sites, log_mass = sample_mask(probs, cfg.s_max, rng, cfg.mask_mode)

    log_cond = model.log_conditionals_from_logits(state.logits, cfg.tau)
    cond = np.exp(log_cond)
    vocab = state.logits.shape[1]

    proposed = state.logits.copy()
    forward = np.empty(sites.size, dtype=np.int64)
    reference = np.empty(sites.size, dtype=np.int64)
    log_plm = 0.0
    for pos, site in enumerate(sites):
        y_plus = rng.categorical(cond[site])
        y_minus = rng.integer(vocab)
        forward[pos] = y_plus
        reference[pos] = y_minus
        if y_plus != y_minus:  # identity swaps leave the row bit-identical
            proposed[site, y_plus] += cfg.gamma
            proposed[site, y_minus] -= cfg.gamma
        log_plm += float(log_cond[site, y_plus])

    value, grad = energy.evaluate(proposed)
    finite = bool(np.isfinite(value) and np.all(np.isfinite(grad)))
    return JumpProposal(
        proposed, value, grad, sites, forward, reference, log_mass, log_plm,
        finite=finite,
    )


def jump_accept(
    state: ChainState,
    proposal: JumpProposal,
    cfg: SamplerConfig,
    model: MaskedSequenceModel,
) -> float:
    """log acceptance of a swap proposal.

    min(0, -beta (E' - E) + log m(S | proposed) - log m(S | current)
           + sum_i [log p_i(y-_i | proposed) - log p_i(y+_i | current)])
    with mask masses m under cfg.mask_mode and mask probabilities at the
    proposed state recomputed from its own gradient.
    """
    if not proposal.finite:
        return -np.inf
    probs_rev = mask_probabilities(proposal.gradient, cfg.kappa, cfg.epsilon)
    log_mass_rev = mask_log_mass(proposal.sites, probs_rev, cfg.s_max, cfg.mask_mode)
    log_cond_rev = model.log_conditionals_from_logits(proposal.logits, cfg.tau)
    log_plm_rev = float(log_cond_rev[proposal.sites, proposal.reference_tokens].sum())
    ratio = (
        -cfg.beta * (proposal.energy - state.energy)
        + log_mass_rev
        - proposal.log_mass_forward
        + log_plm_rev
        - proposal.log_plm_forward
    )
    return min(0.0, ratio)


# --- one step and the main loop ----------------------------------------------


def step(
    state: ChainState,
    cfg: SamplerConfig,
    energy: EnergyModel,
    model: MaskedSequenceModel | None,
    rng: Rng,
) -> tuple[ChainState, MoveRecord]:
    """One mixture-kernel transition. Draw order: kernel coin, proposal
    draws, acceptance uniform."""
    use_walk = rng.uniform() > cfg.p_jump
    if use_walk:
        proposal = walk_propose(state, cfg, energy, rng)
        log_alpha = walk_accept(state, proposal, cfg)
        record = MoveRecord("walk", proposal.energy, log_alpha, False)
    else:
        if model is None:
            raise ValueError("jump kernel requires a masked sequence model")
        proposal = jump_propose(state, cfg, energy, model, rng)
        log_alpha = jump_accept(state, proposal, cfg, model)
        record = MoveRecord(
            "jump", proposal.energy, log_alpha, False,
            mask_sites=proposal.sites,
            forward_tokens=proposal.forward_tokens,
            reference_tokens=proposal.reference_tokens,
        )

    accepted = rng.uniform() < np.exp(log_alpha)
    record.accepted = bool(accepted)
    if accepted:
        new_state = ChainState(
            proposal.logits, proposal.energy, proposal.gradient, state.step + 1
        )
    else:
        new_state = ChainState(state.logits, state.energy, state.gradient, state.step + 1)
    return new_state, record


@dataclass
class ChainSummary:
    steps: int
    walk_proposals: int
    walk_accepts: int
    jump_proposals: int
    jump_accepts: int
    post_walk_proposals: int        # counted after cfg.burn_in steps
    post_walk_accepts: int
    post_jump_proposals: int
    post_jump_accepts: int
    min_energy: float
    min_energy_step: int
    min_energy_logits: np.ndarray
    final_state: ChainState
    energies: np.ndarray            # energy after each step, length steps + 1
    snapshots: list                 # (step, logits) at the thinning stride
    eta_final: float
    energy_evaluations: int

    @property
    def walk_acceptance(self) -> float:
        return self.walk_accepts / self.walk_proposals if self.walk_proposals else float("nan")

    @property
    def jump_acceptance(self) -> float:
        return self.jump_accepts / self.jump_proposals if self.jump_proposals else float("nan")

    @property
    def post_burn_in_walk_acceptance(self) -> float:
        if not self.post_walk_proposals:
            return float("nan")
        return self.post_walk_accepts / self.post_walk_proposals

    @property
    def post_burn_in_jump_acceptance(self) -> float:
        if not self.post_jump_proposals:
            return float("nan")
        return self.post_jump_accepts / self.post_jump_proposals

    def post_burn_in_energies(self, burn_in: int) -> np.ndarray:
        return self.energies[burn_in + 1 :]


TRACE_HEADER = "step,kind,energy,log_alpha,accepted,mask_size"


def run_chain(
    logits0,
    cfg: SamplerConfig,
    energy: EnergyModel,
    model: MaskedSequenceModel | None = None,
    rng: Rng | None = None,
    trace=None,
    snapshot_stride: int = 50,
    debug_check_interval: int = 0,
) -> ChainSummary:
    """Run cfg.steps mixture-kernel transitions from logits0.

    If cfg.adapt_eta, the walk step size is scaled by 1.02 after each
    accepted walk and 0.98 after each rejected walk, but only during the
    first cfg.burn_in steps; eta is frozen afterwards so the post-burn-in
    kernel is exactly stationary. Snapshots of the logits are kept every
    ``snapshot_stride`` steps. ``trace`` may be a path or open text handle;
    rows are step,kind,energy,log_alpha,accepted,mask_size with the energy
    of the state after the move. ``debug_check_interval`` > 0 re-evaluates
    the cached (energy, gradient) every that-many steps and raises on
    mismatch.
    """
    if rng is None:
        rng = Rng(0)
    if snapshot_stride < 1:
        raise ValueError("snapshot_stride must be >= 1")
    counting = CountingEnergy(energy)
    local_cfg = dataclasses.replace(cfg)
    state = ChainState.initialize(logits0, counting)

    own_trace = None
    sink = None
    if trace is not None:
        if hasattr(trace, "write"):
            sink = trace
        else:
            own_trace = open(trace, "w", encoding="utf-8", newline="\n")
            sink = own_trace
        sink.write(TRACE_HEADER + "\n")

    walk_proposals = walk_accepts = jump_proposals = jump_accepts = 0
    post_walk_proposals = post_walk_accepts = 0
    post_jump_proposals = post_jump_accepts = 0
    energies = np.empty(local_cfg.steps + 1, dtype=np.float64)
    energies[0] = state.energy
    min_energy = state.energy
    min_step = 0
    min_logits = state.logits.copy()
    snapshots = []

    try:
        for t in range(local_cfg.steps):
            state, record = step(state, local_cfg, counting, model, rng)
            if record.kind == "walk":
                walk_proposals += 1
                walk_accepts += record.accepted
                if t >= local_cfg.burn_in:
                    post_walk_proposals += 1
                    post_walk_accepts += record.accepted
                if local_cfg.adapt_eta and t < local_cfg.burn_in:
                    local_cfg.eta *= 1.02 if record.accepted else 0.98
            else:
                jump_proposals += 1
                jump_accepts += record.accepted
                if t >= local_cfg.burn_in:
                    post_jump_proposals += 1
                    post_jump_accepts += record.accepted

            energies[t + 1] = state.energy
            if state.energy < min_energy:
                min_energy = state.energy
                min_step = t + 1
                min_logits = state.logits.copy()
            if (t + 1) % snapshot_stride == 0:
                snapshots.append((t + 1, state.logits.copy()))
            if sink is not None:
                sink.write(
                    f"{t + 1},{record.kind},{state.energy!r},"
                    f"{record.log_alpha!r},{int(record.accepted)},{record.mask_size}\n"
                )
            if debug_check_interval and (t + 1) % debug_check_interval == 0:
                value, grad = counting.inner.evaluate(state.logits)
                if value != state.energy or not np.array_equal(grad, state.gradient):
                    raise AssertionError(
                        f"cached (energy, gradient) diverged at step {t + 1}"
                    )
    finally:
        if own_trace is not None:
            own_trace.close()
        elif sink is not None:
            sink.flush()

    return ChainSummary(
        steps=local_cfg.steps,
        walk_proposals=walk_proposals,
        walk_accepts=walk_accepts,
        jump_proposals=jump_proposals,
        jump_accepts=jump_accepts,
        post_walk_proposals=post_walk_proposals,
        post_walk_accepts=post_walk_accepts,
        post_jump_proposals=post_jump_proposals,
        post_jump_accepts=post_jump_accepts,
        min_energy=min_energy,
        min_energy_step=min_step,
        min_energy_logits=min_logits,
        final_state=state,
        energies=energies,
        snapshots=snapshots,
        eta_final=local_cfg.eta,
        energy_evaluations=counting.calls,
    )


# --- chain diagnostics --------------------------------------------------------


@dataclass
class AutocorrResult:
    ess: float
    tau_int: float          # integrated autocorrelation time, 1 + 2 sum rho_k
    degenerate: bool = False


def ess_and_autocorr(trace) -> AutocorrResult:
    """Effective sample size via the initial-positive-sequence estimator.

    Pairwise autocorrelation sums Gamma_m = rho_{2m} + rho_{2m+1} are
    accumulated while positive; tau_int = 1 + 2 sum_{k>=1} rho_k over the
    kept window and ESS = N / tau_int. A constant series has no usable
    autocorrelation and is reported as ESS = N with ``degenerate`` set.
    """
    x = np.asarray(trace, dtype=np.float64)
    if x.ndim != 1 or x.size < 10:
        raise ValueError("trace must be a 1-D series with at least 10 points")
    n = x.size
    x = x - x.mean()
    var = float((x * x).sum() / n)
    if var == 0.0:
        return AutocorrResult(ess=float(n), tau_int=1.0, degenerate=True)

    # biased autocovariance via FFT
    size = 1
    while size < 2 * n:
        size *= 2
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    rho = acov / acov[0]

    total = 0.0
    m = 0
    while 2 * m + 1 < n:
        gamma = rho[2 * m] + rho[2 * m + 1]
        if gamma <= 0.0:
            break
        total += gamma
        m += 1
    tau = max(2.0 * total - 1.0, 1e-3)
    return AutocorrResult(ess=float(n / tau), tau_int=float(tau))


def save_snapshots(path, snapshots, shape: tuple[int, int], comment: str | None = None) -> None:
    """Write thinned logit snapshots in the shared text-block format."""
    length, vocab = shape
    lines = ["# logit-snapshots v1"]
    if comment:
        lines.append(f"# {comment}")
    lines.extend([f"L {length}", f"K {vocab}"])
    for step_idx, logits in snapshots:
        lines.append(f"[snapshot {step_idx}]")
        lines.extend(
            " ".join(format(v, ".17g") for v in row) for row in logits
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshots(path) -> list[tuple[int, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    header = {}
    pos = 0
    while pos < len(lines) and not lines[pos].startswith("["):
        key, val = lines[pos].split()
        header[key] = int(val)
        pos += 1
    length = header["L"]
    out = []
    while pos < len(lines):
        step_idx = int(lines[pos].split()[1].rstrip("]"))
        pos += 1
        block = np.array(
            [[float(v) for v in lines[pos + r].split()] for r in range(length)]
        )
        pos += length
        out.append((step_idx, block))
    return out
