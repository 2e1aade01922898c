"""Sampler-vs-optimizer benchmark at matched compute on planted landscapes.

The baseline is plain gradient descent on the same energy (with or without
the masked-model prior term); the comparison pools decoded candidates from
both methods at identical snapshot counts and identical energy-evaluation
budgets, then scores unique designable sequences and Hamming-cluster
diversity against enumeration ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Rng, argmax_decode, as_logits
from .energy import (
    CompositeEnergy,
    CountingEnergy,
    EnergyModel,
    GaussianEnergy,
    PairwiseContactEnergy,
    PlantedLandscape,
    enumerate_discrete_energies,
)
from .sampler import SamplerConfig, run_chain
from .softplm import MaskedSequenceModel, SoftPlmEnergy

METHODS = ("rss", "rso", "rso-noplm")


def worker_count() -> int:
    """Parallelism cap from RSS_THREADS (default 1: sequential)."""
    try:
        return max(1, int(os.environ.get("RSS_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class RsoTrajectory:
    states: list                  # logit matrices, one per step plus the start
    energies: np.ndarray          # energy at every state in ``states``
    diverged: bool
    energy_evaluations: int


def run_rso(logits0, energy: EnergyModel, eta: float, steps: int) -> RsoTrajectory:
    """Deterministic gradient descent: logits <- logits - eta * grad.

    Every state including the final one is evaluated (steps + 1 evaluations
    for a full run). The trajectory is truncated and flagged if a value or
    gradient goes non-finite or the energy rises 100 steps in a row.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    counting = CountingEnergy(energy)
    state = as_logits(logits0).copy()
    states = [state.copy()]
    energies = []
    diverged = False
    rising = 0
    for _ in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            value, grad = counting.evaluate(state)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            diverged = True
            break
        if energies and value > energies[-1]:
            rising += 1
            if rising >= 100:
                energies.append(value)
                diverged = True
                break
        else:
            rising = 0
        energies.append(value)
        state = state - eta * grad
        if not np.all(np.isfinite(state)):
            diverged = True
            break
        states.append(state.copy())
    else:
        # final-state evaluation keeps the evaluation count at steps + 1
        value, _ = counting.evaluate(state)
        energies.append(value)
    return RsoTrajectory(
        states=states,
        energies=np.asarray(energies, dtype=np.float64),
        diverged=diverged,
        energy_evaluations=counting.calls,
    )


def hamming_distance(a, b) -> int:
    return int((np.asarray(a) != np.asarray(b)).sum())


def cluster_sequences(seqs, radius: int) -> np.ndarray:
    """Greedy leader clustering in input order.

    A sequence joins the first existing cluster whose leader is within
    Hamming distance <= radius, otherwise it founds a new cluster. Returns
    per-sequence cluster ids.
    """
    seqs = np.asarray(seqs, dtype=np.int64)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    leaders: list[np.ndarray] = []
    labels = np.empty(seqs.shape[0], dtype=np.int64)
    for row, seq in enumerate(seqs):
        for cid, leader in enumerate(leaders):
            if hamming_distance(seq, leader) <= radius:
                labels[row] = cid
                break
        else:
            labels[row] = len(leaders)
            leaders.append(seq)
    return labels


def unique_sequences(seqs) -> np.ndarray:
    """De-duplicated rows in canonical (lexicographically sorted) order."""
    seqs = np.asarray(seqs, dtype=np.int64)
    if seqs.shape[0] == 0:
        return seqs.reshape(0, seqs.shape[1] if seqs.ndim == 2 else 0)
    return np.unique(seqs, axis=0)


def designable_surrogate(
    seqs,
    landscape: PlantedLandscape | PairwiseContactEnergy,
    threshold: float | None = None,
    quantile: float = 0.05,
) -> np.ndarray:
    """Unique sequences whose discrete energy falls below the threshold.

    With no explicit threshold, a PlantedLandscape supplies its
    construction-time quantile threshold (re-derived when a different
    quantile is requested); a bare coupling energy is enumerated if
    feasible, otherwise an explicit threshold is required.
    """
    if isinstance(landscape, PlantedLandscape):
        energy = landscape.energy
        if threshold is None:
            if quantile == 0.05 and np.isfinite(landscape.designable_threshold):
                threshold = landscape.designable_threshold
            else:
                threshold = float(
                    np.quantile(enumerate_discrete_energies(energy), quantile)
                )
    else:
        energy = landscape
        if threshold is None:
            try:
                threshold = float(
                    np.quantile(enumerate_discrete_energies(energy), quantile)
                )
            except ValueError as exc:
                raise ValueError(
                    "landscape is not enumerable; pass an explicit threshold"
                ) from exc
    uniq = unique_sequences(seqs)
    if uniq.shape[0] == 0:
        return uniq
    return uniq[energy.discrete_energies(uniq) < threshold]


def mode_occupancy(seqs, modes, radius: int) -> np.ndarray:
    """Counts of sequences within ``radius`` of each planted mode, plus 'other'.

    Sequences are assigned to the nearest mode by Hamming distance; ties go
    to the lowest mode index; anything farther than ``radius`` from every
    mode lands in the trailing 'other' bucket.
    """
    seqs = np.asarray(seqs, dtype=np.int64)
    modes = np.asarray(modes, dtype=np.int64)
    counts = np.zeros(modes.shape[0] + 1, dtype=np.int64)
    for seq in seqs:
        dists = (modes != seq[None, :]).sum(axis=1)
        best = int(np.argmin(dists))
        if dists[best] <= radius:
            counts[best] += 1
        else:
            counts[-1] += 1
    return counts


@dataclass
class CampaignConfig:
    """One benchmark campaign comparing methods on a single landscape."""

    landscape: PlantedLandscape
    sampler: SamplerConfig
    seeds: int
    step_budget: int                       # energy evaluations per seed
    methods: tuple = METHODS
    model: MaskedSequenceModel | None = None
    lam: float = 0.0                       # prior weight for rss / rso
    ridge_scale: float = 0.0               # confining quadratic term; 0 disables
    rso_eta: float | None = None           # defaults to sampler.eta
    snapshot_stride: int = 50
    cluster_radius: int | None = None      # defaults to floor(L / 4)
    designable_quantile: float = 0.05
    seed0: int = 0
    init_scale: float = 0.5

    def __post_init__(self):
        for method in self.methods:
            if method not in METHODS:
                raise ValueError(f"unknown method {method!r}")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        if self.step_budget < 0:
            raise ValueError("step_budget must be >= 0")
        if self.lam > 0 and self.model is None and (
            "rss" in self.methods or "rso" in self.methods
        ):
            raise ValueError("lam > 0 requires a masked sequence model")
        if self.cluster_radius is None:
            self.cluster_radius = self.landscape.energy.shape[0] // 4


@dataclass
class MethodResult:
    method: str
    per_seed_designable: list
    per_seed_clusters: list
    per_seed_energy_evals: list
    pooled_designable: int
    pooled_clusters: int
    failed_seeds: list
    curve: list                            # (threshold, count, rate) rows

    @property
    def median_designable(self) -> float:
        return float(np.median(self.per_seed_designable))

    @property
    def median_clusters(self) -> float:
        return float(np.median(self.per_seed_clusters))

    @property
    def total_energy_evals(self) -> int:
        return int(sum(self.per_seed_energy_evals))


@dataclass
class CampaignReport:
    results: dict                          # method -> MethodResult
    compute_parity: bool
    config_echo: dict

    def to_json(self, meta: dict | None = None) -> str:
        payload = {
            "compute_parity": self.compute_parity,
            "config": self.config_echo,
            "methods": {
                name: {
                    "per_seed_designable": res.per_seed_designable,
                    "per_seed_clusters": res.per_seed_clusters,
                    "per_seed_energy_evals": res.per_seed_energy_evals,
                    "median_designable": res.median_designable,
                    "median_clusters": res.median_clusters,
                    "pooled_designable": res.pooled_designable,
                    "pooled_clusters": res.pooled_clusters,
                    "total_energy_evals": res.total_energy_evals,
                    "failed_seeds": res.failed_seeds,
                    "curve": [
                        {"threshold": t, "count": c, "rate": r}
                        for t, c, r in res.curve
                    ],
                }
                for name, res in sorted(self.results.items())
            },
        }
        if meta:
            payload["_meta"] = meta
        return json.dumps(payload, indent=2, sort_keys=True)

    def curve_csv(self) -> str:
        lines = ["method,threshold,designable_count,success_rate"]
        for name in sorted(self.results):
            for t, c, r in self.results[name].curve:
                lines.append(f"{name},{t!r},{c},{r!r}")
        return "\n".join(lines) + "\n"


def _method_energy(cfg: CampaignConfig, method: str) -> EnergyModel:
    base: EnergyModel = cfg.landscape.energy
    if cfg.ridge_scale > 0:
        # bounded coupling energies make exp(-beta E) improper over logit
        # space; a weak quadratic keeps the target normalizable for every
        # method without touching the discrete landscape used for scoring
        ridge = GaussianEnergy(np.zeros(base.shape), cfg.ridge_scale)
        base = CompositeEnergy(base, ridge, 1.0)
    if method == "rso-noplm" or cfg.lam == 0.0:
        return base
    return CompositeEnergy(base, SoftPlmEnergy(cfg.model, cfg.sampler.tau), cfg.lam)


def _candidate_indices(total_steps: int, stride: int) -> list[int]:
    idx = list(range(stride, total_steps + 1, stride))
    if total_steps not in idx:
        idx.append(total_steps)
    return idx


def _run_one_seed(cfg: CampaignConfig, method: str, seed_index: int):
    """Returns (decoded candidate matrix, energy evaluations used)."""
    rng = Rng(cfg.seed0 + seed_index)
    shape = cfg.landscape.energy.shape
    logits0 = cfg.init_scale * rng.normal(shape)
    if cfg.step_budget == 0:
        return argmax_decode(logits0)[None, :], 0

    energy = _method_energy(cfg, method)
    steps = cfg.step_budget - 1
    indices = _candidate_indices(steps, cfg.snapshot_stride)

    if method == "rss":
        chain_cfg = dataclasses.replace(cfg.sampler, steps=steps)
        summary = run_chain(
            logits0, chain_cfg, energy, model=cfg.model, rng=rng,
            snapshot_stride=cfg.snapshot_stride,
        )
        by_step = dict(summary.snapshots)
        by_step[steps] = summary.final_state.logits
        states = [by_step[i] for i in indices if i in by_step]
        evals = summary.energy_evaluations
    else:
        eta = cfg.rso_eta if cfg.rso_eta is not None else cfg.sampler.eta
        traj = run_rso(logits0, energy, eta, steps)
        last = len(traj.states) - 1
        states = [traj.states[min(i, last)] for i in indices]
        evals = traj.energy_evaluations

    decoded = np.stack([argmax_decode(s) for s in states])
    return decoded, evals


def run_campaign(cfg: CampaignConfig) -> CampaignReport:
    """Run every configured method over all seeds and build the report.

    Per-seed failures are recorded and skipped, not fatal. Compute parity
    (identical per-seed evaluation counts across methods) is tracked from
    actual call counts and reported, never assumed.
    """
    all_energies = enumerate_discrete_energies(cfg.landscape.energy)
    threshold = float(np.quantile(all_energies, cfg.designable_quantile))
    curve_quantiles = (0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    curve_thresholds = [float(np.quantile(all_energies, q)) for q in curve_quantiles]

    results = {}
    for method in cfg.methods:
        workers = worker_count()
        seed_ids = list(range(cfg.seeds))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(
                    pool.map(lambda s: _run_seed_safe(cfg, method, s), seed_ids)
                )
        else:
            outcomes = [_run_seed_safe(cfg, method, s) for s in seed_ids]

        per_designable, per_clusters, per_evals, failed = [], [], [], []
        pooled = []
        for seed_index, outcome in zip(seed_ids, outcomes):
            if outcome is None:
                failed.append(seed_index)
                continue
            decoded, evals = outcome
            per_evals.append(evals)
            pooled.append(decoded)
            designable = designable_surrogate(
                decoded, cfg.landscape.energy, threshold=threshold
            )
            per_designable.append(int(designable.shape[0]))
            per_clusters.append(
                int(cluster_sequences(designable, cfg.cluster_radius).max() + 1)
                if designable.shape[0]
                else 0
            )

        pooled_matrix = (
            np.concatenate(pooled, axis=0)
            if pooled
            else np.zeros((0, cfg.landscape.energy.shape[0]), dtype=np.int64)
        )
        pooled_unique = unique_sequences(pooled_matrix)
        pooled_designable = designable_surrogate(
            pooled_unique, cfg.landscape.energy, threshold=threshold
        )
        pooled_clusters = (
            int(cluster_sequences(pooled_designable, cfg.cluster_radius).max() + 1)
            if pooled_designable.shape[0]
            else 0
        )
        curve = []
        for thr in curve_thresholds:
            count = int(
                designable_surrogate(
                    pooled_unique, cfg.landscape.energy, threshold=thr
                ).shape[0]
            )
            rate = count / pooled_unique.shape[0] if pooled_unique.shape[0] else 0.0
            curve.append((thr, count, rate))

        results[method] = MethodResult(
            method=method,
            per_seed_designable=per_designable,
            per_seed_clusters=per_clusters,
            per_seed_energy_evals=per_evals,
            pooled_designable=int(pooled_designable.shape[0]),
            pooled_clusters=pooled_clusters,
            failed_seeds=failed,
            curve=curve,
        )

    parity = _check_parity(results)
    config_echo = {
        "seeds": cfg.seeds,
        "step_budget": cfg.step_budget,
        "methods": list(cfg.methods),
        "lam": cfg.lam,
        "ridge_scale": cfg.ridge_scale,
        "snapshot_stride": cfg.snapshot_stride,
        "cluster_radius": cfg.cluster_radius,
        "designable_quantile": cfg.designable_quantile,
        "designable_threshold": threshold,
        "seed0": cfg.seed0,
        "init_scale": cfg.init_scale,
        "landscape_seed": cfg.landscape.seed,
        "landscape_shape": list(cfg.landscape.energy.shape),
        "landscape_modes": int(cfg.landscape.modes.shape[0]),
    }
    return CampaignReport(results=results, compute_parity=parity, config_echo=config_echo)


def _run_seed_safe(cfg: CampaignConfig, method: str, seed_index: int):
    try:
        return _run_one_seed(cfg, method, seed_index)
    except Exception:
        return None


def _check_parity(results: dict) -> bool:
    eval_lists = [res.per_seed_energy_evals for res in results.values()]
    if not eval_lists:
        return True
    first = eval_lists[0]
    return all(lst == first for lst in eval_lists[1:])
