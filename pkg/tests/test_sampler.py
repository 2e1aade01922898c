import io
import itertools
import math

import numpy as np
import pytest
from scipy import stats

from rss.core import Rng
from rss.energy import CompositeEnergy, GaussianEnergy, PairwiseContactEnergy
from rss.sampler import (
    ChainState,
    JumpProposal,
    MaskSamplingError,
    SamplerConfig,
    WalkProposal,
    ess_and_autocorr,
    jump_accept,
    jump_propose,
    load_snapshots,
    mask_log_mass,
    mask_normalizer,
    mask_probabilities,
    run_chain,
    sample_mask,
    save_snapshots,
    step,
    walk_accept,
    walk_propose,
)
from rss.softplm import MaskedSequenceModel, SoftPlmEnergy

L, K = 4, 5


@pytest.fixture(scope="module")
def gaussian():
    return GaussianEnergy(Rng(50).normal((L, K)), 1.0)


@pytest.fixture(scope="module")
def model():
    return MaskedSequenceModel.random(L, K, 8, Rng(51))


class FlatEnergy(GaussianEnergy):
    """Constant energy with zero gradient everywhere."""

    def evaluate(self, logits):
        return 1.25, np.zeros_like(logits)


class TestWalk:
    def test_zero_gradient_displacement_is_pure_noise(self):
        energy = FlatEnergy(np.zeros((L, K)), 1.0)
        cfg = SamplerConfig(beta=2.0, eta=0.3)
        state = ChainState.initialize(np.zeros((L, K)), energy)
        rng_a, rng_b = Rng(1), Rng(1)
        proposal = walk_propose(state, cfg, energy, rng_a)
        noise = rng_b.normal((L, K))
        np.testing.assert_array_equal(
            proposal.logits, math.sqrt(2 * cfg.eta / cfg.beta) * noise
        )

    def test_log_density_matches_scipy(self, gaussian):
        cfg = SamplerConfig(beta=1.7, eta=0.11)
        rng = Rng(2)
        state = ChainState.initialize(rng.normal((L, K)), gaussian)
        proposal = walk_propose(state, cfg, gaussian, rng)
        var = 2 * cfg.eta / cfg.beta
        mean = state.logits - cfg.eta * state.gradient
        oracle = stats.norm.logpdf(
            proposal.logits.ravel(), mean.ravel(), math.sqrt(var)
        ).sum()
        assert abs(proposal.log_q_forward - oracle) < 1e-10
        mean_rev = proposal.logits - cfg.eta * proposal.gradient
        oracle_rev = stats.norm.logpdf(
            state.logits.ravel(), mean_rev.ravel(), math.sqrt(var)
        ).sum()
        assert abs(proposal.log_q_reverse - oracle_rev) < 1e-10

    def test_large_beta_kills_noise(self, gaussian):
        rng = Rng(3)
        state = ChainState.initialize(rng.normal((L, K)), gaussian)
        cfg = SamplerConfig(beta=1e18, eta=0.05)
        proposal = walk_propose(state, cfg, gaussian, rng)
        drift = state.logits - cfg.eta * state.gradient
        np.testing.assert_allclose(proposal.logits, drift, atol=1e-7)

    def test_flat_energy_always_accepts(self):
        energy = FlatEnergy(np.zeros((L, K)), 1.0)
        cfg = SamplerConfig(beta=1.0, eta=0.2)
        rng = Rng(4)
        state = ChainState.initialize(rng.normal((L, K)), energy)
        proposal = walk_propose(state, cfg, energy, rng)
        assert walk_accept(state, proposal, cfg) == 0.0

    def test_pointwise_detailed_balance(self, gaussian):
        cfg = SamplerConfig(beta=1.3, eta=0.09)
        rng = Rng(5)
        worst = 0.0
        for _ in range(200):
            state = ChainState.initialize(rng.normal((L, K)), gaussian)
            prop = walk_propose(state, cfg, gaussian, rng)
            state2 = ChainState(prop.logits, prop.energy, prop.gradient, 0)
            rev = WalkProposal(
                state.logits, state.energy, state.gradient,
                prop.log_q_reverse, prop.log_q_forward,
            )
            forward = (
                -cfg.beta * state.energy + prop.log_q_forward
                + walk_accept(state, prop, cfg)
            )
            reverse = (
                -cfg.beta * prop.energy + prop.log_q_reverse
                + walk_accept(state2, rev, cfg)
            )
            worst = max(worst, abs(forward - reverse))
        assert worst < 1e-10

    def test_tiny_eta_accepts(self, gaussian):
        rng = Rng(6)
        state = ChainState.initialize(rng.normal((L, K)), gaussian)
        cfg = SamplerConfig(beta=1.0, eta=1e-12)
        proposal = walk_propose(state, cfg, gaussian, rng)
        assert walk_accept(state, proposal, cfg) > -1e-6

    def test_nonfinite_proposal_vetoed(self):
        class ExplodingEnergy(GaussianEnergy):
            def evaluate(self, logits):
                value, grad = super().evaluate(logits)
                if abs(value) > 10.0:
                    return float("inf"), grad
                return value, grad

        energy = ExplodingEnergy(np.zeros((L, K)), 0.01)
        cfg = SamplerConfig(beta=1.0, eta=0.5)
        rng = Rng(7)
        state = ChainState(np.zeros((L, K)), 0.0, np.zeros((L, K)), 0)
        vetoed = 0
        for _ in range(50):
            proposal = walk_propose(state, cfg, energy, rng)
            if not proposal.finite:
                vetoed += 1
                assert walk_accept(state, proposal, cfg) == -np.inf
        assert vetoed > 0


class TestMaskProbabilities:
    def test_formula_arithmetic(self):
        grad = np.zeros((2, 2))
        grad[0] = [3.0, 0.0]
        grad[1] = [0.0, 4.0]
        p = mask_probabilities(grad, kappa=1.0, epsilon=1e-8)
        np.testing.assert_allclose(p, [0.75, 1.0], atol=1e-8)

    def test_kappa_scales_max_row(self):
        grad = np.zeros((3, 2))
        grad[2] = [0.0, 2.0]
        p = mask_probabilities(grad, kappa=0.5, epsilon=1e-8)
        assert abs(p[2] - 0.5) < 1e-8

    def test_all_zero_gradient_fallback(self):
        p = mask_probabilities(np.zeros((5, 3)), kappa=0.8, epsilon=1e-8)
        np.testing.assert_array_equal(p, np.full(5, 0.8 / 5))


class TestSampleMask:
    def test_raw_masses_half_half(self):
        p = np.array([0.5, 0.5])
        assert abs(math.exp(mask_log_mass([0], p, 2, "paper")) - 0.25) < 1e-12
        assert abs(math.exp(mask_log_mass([1], p, 2, "paper")) - 0.25) < 1e-12
        assert abs(math.exp(mask_log_mass([0, 1], p, 2, "paper")) - 0.25) < 1e-12

    def test_exact_mode_arithmetic(self):
        p = np.array([0.5, 0.5])
        assert abs(mask_normalizer(p, 2) - 0.75) < 1e-12
        assert abs(mask_log_mass([0], p, 2, "exact") - math.log(0.25 / 0.75)) < 1e-12

    def test_normalizer_matches_subset_enumeration(self):
        rng = Rng(8)
        for _ in range(10):
            p = rng.uniforms(6) * 0.6
            for s_max in (1, 2, 3):
                brute = 0.0
                for r in range(1, s_max + 1):
                    for subset in itertools.combinations(range(6), r):
                        mass = 1.0
                        for i in range(6):
                            mass *= p[i] if i in subset else 1.0 - p[i]
                        brute += mass
                assert abs(mask_normalizer(p, s_max) - brute) < 1e-12

    def test_empirical_frequencies_match_exact_masses(self):
        # conditional law of iid Bernoulli draws given 1 <= |S| <= s_max
        p = np.array([0.35, 0.6])
        s_max = 2
        rng = Rng(9)
        n = 1_000_000
        draws = rng.uniforms(2 * n).reshape(n, 2) < p
        sizes = draws.sum(axis=1)
        valid = draws[(sizes >= 1) & (sizes <= s_max)]
        n_valid = valid.shape[0]
        for sites in ([0], [1], [0, 1]):
            member = np.zeros(2, dtype=bool)
            member[sites] = True
            freq = np.all(valid == member, axis=1).mean()
            exact = math.exp(mask_log_mass(sites, p, s_max, "exact"))
            sigma = math.sqrt(exact * (1 - exact) / n_valid)
            assert abs(freq - exact) < 3 * sigma + 1e-9

    def test_sample_mask_calls_match_exact_masses(self):
        p = np.array([0.35, 0.6])
        rng = Rng(10)
        counts = {}
        n = 20_000
        for _ in range(n):
            sites, _ = sample_mask(p, 2, rng, "exact")
            counts[tuple(sites)] = counts.get(tuple(sites), 0) + 1
        for sites, count in counts.items():
            exact = math.exp(mask_log_mass(list(sites), p, 2, "exact"))
            sigma = math.sqrt(exact * (1 - exact) / n)
            assert abs(count / n - exact) < 4 * sigma

    def test_respects_s_max(self):
        rng = Rng(11)
        p = np.full(6, 0.5)
        for _ in range(200):
            sites, _ = sample_mask(p, 2, rng, "exact")
            assert 1 <= sites.size <= 2

    def test_pathological_probabilities_error(self):
        rng = Rng(12)
        with pytest.raises(MaskSamplingError):
            sample_mask(np.full(4, 1e-12), 4, rng, "exact")

    def test_paper_exact_differ_by_normalizer(self):
        rng = Rng(13)
        p = rng.uniforms(5) * 0.5
        sites = [1, 3]
        diff = mask_log_mass(sites, p, 2, "paper") - mask_log_mass(sites, p, 2, "exact")
        assert abs(diff - math.log(mask_normalizer(p, 2))) < 1e-12


class TestJump:
    def make_state(self, energy, rng):
        return ChainState.initialize(rng.normal(energy.shape), energy)

    def test_swap_arithmetic(self, gaussian, model):
        cfg = SamplerConfig(beta=1.0, eta=0.1, gamma=1.0, s_max=2)
        rng = Rng(14)
        state = self.make_state(gaussian, rng)
        proposal = jump_propose(state, cfg, gaussian, model, rng)
        delta = proposal.logits - state.logits
        changed = set(int(s) for s in proposal.sites)
        for i in range(L):
            if i not in changed:
                np.testing.assert_array_equal(delta[i], np.zeros(K))
        for site, y_plus, y_minus in zip(
            proposal.sites, proposal.forward_tokens, proposal.reference_tokens
        ):
            expected = np.zeros(K)
            expected[y_plus] += cfg.gamma
            expected[y_minus] -= cfg.gamma
            np.testing.assert_array_equal(delta[site], expected)

    def test_identity_swap_is_noop_and_accepted(self, gaussian, model):
        cfg = SamplerConfig(beta=1.0, eta=0.1, gamma=2.0, s_max=2)
        rng = Rng(15)
        state = self.make_state(gaussian, rng)
        probs = mask_probabilities(state.gradient, cfg.kappa, cfg.epsilon)
        sites = np.array([1])
        log_cond = model.log_conditionals_from_logits(state.logits, cfg.tau)
        tokens = np.array([2])
        proposal = JumpProposal(
            logits=state.logits.copy(),
            energy=state.energy,
            gradient=state.gradient,
            sites=sites,
            forward_tokens=tokens,
            reference_tokens=tokens,
            log_mass_forward=mask_log_mass(sites, probs, cfg.s_max, cfg.mask_mode),
            log_plm_forward=float(log_cond[1, 2]),
        )
        np.testing.assert_array_equal(proposal.logits, state.logits)
        assert jump_accept(state, proposal, cfg, model) == 0.0

    def test_forward_token_frequencies(self):
        # single-site chain: the mask is always {0}, so y+ draws expose the
        # conditional distribution directly
        energy = GaussianEnergy(Rng(16).normal((1, K)), 1.0)
        model1 = MaskedSequenceModel.random(1, K, 8, Rng(17))
        cfg = SamplerConfig(beta=1.0, eta=0.1, gamma=1.5, kappa=0.9, s_max=1)
        rng = Rng(18)
        state = ChainState.initialize(Rng(19).normal((1, K)), energy)
        expected = np.exp(model1.log_conditionals_from_logits(state.logits, cfg.tau))[0]
        n = 100_000
        counts = np.zeros(K)
        for _ in range(n):
            proposal = jump_propose(state, cfg, energy, model1, rng)
            counts[proposal.forward_tokens[0]] += 1
        freq = counts / n
        sigma = np.sqrt(expected * (1 - expected) / n)
        assert np.all(np.abs(freq - expected) < 3 * sigma + 1e-9)

    def test_acceptance_formula_components(self, model):
        rng = Rng(20)
        contacts = [(0, 1, rng.normal((K, K))), (2, 3, rng.normal((K, K)))]
        energy = CompositeEnergy(
            PairwiseContactEnergy(contacts, rng.normal((L, K))),
            SoftPlmEnergy(model, 1.0),
            0.2,
        )
        # target must be confining for a realistic state; quadratic added
        energy = CompositeEnergy(energy, GaussianEnergy(np.zeros((L, K)), 2.0), 1.0)
        cfg = SamplerConfig(beta=0.9, eta=0.1, gamma=2.0, kappa=0.6, s_max=2)
        state = ChainState.initialize(rng.normal((L, K)), energy)
        proposal = jump_propose(state, cfg, energy, model, rng)
        log_alpha = jump_accept(state, proposal, cfg, model)
        # manual recomputation
        p_rev = mask_probabilities(proposal.gradient, cfg.kappa, cfg.epsilon)
        lc_rev = model.log_conditionals_from_logits(proposal.logits, cfg.tau)
        manual = min(
            0.0,
            -cfg.beta * (proposal.energy - state.energy)
            + mask_log_mass(proposal.sites, p_rev, cfg.s_max, cfg.mask_mode)
            - proposal.log_mass_forward
            + float(lc_rev[proposal.sites, proposal.reference_tokens].sum())
            - proposal.log_plm_forward,
        )
        assert log_alpha == manual


class TestStep:
    def test_pjump_zero_only_walks(self, gaussian, model):
        cfg = SamplerConfig(beta=1.0, eta=0.1, p_jump=0.0)
        rng = Rng(21)
        state = ChainState.initialize(rng.normal((L, K)), gaussian)
        for _ in range(500):
            state, record = step(state, cfg, gaussian, model, rng)
            assert record.kind == "walk"

    def test_pjump_one_only_jumps(self, model):
        energy = CompositeEnergy(
            GaussianEnergy(np.zeros((L, K)), 2.0),
            SoftPlmEnergy(model, 1.0),
            0.1,
        )
        cfg = SamplerConfig(beta=1.0, eta=0.1, p_jump=1.0, gamma=1.5)
        rng = Rng(22)
        state = ChainState.initialize(rng.normal((L, K)), energy)
        for _ in range(300):
            state, record = step(state, cfg, energy, model, rng)
            assert record.kind == "jump"

    def test_rejection_leaves_state_bit_identical(self, gaussian, model):
        cfg = SamplerConfig(beta=1.0, eta=2.5, p_jump=0.3, gamma=3.0)
        rng = Rng(23)
        state = ChainState.initialize(rng.normal((L, K)), gaussian)
        rejections = 0
        for _ in range(400):
            before = state.logits
            state, record = step(state, cfg, gaussian, model, rng)
            if not record.accepted:
                rejections += 1
                assert state.logits is before or np.array_equal(state.logits, before)
                assert np.array_equal(state.logits, before)
        assert rejections > 0

    def test_jump_without_model_raises(self, gaussian):
        cfg = SamplerConfig(beta=1.0, eta=0.1, p_jump=1.0)
        state = ChainState.initialize(np.zeros((L, K)), gaussian)
        with pytest.raises(ValueError):
            step(state, cfg, gaussian, None, Rng(24))


class TestRunChain:
    def test_zero_steps(self, gaussian):
        cfg = SamplerConfig(beta=1.0, eta=0.1, steps=0)
        logits0 = Rng(25).normal((L, K))
        summary = run_chain(logits0, cfg, gaussian, rng=Rng(26))
        assert summary.steps == 0
        assert summary.walk_proposals == 0 and summary.jump_proposals == 0
        np.testing.assert_array_equal(summary.final_state.logits, logits0)
        assert summary.energy_evaluations == 1

    def test_gaussian_moments_short(self, gaussian):
        cfg = SamplerConfig(
            beta=1.0, eta=0.2, p_jump=0.0, steps=20_000,
            adapt_eta=True, burn_in=2000,
        )
        summary = run_chain(
            gaussian.center.copy(), cfg, gaussian, rng=Rng(27), snapshot_stride=1
        )
        post = np.stack([s for (t, s) in summary.snapshots if t > cfg.burn_in])
        assert np.max(np.abs(post.mean(axis=0) - gaussian.center)) < 0.12
        assert np.max(np.abs(post.var(axis=0) - 1.0)) < 0.12
        assert 0.35 < summary.post_burn_in_walk_acceptance < 0.65

    def test_walk_jump_mixture_recovers_gaussian_moments(self, gaussian, model):
        # any acceptance-ratio bug in the jump kernel would bias these moments
        cfg = SamplerConfig(
            beta=1.0, eta=0.4, p_jump=0.25, gamma=1.5, kappa=0.5,
            steps=40_000, adapt_eta=True, burn_in=3000,
        )
        summary = run_chain(
            gaussian.center.copy(), cfg, gaussian, model=model, rng=Rng(270),
            snapshot_stride=1,
        )
        post = np.stack([s for (t, s) in summary.snapshots if t > cfg.burn_in])
        assert summary.jump_accepts > 500
        assert np.max(np.abs(post.mean(axis=0) - gaussian.center)) < 0.12
        assert np.max(np.abs(post.var(axis=0) - 1.0)) < 0.12

    def test_eta_frozen_after_burn_in(self, gaussian):
        cfg = SamplerConfig(
            beta=1.0, eta=0.05, p_jump=0.0, steps=500, adapt_eta=True, burn_in=100
        )
        summary = run_chain(Rng(28).normal((L, K)), cfg, gaussian, rng=Rng(29))
        assert summary.eta_final != cfg.eta
        cfg2 = SamplerConfig(
            beta=1.0, eta=summary.eta_final, p_jump=0.0, steps=400, adapt_eta=False
        )
        summary2 = run_chain(Rng(28).normal((L, K)), cfg2, gaussian, rng=Rng(30))
        assert summary2.eta_final == cfg2.eta

    def test_energy_evaluation_count(self, gaussian, model):
        cfg = SamplerConfig(beta=1.0, eta=0.1, p_jump=0.4, steps=250, gamma=1.0)
        summary = run_chain(Rng(31).normal((L, K)), cfg, gaussian, model=model, rng=Rng(32))
        assert summary.energy_evaluations == cfg.steps + 1

    def test_trace_csv(self, gaussian, tmp_path):
        cfg = SamplerConfig(beta=1.0, eta=0.1, p_jump=0.0, steps=20)
        sink = io.StringIO()
        summary = run_chain(Rng(33).normal((L, K)), cfg, gaussian, rng=Rng(34), trace=sink)
        lines = sink.getvalue().strip().split("\n")
        assert lines[0] == "step,kind,energy,log_alpha,accepted,mask_size"
        assert len(lines) == 21
        first = lines[1].split(",")
        assert first[0] == "1" and first[1] == "walk"
        assert float(first[2]) == summary.energies[1]

    def test_debug_cache_check_passes(self, gaussian, model):
        cfg = SamplerConfig(beta=1.0, eta=0.1, p_jump=0.3, steps=120, gamma=1.0)
        run_chain(
            Rng(35).normal((L, K)), cfg, gaussian, model=model, rng=Rng(36),
            debug_check_interval=10,
        )

    def test_determinism(self, gaussian, model):
        cfg = SamplerConfig(beta=1.0, eta=0.15, p_jump=0.25, steps=300, gamma=1.5)
        s1 = run_chain(Rng(37).normal((L, K)), cfg, gaussian, model=model, rng=Rng(38))
        s2 = run_chain(Rng(37).normal((L, K)), cfg, gaussian, model=model, rng=Rng(38))
        assert np.array_equal(s1.energies, s2.energies)
        assert np.array_equal(s1.final_state.logits, s2.final_state.logits)

    def test_snapshot_roundtrip(self, gaussian, tmp_path):
        cfg = SamplerConfig(beta=1.0, eta=0.1, p_jump=0.0, steps=100)
        summary = run_chain(Rng(39).normal((L, K)), cfg, gaussian, rng=Rng(40),
                            snapshot_stride=25)
        path = tmp_path / "snaps.txt"
        save_snapshots(path, summary.snapshots, (L, K))
        loaded = load_snapshots(path)
        assert [s for s, _ in loaded] == [s for s, _ in summary.snapshots]
        for (_, a), (_, b) in zip(loaded, summary.snapshots):
            np.testing.assert_array_equal(a, b)


class TestDiagnostics:
    def test_iid_series_ess_near_n(self):
        n = 10_000
        series = Rng(41).normal((n,))
        result = ess_and_autocorr(series)
        assert 0.8 * n <= result.ess <= 1.2 * n
        assert not result.degenerate

    def test_constant_series_flagged(self):
        result = ess_and_autocorr(np.full(100, 3.7))
        assert result.degenerate
        assert result.ess == 100.0

    def test_ar1_integrated_time(self):
        rho = 0.9
        n = 200_000
        rng = Rng(42)
        noise = rng.normal((n,))
        series = np.empty(n)
        series[0] = noise[0]
        for t in range(1, n):
            series[t] = rho * series[t - 1] + math.sqrt(1 - rho * rho) * noise[t]
        result = ess_and_autocorr(series)
        analytic = (1 + rho) / (1 - rho)  # 19
        assert abs(result.tau_int - analytic) / analytic < 0.25

    def test_short_series_rejected(self):
        with pytest.raises(ValueError):
            ess_and_autocorr(np.arange(5.0))


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"beta": 0.0, "eta": 0.1},
            {"beta": 1.0, "eta": -1.0},
            {"beta": 1.0, "eta": 0.1, "p_jump": 1.5},
            {"beta": 1.0, "eta": 0.1, "kappa": 0.0},
            {"beta": 1.0, "eta": 0.1, "gamma": 0.0},
            {"beta": 1.0, "eta": 0.1, "tau": 0.0},
            {"beta": 1.0, "eta": 0.1, "epsilon": 0.0},
            {"beta": 1.0, "eta": 0.1, "s_max": 0},
            {"beta": 1.0, "eta": 0.1, "mask_mode": "bogus"},
            {"beta": 1.0, "eta": 0.1, "steps": -1},
            {"beta": 1.0, "eta": 0.1, "burn_in": -2},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SamplerConfig(**kwargs)
