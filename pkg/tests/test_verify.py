import json
import math

import numpy as np
import pytest

from rss.core import Rng, js_divergence, one_hot
from rss.energy import CompositeEnergy, GaussianEnergy, PairwiseContactEnergy
from rss.sampler import SamplerConfig, mask_normalizer, mask_probabilities
from rss.softplm import MaskedSequenceModel, SoftPlmEnergy
from rss.verify import (
    EPS_GRID_DEFAULT,
    K_VARIANTS_DEFAULT,
    Library,
    enumerate_jump_flow,
    exact_mixture_reference,
    library_ranking,
    library_score_soft,
    mixture_consistency,
    onehot_fidelity,
    random_libraries,
    random_sequences,
    reports_to_json,
    run_validation_suite,
    spearman,
)


class TestSpearman:
    def test_identity(self):
        a = [3.0, 1.0, 7.0, 2.0]
        assert spearman(a, a) == 1.0

    def test_reversal(self):
        a = np.array([3.0, 1.0, 7.0, 2.0])
        assert spearman(a, -a) == -1.0

    def test_hand_computed(self):
        assert abs(spearman([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]) - 0.5) < 1e-15

    def test_ties_use_average_ranks(self):
        # scipy cross-check by construction: [1,1,2] ranks (1.5,1.5,3)
        rho = spearman([1.0, 1.0, 2.0], [5.0, 5.0, 9.0])
        assert abs(rho - 1.0) < 1e-12

    def test_constant_series_undefined(self):
        assert spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            spearman([1.0], [1.0, 2.0])


@pytest.fixture(scope="module")
def model():
    return MaskedSequenceModel.random(8, 5, 8, Rng(60))


class TestOnehotFidelity:
    def test_mean_kl_exactly_zero(self, model):
        seqs = random_sequences(8, 5, 10, Rng(61))
        report = onehot_fidelity(model, seqs, Rng(62))
        assert abs(report.mean_kl) < 1e-12

    def test_grad_swap_spearman_high(self, model):
        seqs = random_sequences(8, 5, 10, Rng(63))
        report = onehot_fidelity(model, seqs, Rng(64))
        assert report.spearman_mean > 0.9
        assert report.spearman_median > 0.9

    def test_single_pair_sample_count(self, model):
        seqs = random_sequences(8, 5, 1, Rng(65))
        report = onehot_fidelity(model, seqs, Rng(66), sites_per_sequence=1)
        assert report.sample_count == 1

    def test_empty_sequences_rejected(self, model):
        with pytest.raises(ValueError):
            onehot_fidelity(model, np.zeros((0, 8), dtype=np.int64), Rng(67))


class TestMixtureConsistency:
    def test_eps_zero_exact_agreement(self, model):
        seqs = random_sequences(8, 5, 5, Rng(68))
        rows = mixture_consistency(model, seqs, Rng(69), eps_grid=(0.0,), k_mc=4)
        assert rows[0].mean_js == 0.0
        assert rows[0].top1_agreement == 1.0

    def test_grid_rows_echoed(self, model):
        seqs = random_sequences(8, 5, 3, Rng(70))
        rows = mixture_consistency(model, seqs, Rng(71), k_mc=2)
        assert [row.eps for row in rows] == list(EPS_GRID_DEFAULT)

    def test_js_nondecreasing_in_eps(self, model):
        # regression property on this toy model; one inversion <= 1e-4 allowed
        seqs = random_sequences(8, 5, 20, Rng(72))
        rows = mixture_consistency(model, seqs, Rng(73), k_mc=8)
        js = [row.mean_js for row in rows]
        inversions = [js[i + 1] - js[i] for i in range(len(js) - 1) if js[i + 1] < js[i]]
        assert len(inversions) <= 1
        assert all(abs(gap) <= 1e-4 for gap in inversions)

    def test_monte_carlo_converges_to_exact_marginalization(self):
        # tiny instance: exhaustive enumeration over blurred assignments
        tiny = MaskedSequenceModel.random(5, 4, 8, Rng(74))
        tokens = np.array([0, 3, 1, 2, 2])
        blur_sites = np.array([1, 4])
        eps = 0.4
        exact = exact_mixture_reference(tiny, tokens, blur_sites, eps)
        marg = one_hot(tokens, 4)
        marg[blur_sites] = (1 - eps) * marg[blur_sites] + eps / 4

        rng = Rng(75)
        k_mc = 10_000
        draws = np.empty((k_mc, 5, 4))
        for k in range(k_mc):
            x = tokens.copy()
            for site in blur_sites:
                x[site] = rng.categorical(marg[site])
            draws[k] = tiny.conditionals_from_tokens(x, 1.0)
        p_mc = draws.mean(axis=0)
        se = draws.std(axis=0) / math.sqrt(k_mc)
        assert np.all(np.abs(p_mc - exact) <= 3 * se + 1e-12)

        # relaxed conditionals are a finite JS from the exact marginalization,
        # and the MC reference tracks the exact one within a factor of two
        p_soft = tiny.conditionals(marg, 1.0)
        js_exact = np.mean([js_divergence(p_soft[i], exact[i]) for i in range(5)])
        js_mc = np.mean([js_divergence(p_soft[i], p_mc[i]) for i in range(5)])
        assert np.isfinite(js_exact) and js_exact > 0
        assert js_mc <= 2 * js_exact
        assert js_exact <= 2 * js_mc

    def test_exact_reference_weights_sum(self):
        tiny = MaskedSequenceModel.random(4, 3, 6, Rng(76))
        tokens = np.array([0, 1, 2, 0])
        exact = exact_mixture_reference(tiny, tokens, np.array([0, 2]), 0.6)
        np.testing.assert_allclose(exact.sum(axis=1), 1.0, atol=1e-10)


class TestLibraryRanking:
    def test_single_library_flagged(self, model):
        libs = random_libraries(8, 5, 1, Rng(77))
        report = library_ranking(model, libs, Rng(78), k_variants=16)
        assert report.undefined
        assert report.spearman_mean is None

    def test_default_variant_count_is_256(self):
        assert K_VARIANTS_DEFAULT == 256

    def test_site_relabeling_symmetry(self):
        # sites 1 and 2 share positional terms; base tokens match there, so
        # editing one or the other is indistinguishable to the model
        rng = Rng(79)
        base = MaskedSequenceModel.random(6, 5, 8, rng)
        positional = base.positional.copy()
        positional[2] = positional[1]
        sym = MaskedSequenceModel(
            base.embed, base.mask_embed, positional, base.mix, base.readout, base.bias
        )
        tokens = np.array([0, 3, 3, 1, 4, 2])
        options = [[0, 2, 4]]
        lib_a = Library(tokens=tokens, sites=np.array([1]), options=options)
        lib_b = Library(tokens=tokens, sites=np.array([2]), options=options)
        score_a = library_score_soft(sym, lib_a)
        score_b = library_score_soft(sym, lib_b)
        assert abs(score_a - score_b) < 1e-12

    def test_rank_agreement_on_toy_model(self, model):
        # frozen threshold 0.8, derived from seeded oracle runs (see README)
        libs = random_libraries(8, 5, 20, Rng(80))
        report = library_ranking(model, libs, Rng(81), k_variants=256)
        assert report.n_libraries == 20
        assert report.spearman_mean >= 0.8

    def test_warns_on_nonstandard_option_size(self, model):
        lib = Library(
            tokens=np.zeros(8, dtype=np.int64),
            sites=np.array([1]),
            options=[[0, 1]],
        )
        with pytest.warns(UserWarning):
            library_ranking(model, [lib, lib], Rng(82), k_variants=4)


def build_jump_instance(seed, length=3, vocab=3):
    rng = Rng(seed)
    model = MaskedSequenceModel.random(length, vocab, 6, rng)
    contacts = [(0, 1, rng.normal((vocab, vocab))), (1, 2, rng.normal((vocab, vocab)))]
    structural = PairwiseContactEnergy(contacts, rng.normal((length, vocab)))
    energy = CompositeEnergy(
        CompositeEnergy(structural, GaussianEnergy(np.zeros((length, vocab)), 2.0), 1.0),
        SoftPlmEnergy(model, 1.0),
        0.25,
    )
    return energy, model, rng


def random_swap_pair(rng, cfg, length, vocab, n_sites):
    a = rng.normal((length, vocab))
    b = a.copy()
    sites = np.sort(np.array([rng.integer(length)for _ in range(50)], dtype=np.int64))
    chosen = []
    for s in sites:
        if s not in chosen:
            chosen.append(int(s))
        if len(chosen) == n_sites:
            break
    for s in chosen:
        y_plus = rng.integer(vocab)
        y_minus = (y_plus + 1 + rng.integer(vocab - 1)) % vocab
        b[s, y_plus] += cfg.gamma
        b[s, y_minus] -= cfg.gamma
    return a, b


class TestEnumerateJumpFlow:
    def test_identity_pair_flows_equal(self):
        energy, model, rng = build_jump_instance(83)
        cfg = SamplerConfig(beta=1.0, eta=0.1, gamma=2.0, kappa=0.6, s_max=2)
        a = rng.normal((3, 3))
        res = enumerate_jump_flow(energy, model, cfg, a, a.copy())
        assert res.reachable
        assert abs(res.log_forward - res.log_reverse) < 1e-12

    def test_exact_mode_detailed_balance(self):
        energy, model, rng = build_jump_instance(84)
        cfg = SamplerConfig(beta=0.8, eta=0.1, gamma=2.0, kappa=0.5, s_max=2,
                            mask_mode="exact")
        worst = 0.0
        for trial in range(10):
            a, b = random_swap_pair(rng, cfg, 3, 3, 1 + trial % 2)
            res = enumerate_jump_flow(energy, model, cfg, a, b)
            assert res.reachable
            worst = max(worst, abs(res.log_forward - res.log_reverse))
        assert worst < 1e-10

    def test_paper_mode_mismatch_is_normalizer_ratio(self):
        energy, model, rng = build_jump_instance(85)
        cfg = SamplerConfig(beta=0.8, eta=0.1, gamma=2.0, kappa=0.5, s_max=2,
                            mask_mode="paper")
        for trial in range(5):
            a, b = random_swap_pair(rng, cfg, 3, 3, 1 + trial % 2)
            res = enumerate_jump_flow(energy, model, cfg, a, b)
            _, g_a = energy.evaluate(a)
            _, g_b = energy.evaluate(b)
            z_a = mask_normalizer(mask_probabilities(g_a, cfg.kappa, cfg.epsilon), cfg.s_max)
            z_b = mask_normalizer(mask_probabilities(g_b, cfg.kappa, cfg.epsilon), cfg.s_max)
            mismatch = res.log_forward - res.log_reverse
            assert abs(mismatch - (math.log(z_b) - math.log(z_a))) < 1e-10

    def test_unreachable_pair_flagged(self):
        energy, model, rng = build_jump_instance(86)
        cfg = SamplerConfig(beta=1.0, eta=0.1, gamma=2.0, s_max=2)
        a = rng.normal((3, 3))
        b = a + 0.37  # not a gamma-swap of any site set
        res = enumerate_jump_flow(energy, model, cfg, a, b)
        assert not res.reachable
        assert res.forward == 0.0 and res.reverse == 0.0


class TestSuite:
    def test_families_present_and_deterministic(self):
        tiny = MaskedSequenceModel.random(6, 4, 8, Rng(87))
        reports = run_validation_suite(tiny, seed=5, n_sequences=6, n_libraries=4,
                                       k_mc=3, k_variants=8)
        names = set(reports)
        assert {"onehot_fidelity_kl", "onehot_fidelity_grad_spearman_mean",
                "onehot_fidelity_grad_spearman_median",
                "library_spearman_mean", "library_spearman_best"} <= names
        for eps in EPS_GRID_DEFAULT:
            assert f"mixture_js_eps{eps:.1f}" in names
            assert f"mixture_top1_eps{eps:.1f}" in names
        blob1 = reports_to_json(reports)
        blob2 = reports_to_json(
            run_validation_suite(tiny, seed=5, n_sequences=6, n_libraries=4,
                                 k_mc=3, k_variants=8)
        )
        assert blob1 == blob2
        payload = json.loads(blob1)
        assert abs(payload["onehot_fidelity_kl"]["value"]) < 1e-12
        assert abs(payload["mixture_js_eps0.0"]["value"]) < 1e-12
        assert payload["mixture_top1_eps0.0"]["value"] == 1.0
        assert payload["onehot_fidelity_kl"]["config"]["seed"] == 5
