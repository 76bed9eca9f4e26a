"""Exponential-sum fitting: recovery, bookkeeping, serialization.

Synthetic ground truths are constructed inside the tests; the fits must
recover them to tight tolerances since the inputs lie in the model
class.
"""

import math

import numpy as np
import pytest

from spindeom.bath import BathSpec
from spindeom.expfit import (
    ConjugateClosureError,
    ExponentialSeries,
    FitStrategy,
    PronyRankError,
    assemble_series,
    fit_bath,
    fit_from_json,
    fit_report,
    fit_to_json,
    prony_fit,
    sample_tcf,
)

DT = 0.01


def reconstruct(terms, t):
    return sum(a * np.exp(-g * t) for a, g in terms)


class TestProny:
    def test_single_decay_recovered(self):
        t = np.arange(0.0, 40.0001, DT)
        terms = prony_fit(np.exp(-t), 1, DT)
        assert len(terms) == 1
        a, g = terms[0]
        assert abs(a - 1.0) < 1e-10
        assert abs(g - 1.0) < 1e-10

    def test_cosine_pair_recovered(self):
        t = np.arange(0.0, 20.0001, DT)
        terms = prony_fit(np.cos(t), 2, DT)
        amps = sorted(abs(a) for a, _ in terms)
        rates = sorted((g for _, g in terms), key=lambda g: g.imag)
        assert amps == pytest.approx([0.5, 0.5], abs=1e-8)
        assert abs(rates[0] - (-1j)) < 1e-8
        assert abs(rates[1] - 1j) < 1e-8

    def test_three_term_mix_recovered(self):
        t = np.arange(0.0, 40.0001, DT)
        f = 0.7 * np.exp(-0.3 * t) + 0.3 * np.exp(-2.0 * t) * np.cos(5.0 * t)
        terms = prony_fit(f, 3, DT)
        truth = {(0.7 + 0j, 0.3 + 0j), (0.15 + 0j, 2 + 5j), (0.15 + 0j, 2 - 5j)}
        assert len(terms) == 3
        for a, g in terms:
            match = min(truth, key=lambda tg: abs(tg[1] - g))
            assert abs(g - match[1]) < 1e-6
            assert abs(a - match[0]) < 1e-6

    def test_reconstruction_is_real(self):
        t = np.arange(0.0, 40.0001, DT)
        f = 0.7 * np.exp(-0.3 * t) + 0.3 * np.exp(-2.0 * t) * np.cos(5.0 * t)
        terms = prony_fit(f, 3, DT)
        assert np.max(np.abs(reconstruct(terms, t).imag)) <= 1e-10

    def test_rates_never_grow(self):
        t = np.arange(0.0, 20.0001, DT)
        f = np.cos(3.0 * t) * np.exp(-0.1 * t) + 0.4 * np.exp(-t)
        for k in (1, 2, 3):
            for _, g in prony_fit(f, k, DT):
                assert g.real >= 0.0

    def test_rank_deficiency_error_names_rank(self):
        t = np.arange(0.0, 40.0001, DT)
        with pytest.raises(PronyRankError, match="rank 1"):
            prony_fit(np.exp(-t), 3, DT)

    def test_too_many_terms_rejected(self):
        with pytest.raises(ValueError, match="too large"):
            prony_fit(np.ones(50), 6, DT)

    def test_residual_monotone_in_k(self):
        spec = BathSpec(alpha=10.0, omega_c=1.0)
        t, c = sample_tcf(spec, FitStrategy(plateau_time=40.0, dt_sample=DT))
        prev = math.inf
        for k in range(1, 6):
            terms = prony_fit(c.real, k, DT)
            resid = float(np.linalg.norm(reconstruct(terms, t).real - c.real))
            assert resid <= prev + 1e-12
            prev = resid


class TestSampleTCF:
    def test_default_grid_size(self):
        spec = BathSpec(alpha=10.0, omega_c=1.0)
        t, c = sample_tcf(spec, FitStrategy(plateau_time=40.0, dt_sample=DT))
        assert t.size == c.size == 4001
        assert t[1] - t[0] == pytest.approx(DT)

    def test_zero_plateau_gives_single_sample(self):
        spec = BathSpec(alpha=10.0, omega_c=1.0)
        t, c = sample_tcf(spec, FitStrategy(plateau_time=0.0, dt_sample=DT))
        assert t.size == c.size == 1

    def test_first_sample_is_c0(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0)
        _, c = sample_tcf(spec, FitStrategy(plateau_time=1.0, dt_sample=DT))
        assert c[0].real == pytest.approx(0.25, abs=1e-10)
        assert c[0].imag == pytest.approx(0.0, abs=1e-12)


class TestAssemble:
    def test_single_real_term_self_partnered(self):
        s = assemble_series([(1.0, 1.0)], [])
        assert s.n_terms == 1
        assert s.partner.tolist() == [0]
        assert s.eta[0] == 1.0 and s.gamma[0] == 1.0

    def test_conjugate_pair_mutual_partners(self):
        s = assemble_series([(0.5, 1e-6 + 1j), (0.5, 1e-6 - 1j)], [])
        assert s.n_terms == 2
        assert s.partner.tolist() == [1, 0]
        assert np.array_equal(s.gamma[s.partner], np.conj(s.gamma))

    def test_imaginary_part_amplitudes_rotated(self):
        s = assemble_series([(1.0, 1.0)], [(0.25, 2.0)])
        assert s.eta[1] == 0.25j
        assert s.total_amplitude() == pytest.approx(1.0 + 0.25j)

    def test_missing_partner_created(self):
        s = assemble_series([(0.5 + 0.1j, 0.3 + 1j)], [])
        assert s.n_terms == 2
        assert s.eta[1] == np.conj(s.eta[0])
        assert s.gamma[1] == np.conj(s.gamma[0])

    def test_closure_violation_rejected(self):
        # conjugate rates but inconsistent amplitudes
        with pytest.raises(ConjugateClosureError):
            assemble_series([(0.5 + 0.1j, 0.3 + 1j), (0.9 - 0.4j, 0.3 - 1j)], [])

    def test_growing_rate_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            ExponentialSeries(
                np.array([1.0 + 0j]), np.array([-0.5 + 0j]), np.array([0])
            )

    def test_partner_involution_enforced(self):
        with pytest.raises(ValueError, match="involution"):
            ExponentialSeries(
                np.array([1.0 + 0j, 1.0 + 0j, 1 + 0j]),
                np.array([1.0 + 0j, 1.0 + 0j, 1 + 0j]),
                np.array([1, 2, 0]),
            )


class TestReportAndJson:
    def test_exact_model_report_is_tiny(self):
        t = np.arange(0.0, 20.0001, DT)
        series = assemble_series([(0.5, 0.7)], [(-0.25, 1.3)])
        c = series.reconstruct(t)
        rep = fit_report(series, t, c)
        assert rep.max_abs_error <= 1e-14
        assert rep.n_samples == t.size

    def test_report_splits_parts(self):
        t = np.arange(0.0, 10.0001, DT)
        series = assemble_series([(1.0, 1.0)], [])
        c = series.reconstruct(t) + 0.001j
        rep = fit_report(series, t, c)
        assert rep.im_max_error == pytest.approx(0.001, abs=1e-12)
        assert rep.re_max_error <= 1e-14

    def test_sum_rule_within_fit_error(self):
        spec = BathSpec(alpha=10.0, omega_c=1.0)
        fit = fit_bath(spec, FitStrategy(k_real=3, k_imag=3))
        gap = abs(fit.series.total_amplitude() - fit.samples[0])
        assert gap <= fit.report.max_abs_error + 1e-12

    def test_json_round_trip(self, tmp_path):
        import json

        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=2.0)
        fit = fit_bath(spec, FitStrategy(k_real=3, k_imag=3, plateau_time=20.0))
        doc = fit_to_json(fit)
        text = json.dumps(doc)
        restored = fit_from_json(json.loads(text))
        assert np.allclose(restored.series.eta, fit.series.eta)
        assert np.allclose(restored.series.gamma, fit.series.gamma)
        assert restored.series.partner.tolist() == fit.series.partner.tolist()
        assert np.array_equal(
            restored.series.gamma[restored.series.partner],
            np.conj(restored.series.gamma),
        )
        assert np.allclose(restored.samples, fit.samples)
        assert restored.report.max_abs_error == fit.report.max_abs_error

    def test_strategy_invariants(self):
        assert FitStrategy().problems() == []
        assert FitStrategy(k_real=0).problems() != []
        assert FitStrategy(plateau_time=1.0, dt_sample=0.1, k_real=3, k_imag=3).problems() != []


class TestTemperatureStructure:
    def test_real_part_fit_errors_match_across_beta(self):
        # the real part of the spin-bath TCF is temperature independent,
        # so its fit quality must coincide for any two temperatures
        strat = FitStrategy(k_real=3, k_imag=3, plateau_time=20.0)
        f1 = fit_bath(BathSpec(alpha=0.5, omega_c=1.0, beta=1.0), strat)
        f5 = fit_bath(BathSpec(alpha=0.5, omega_c=1.0, beta=5.0), strat)
        assert f1.report.re_max_error == pytest.approx(
            f5.report.re_max_error, abs=1e-9
        )
