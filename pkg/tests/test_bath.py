"""Bath module: spectral densities, spin statistics, TCF quadrature.

Expected values are produced by independent oracles computed inside the
tests: closed-form integrals for the zero-temperature Ohmic TCF, direct
Boltzmann sums over spin levels, finite differences of the log
partition function, and the geometric-sum closed form for the high-spin
limit.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spindeom.bath import (
    BETA_INF,
    BathSpec,
    QuadratureSpec,
    bath_tcf,
    bath_tcf_fermionic_form,
    effective_j,
    ohmic_j,
    spin_z_moments,
    zeta_factor,
)


def ohmic_tcf_zero_t(t, alpha, omega_c):
    """Closed form of (1/pi) int J(w) e^(-iwt) dw for the Ohmic density."""
    return 0.5 * alpha * omega_c**2 / (1.0 + 1j * omega_c * np.asarray(t)) ** 2


class TestOhmicJ:
    def test_zero_frequency_vanishes(self):
        spec = BathSpec(alpha=0.7, omega_c=2.0)
        assert ohmic_j(0.0, spec) == 0.0

    def test_closed_form_value(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0)
        expected = 0.5 * math.pi * 0.5 * 1.0 * math.exp(-1.0)  # pi/(4e)
        assert ohmic_j(1.0, spec) == pytest.approx(expected, abs=1e-15)
        assert ohmic_j(1.0, spec) == pytest.approx(0.2889318, abs=1e-7)

    def test_maximum_at_cutoff(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0)
        w = np.linspace(0.0, 20.0, 20001)
        j = ohmic_j(w, spec)
        assert w[np.argmax(j)] == pytest.approx(spec.omega_c, abs=1e-3)

    def test_negative_frequency_rejected(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0)
        with pytest.raises(ValueError):
            ohmic_j(-0.1, spec)


class TestSpinMoments:
    def test_symmetric_at_zero_field(self):
        m = spin_z_moments(0.5, 0.0)
        assert m.mean_sz == pytest.approx(0.0, abs=1e-15)
        assert m.mean_sz2 == pytest.approx(0.25, abs=1e-15)

    def test_two_level_boltzmann(self):
        # direct 2-level sum: <m> = -(1/2) tanh(x/2), <m^2> = 1/4
        m = spin_z_moments(0.5, 1.0)
        assert m.mean_sz == pytest.approx(-0.5 * math.tanh(0.5), abs=1e-14)
        assert m.mean_sz == pytest.approx(-0.231059, abs=1e-6)
        assert m.mean_sz2 == pytest.approx(0.25, abs=1e-14)

    def test_ground_state_limit(self):
        m = spin_z_moments(1.0, math.inf)
        assert (m.mean_sz, m.mean_sz2) == (-1.0, 1.0)

    def test_matches_log_partition_derivative(self):
        # |<s_z> + d ln Z / d(beta w)| <= 1e-6 by central differences, h=1e-4
        h = 1e-4

        def ln_z(s, x):
            m = np.arange(int(round(2 * s)) + 1) - s
            return math.log(np.exp(-x * m).sum())

        for s in (0.5, 1.0, 1.5, 3.0):
            for x in (0.2, 1.0, 4.0):
                fd = (ln_z(s, x + h) - ln_z(s, x - h)) / (2 * h)
                assert abs(spin_z_moments(s, x).mean_sz + fd) <= 1e-6

    def test_high_spin_geometric_closed_form(self):
        # for S >> 1: -<s_z>/S = 1 - (1/S) x/(1-x), x = e^(-beta w)
        s, bw = 100.0, 1.0
        x = math.exp(-bw)
        expected = 1.0 - (1.0 / s) * x / (1.0 - x)
        assert -spin_z_moments(s, bw).mean_sz / s == pytest.approx(expected, abs=1e-6)

    @given(
        two_s=st.integers(min_value=1, max_value=12),
        x=st.floats(min_value=-30.0, max_value=30.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_moment_bounds(self, two_s, x):
        s = two_s / 2.0
        m = spin_z_moments(s, x)
        assert -s - 1e-12 <= m.mean_sz <= s + 1e-12
        if x >= 0:
            assert m.mean_sz <= 1e-12
        assert m.mean_sz**2 - 1e-12 <= m.mean_sz2 <= s**2 + 1e-12


class TestZetaFactor:
    def test_reduces_to_tanh_for_spin_half(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=1.0, spin_s=0.5)
        x = np.linspace(0.01, 50.0, 5000)
        z = zeta_factor(x, spec)  # beta=1 so x is beta*omega
        assert np.max(np.abs(z - np.tanh(x / 2))) <= 1e-12

    def test_zero_temperature_is_one(self):
        for s in (0.5, 1.0, 1.5, 5.0):
            spec = BathSpec(alpha=0.5, omega_c=1.0, beta=BETA_INF, spin_s=s)
            assert zeta_factor(3.0, spec) == 1.0

    def test_zero_frequency_continuous_extension(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=2.0, spin_s=1.5)
        assert zeta_factor(0.0, spec) == 0.0

    def test_higher_spin_against_direct_level_sums(self):
        # independent high-precision evaluation from scratch, S = 3/2
        s, beta, w = 1.5, 1.0, 1.0
        m = np.arange(int(2 * s) + 1) - s
        wgt = np.exp(-beta * w * m)
        z = wgt.sum()
        m1 = (m * wgt).sum() / z
        m2 = (m**2 * wgt).sum() / z
        a = s * (s + 1) - m2
        expected = 0.5 * (1 - math.exp(-beta * w)) * (a - m1) / a
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=beta, spin_s=s)
        assert zeta_factor(w, spec) == pytest.approx(expected, abs=1e-14)

    def test_boson_kind_is_unity(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=0.5, kind="boson")
        assert zeta_factor(2.0, spec) == 1.0


class TestEffectiveJ:
    def test_zero_temperature_equals_bare_density(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=BETA_INF, spin_s=0.5)
        w = np.linspace(0.0, 10.0, 101)
        assert np.array_equal(effective_j(w, spec), ohmic_j(w, spec))

    def test_vanishes_at_zero(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=2.0)
        assert effective_j(0.0, spec) == 0.0

    def test_high_spin_ratio_near_limit(self):
        # J_eff/J' at S=100, beta*w=1 within 1% of the large-S limit
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=1.0, spin_s=100.0)
        ratio = effective_j(1.0, spec) / ohmic_j(1.0, spec)
        limit = math.tanh(0.5)
        assert abs(ratio - limit) / limit < 0.01


class TestBathTCF:
    def test_initial_value_closed_form(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0)
        c0 = bath_tcf(0.0, spec)
        assert c0.real == pytest.approx(0.25, abs=1e-10)
        assert c0.imag == pytest.approx(0.0, abs=1e-12)

    def test_zero_temperature_closed_form_curve(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0)
        t = np.linspace(0.0, 40.0, 401)
        c = bath_tcf(t, spec)
        assert np.max(np.abs(c - ohmic_tcf_zero_t(t, 0.5, 1.0))) < 1e-9

    def test_real_part_temperature_independent_spin_half(self):
        t = np.linspace(0.0, 40.0, 201)
        r1 = bath_tcf(t, BathSpec(alpha=0.5, omega_c=1.0, beta=1.0)).real
        r5 = bath_tcf(t, BathSpec(alpha=0.5, omega_c=1.0, beta=5.0)).real
        assert np.max(np.abs(r1 - r5)) <= 2e-9

    def test_detailed_balance_route_consistency(self):
        # anticommutator (even density) and commutator (odd effective
        # density) integral forms must produce the same function
        t = np.linspace(0.0, 40.0, 201)
        for beta in (1.0, 5.0):
            spec = BathSpec(alpha=0.5, omega_c=1.0, beta=beta)
            d = np.abs(bath_tcf(t, spec) - bath_tcf_fermionic_form(t, spec))
            assert np.max(d) <= 1e-8

    def test_boson_kind_real_part_carries_temperature(self):
        t = np.linspace(0.0, 10.0, 51)
        r_hot = bath_tcf(t, BathSpec(alpha=0.5, omega_c=1.0, beta=0.5, kind="boson")).real
        r_cold = bath_tcf(t, BathSpec(alpha=0.5, omega_c=1.0, beta=5.0, kind="boson")).real
        assert r_hot[0] > r_cold[0] * 1.5

    def test_fermionic_route_rejects_boson_kind(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=1.0, kind="boson")
        with pytest.raises(ValueError):
            bath_tcf_fermionic_form(0.0, spec)

    def test_negative_time_rejected(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0)
        with pytest.raises(ValueError):
            bath_tcf(np.array([-1.0]), spec)

    def test_fixed_rule_matches_adaptive(self):
        spec = BathSpec(alpha=0.5, omega_c=1.0, beta=2.0)
        t = np.linspace(0.0, 10.0, 21)
        a = bath_tcf(t, spec)
        f = bath_tcf(t, spec, QuadratureSpec(rule="fixed", n_points=4096))
        assert np.max(np.abs(a - f)) < 1e-9


class TestSpecValidation:
    def test_bad_bath_spec_lists_problems(self):
        with pytest.raises(ValueError, match="alpha"):
            BathSpec(alpha=-1.0, omega_c=1.0)
        with pytest.raises(ValueError, match="spin_s"):
            BathSpec(alpha=1.0, omega_c=1.0, spin_s=0.7)
        with pytest.raises(ValueError, match="beta"):
            BathSpec(alpha=1.0, omega_c=1.0, beta=-2.0)

    def test_quadrature_spec_bounds(self):
        assert QuadratureSpec(omega_max=25.0).problems(omega_c=1.0) == []
        assert QuadratureSpec(omega_max=25.0).problems(omega_c=2.0) != []
        assert QuadratureSpec(n_points=32).problems(1.0) != []
        assert QuadratureSpec(rule="fixed").problems(1.0) != []
