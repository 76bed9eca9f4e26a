"""Observables: expectation values, entropy, dephasing exponent, CSV."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spindeom.bath import BathSpec, QuadratureSpec
from spindeom.deom import HierarchyParams, SystemSpec, propagate
from spindeom.expfit import ExponentialSeries
from spindeom.observables import (
    LN2,
    BoltzmannReport,
    Trajectory,
    boltzmann_check,
    coherence_abs,
    population,
    pure_dephasing_exponent,
    pure_dephasing_exponent_spectral,
    read_trajectory_csv,
    von_neumann_entropy,
    write_trajectory_csv,
)


def rho_diag(p):
    return np.array([[p, 0.0], [0.0, 1.0 - p]], dtype=complex)


class TestPopulation:
    def test_up_state(self):
        assert population(rho_diag(1.0)) == 1.0

    def test_maximally_mixed(self):
        assert population(rho_diag(0.5)) == 0.0

    def test_biased_diagonal(self):
        assert population(rho_diag(0.75)) == pytest.approx(0.5, abs=1e-15)

    def test_imaginary_residue_rejected(self):
        rho = np.array([[0.5 + 1e-3j, 0], [0, 0.5]], dtype=complex)
        with pytest.raises(ValueError, match="imaginary"):
            population(rho)


class TestEntropy:
    def test_pure_state_zero(self):
        assert von_neumann_entropy(rho_diag(1.0)) == 0.0

    def test_maximally_mixed_ln2(self):
        assert von_neumann_entropy(rho_diag(0.5)) == pytest.approx(LN2, abs=1e-14)

    def test_biased_mixture(self):
        # -0.9 ln 0.9 - 0.1 ln 0.1
        expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        assert von_neumann_entropy(rho_diag(0.9)) == pytest.approx(expected, abs=1e-12)
        assert von_neumann_entropy(rho_diag(0.9)) == pytest.approx(0.325083, abs=1e-6)

    def test_tiny_negative_eigenvalue_clipped(self):
        rho = rho_diag(1.0)
        rho[1, 1] = -1e-9
        assert von_neumann_entropy(rho) == 0.0

    def test_unphysical_state_rejected(self):
        rho = rho_diag(1.0)
        rho[1, 1] = -1e-4
        with pytest.raises(ValueError, match="negative eigenvalue"):
            von_neumann_entropy(rho)

    @given(
        p=st.floats(min_value=0.0, max_value=1.0),
        phase=st.floats(min_value=0.0, max_value=2 * math.pi),
        coh=st.floats(min_value=0.0, max_value=1.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_entropy_bounds_on_physical_states(self, p, phase, coh):
        # any physical 2x2 state: diagonal (p, 1-p), off-diagonal bounded
        # by the purity limit
        off = coh * math.sqrt(p * (1 - p)) * complex(math.cos(phase), math.sin(phase))
        rho = np.array([[p, off], [np.conj(off), 1 - p]], dtype=complex)
        s = von_neumann_entropy(rho)
        assert -1e-12 <= s <= LN2 + 1e-12


class TestDephasingExponent:
    def test_zero_at_origin(self):
        spec = BathSpec(alpha=0.1, omega_c=1.0)
        assert pure_dephasing_exponent(0.0, spec) == pytest.approx(0.0, abs=1e-14)

    def test_nondecreasing(self):
        t = np.linspace(0.0, 10.0, 60)
        for beta in (math.inf, 1.0):
            spec = BathSpec(alpha=0.1, omega_c=1.0, beta=beta)
            g = pure_dephasing_exponent(t, spec)
            assert np.all(np.diff(g) >= -1e-12)

    def test_zero_temperature_log_closed_form(self):
        # (4/pi) int J(w) (1-cos wt)/w^2 dw = alpha ln(1 + (wc t)^2) for
        # the Ohmic density at zero temperature
        spec = BathSpec(alpha=0.1, omega_c=1.0)
        t = np.array([0.5, 1.0, 2.0, 5.0, 10.0])
        expected = 0.1 * np.log(1.0 + t**2)
        g = pure_dephasing_exponent(t, spec)
        assert np.max(np.abs(g - expected)) < 1e-8

    def test_time_and_frequency_forms_agree(self):
        t = np.linspace(0.1, 10.0, 25)
        for beta in (math.inf, 1.0):
            spec = BathSpec(alpha=0.1, omega_c=1.0, beta=beta)
            g1 = pure_dephasing_exponent(t, spec)
            g2 = pure_dephasing_exponent_spectral(t, spec)
            assert np.max(np.abs(g1 - g2) / np.abs(g2)) < 1e-8


class TestBoltzmann:
    def _flat_traj(self, p_final, rho_final, n=200):
        t = np.linspace(0.0, 10.0, n)
        pop = np.full(n, p_final)
        return Trajectory(
            times=t, population=pop, entropy=np.zeros(n),
            coherence=np.zeros(n), n_active=np.ones(n, int),
            final_rho=rho_final,
        )

    def test_infinite_temperature_target(self):
        sys = SystemSpec(epsilon=1.0, delta=1.0)
        traj = self._flat_traj(0.0, rho_diag(0.5))
        rep = boltzmann_check(traj, sys.hamiltonian(), beta=0.0)
        assert rep.status == "ok"
        assert rep.target == pytest.approx((0.5, 0.5))
        assert rep.max_rel_dev < 1e-12

    def test_biased_system_eigen_targets(self):
        # eps = delta = 1, beta = 1: E = -sqrt(2), +sqrt(2)
        sys = SystemSpec(epsilon=1.0, delta=1.0)
        traj = self._flat_traj(0.0, rho_diag(0.5))
        rep = boltzmann_check(traj, sys.hamiltonian(), beta=1.0)
        z = math.exp(math.sqrt(2)) + math.exp(-math.sqrt(2))
        assert rep.target[0] == pytest.approx(math.exp(math.sqrt(2)) / z, rel=1e-12)
        assert rep.target[1] == pytest.approx(math.exp(-math.sqrt(2)) / z, rel=1e-12)

    def test_no_plateau_inconclusive(self):
        sys = SystemSpec(epsilon=0.0, delta=1.0)
        params = HierarchyParams(tier=0, t_final=5.0, filter_tol=None)
        traj = propagate(sys, ExponentialSeries.empty(), params)
        rep = boltzmann_check(traj, sys.hamiltonian(), beta=1.0)
        assert rep.status == "inconclusive"


class TestCsv:
    def test_round_trip_and_schema(self, tmp_path):
        t = np.linspace(0.0, 1.0, 11)
        traj = Trajectory(
            times=t, population=np.cos(t), entropy=0.1 * t,
            coherence=0.5 * np.exp(-t), n_active=np.arange(11),
        )
        path = tmp_path / "traj.csv"
        write_trajectory_csv(traj, path)
        first = path.read_text().splitlines()[0]
        assert first == "t,P,S_vN,coh_abs,n_active"
        back = read_trajectory_csv(path)
        assert np.allclose(back.times, traj.times, atol=1e-12)
        assert np.allclose(back.population, traj.population, atol=1e-12)
        assert back.n_active.tolist() == traj.n_active.tolist()

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,pop\n0,1\n")
        with pytest.raises(ValueError, match="header"):
            read_trajectory_csv(path)

    def test_twelve_significant_digits(self, tmp_path):
        traj = Trajectory(
            times=np.array([1.0 / 3.0]), population=np.array([2.0 / 3.0]),
            entropy=np.array([0.0]), coherence=np.array([0.0]),
            n_active=np.array([1]),
        )
        path = tmp_path / "digits.csv"
        write_trajectory_csv(traj, path)
        row = path.read_text().splitlines()[1]
        assert row.startswith("0.333333333333,0.666666666667")
