"""Physical observables, trajectory bookkeeping, and analytic checks.

Everything here is a pure function of its inputs; the propagation loop
records through this module and the validation suite uses the analytic
results (pure-dephasing decay exponent, thermal-state targets) as
independent references for hierarchy runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bath import BathSpec, QuadratureSpec, bath_tcf, effective_j, quadrature_grid

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY2 = np.eye(2, dtype=complex)

CSV_HEADER = "t,P,S_vN,coh_abs,n_active"
LN2 = math.log(2.0)


@dataclass
class Trajectory:
    """Recorded time series of one propagation run.

    All series share the time grid.  ``stats`` carries conservation
    diagnostics accumulated over the whole run (max trace deviation, max
    Hermiticity residue, peak active tier, rebuild count).
    """

    times: np.ndarray
    population: np.ndarray
    entropy: np.ndarray
    coherence: np.ndarray
    n_active: np.ndarray
    metadata: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    final_rho: np.ndarray | None = None


def population(rho: np.ndarray) -> float:
    """Expectation value of sigma_z; the population difference."""
    val = complex(rho[0, 0] - rho[1, 1])
    if abs(val.imag) > 1e-8:
        raise ValueError(f"population has imaginary residue {val.imag:g}")
    return val.real


def von_neumann_entropy(rho: np.ndarray, clip: float = 1e-8) -> float:
    """-Tr[rho ln rho] with 0 ln 0 := 0.

    Integrator noise may leave eigenvalues slightly negative; values in
    [-clip, 0) are clipped to zero, anything below -1e-6 means the state
    is genuinely unphysical and raises.
    """
    herm = 0.5 * (rho + rho.conj().T)
    evals = np.linalg.eigvalsh(herm)
    if evals.min() < -1e-6:
        raise ValueError(f"density matrix has negative eigenvalue {evals.min():g}")
    evals = np.where((evals < 0) & (evals >= -clip), 0.0, evals)
    evals = np.clip(evals, 0.0, None)
    pos = evals[evals > 0]
    val = float(-(pos * np.log(pos)).sum())
    return 0.0 if val == 0.0 else val


def coherence_abs(rho: np.ndarray) -> float:
    return float(abs(rho[0, 1]))


def pure_dephasing_exponent(t, spec: BathSpec,
                            quad: QuadratureSpec | None = None):
    """Exact decoherence exponent for a tunneling-free sigma_z coupling.

    Gamma(t) = 4 * int_0^t ds (t - s) Re C(s); the off-diagonal element
    decays as |rho_01(t)| = |rho_01(0)| exp(-Gamma(t)).  This is exact
    for a Gaussian environment and serves as the reference for hierarchy
    runs in the pure-dephasing limit.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    nodes, weights = np.polynomial.legendre.leggauss(64)
    # map [-1, 1] onto [0, t] for every requested time at once
    s = 0.5 * np.multiply.outer(t_arr, nodes + 1.0)
    w = 0.5 * np.multiply.outer(t_arr, weights)
    re_c = bath_tcf(s.ravel(), spec, quad).real.reshape(s.shape)
    gamma = 4.0 * np.sum(w * (t_arr[:, None] - s) * re_c, axis=1)
    return float(gamma[0]) if np.isscalar(t) else gamma


def pure_dephasing_exponent_spectral(t, spec: BathSpec,
                                     quad: QuadratureSpec | None = None):
    """Frequency-domain form of the same exponent.

    Gamma(t) = (4/pi) int dw J_eff(w) coth(bw/2) (1 - cos wt)/w^2,
    obtained from the time-domain form by exchanging the order of
    integration; the two must agree and are compared in the tests.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    quad = quad or QuadratureSpec()
    t_max = float(t_arr.max()) if t_arr.size else 0.0
    nodes, weights = quadrature_grid(spec, quad, t_max)
    jeff = effective_j(nodes, spec)
    therm = np.ones_like(nodes) if spec.zero_temperature else 1.0 / np.tanh(0.5 * spec.beta * nodes)
    wgt = weights * jeff * therm / nodes**2
    gamma = (4.0 / np.pi) * ((1.0 - np.cos(np.outer(t_arr, nodes))) @ wgt)
    return float(gamma[0]) if np.isscalar(t) else gamma


@dataclass(frozen=True)
class BoltzmannReport:
    """Detailed-balance plateau comparison; informative, not a hard gate."""

    status: str  # "ok" or "inconclusive"
    slope: float
    target: tuple[float, float] | None = None
    actual: tuple[float, float] | None = None
    max_rel_dev: float | None = None


def boltzmann_check(traj: Trajectory, hamiltonian: np.ndarray, beta: float,
                    slope_tol: float = 1e-4) -> BoltzmannReport:
    """Compare the final state against the system-eigenbasis Gibbs weights.

    The comparison only runs if the population has settled: the linear
    slope of P(t) over the final 10% of the run must stay below
    ``slope_tol`` per unit time.  Agreement is expected to be close only
    at weak coupling; the deviation is reported, not asserted.
    """
    n = traj.times.size
    tail = slice(max(n - max(n // 10, 2), 0), n)
    tt, pp = traj.times[tail], traj.population[tail]
    slope = float(np.polyfit(tt, pp, 1)[0]) if tt.size >= 2 else math.inf
    if abs(slope) > slope_tol or traj.final_rho is None:
        return BoltzmannReport(status="inconclusive", slope=slope)
    evals, vecs = np.linalg.eigh(hamiltonian)
    if math.isinf(beta):
        weights = (evals == evals.min()).astype(float)
    else:
        shifted = -beta * (evals - evals.min())
        weights = np.exp(shifted)
    weights = weights / weights.sum()
    actual = np.real(np.einsum("ij,jk,ki->i", vecs.conj().T, traj.final_rho, vecs))
    dev = float(np.max(np.abs(actual - weights) / np.maximum(weights, 1e-300)))
    return BoltzmannReport(
        status="ok", slope=slope,
        target=(float(weights[0]), float(weights[1])),
        actual=(float(actual[0]), float(actual[1])),
        max_rel_dev=dev,
    )


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Fixed-schema CSV: t,P,S_vN,coh_abs,n_active at 12 significant digits."""
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for i in range(traj.times.size):
            fh.write(
                f"{traj.times[i]:.12g},{traj.population[i]:.12g},"
                f"{traj.entropy[i]:.12g},{traj.coherence[i]:.12g},"
                f"{int(traj.n_active[i])}\n"
            )


def read_trajectory_csv(path) -> Trajectory:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return Trajectory(
        times=data[:, 0], population=data[:, 1], entropy=data[:, 2],
        coherence=data[:, 3], n_active=data[:, 4].astype(int),
    )
