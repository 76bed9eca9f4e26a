"""Continuous spin environment and its exact time correlation function.

A bath of independent spins with an Ohmic coupling-weighted density of
modes is mapped, in its linear-response limit, onto a boson bath with a
temperature- and spin-quantum-number-dependent effective spectral
density.  This module evaluates that effective density and the exact
bath time correlation function (TCF) by Gauss-Legendre quadrature of
the fluctuation-dissipation relation.

Frequencies are measured in units of the system tunneling splitting and
inverse temperature ``beta`` in its inverse.  ``beta = math.inf`` is the
zero-temperature sentinel throughout (not "a large number").
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import expit

BETA_INF = math.inf

SPECTRAL_FAMILIES = ("ohmic-exponential",)
BATH_KINDS = ("spin", "boson")

# chunk sizes keep the (levels x frequencies) and (times x nodes) work
# arrays below ~100 MB
_MOMENT_CHUNK = 1 << 21
_TIME_CHUNK = 256


class QuadratureError(RuntimeError):
    """Raised when the adaptive quadrature cannot reach its tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class BathSpec:
    """Physical description of the environment.

    ``kind`` selects the statistics of the environment: ``"spin"`` is the
    spin bath mapped through the effective spectral density, ``"boson"``
    is the plain boson bath with the same bare density (the two coincide
    at zero temperature).
    """

    alpha: float
    omega_c: float
    beta: float = BETA_INF
    spin_s: float = 0.5
    family: str = "ohmic-exponential"
    kind: str = "spin"

    def problems(self) -> list[str]:
        out = []
        if self.family not in SPECTRAL_FAMILIES:
            out.append(
                f"family: unknown family {self.family!r}; known: {SPECTRAL_FAMILIES}"
            )
        if self.kind not in BATH_KINDS:
            out.append(f"kind: unknown kind {self.kind!r}; known: {BATH_KINDS}")
        if not (self.alpha > 0):
            out.append(f"alpha: must be > 0, got {self.alpha}")
        if not (self.omega_c > 0):
            out.append(f"omega_c: must be > 0, got {self.omega_c}")
        if not (self.beta > 0):  # inf passes
            out.append(f"beta: must be > 0 or math.inf, got {self.beta}")
        if self.kind == "spin":
            two_s = 2 * self.spin_s
            if not (self.spin_s > 0 and float(two_s).is_integer()):
                out.append(
                    f"spin_s: must be a positive integer or half-integer, got {self.spin_s}"
                )
        return out

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("invalid BathSpec: " + "; ".join(problems))

    @property
    def zero_temperature(self) -> bool:
        return math.isinf(self.beta)


@dataclass(frozen=True)
class SpinMoments:
    """First and second thermal moments of a single bath spin's z projection."""

    mean_sz: float
    mean_sz2: float


@dataclass(frozen=True)
class QuadratureSpec:
    """Controls for the frequency integrals.

    ``omega_max`` defaults to 40 cutoffs, where the exponential tail of
    the Ohmic density is far below every tolerance used here.  With
    ``rule="adaptive"`` the panel count is doubled until two successive
    refinements agree to ``rtol``; ``rule="fixed"`` uses ``n_points``
    nodes with no convergence check.
    """

    omega_max: float | None = None
    n_points: int | None = None
    rule: str = "adaptive"
    rtol: float = 1e-9

    def problems(self, omega_c: float | None = None) -> list[str]:
        out = []
        if self.rule not in ("adaptive", "fixed"):
            out.append(f"rule: must be 'adaptive' or 'fixed', got {self.rule!r}")
        if self.omega_max is not None:
            if omega_c is not None and self.omega_max < 20 * omega_c:
                out.append(
                    f"omega_max: must be >= 20*omega_c = {20 * omega_c}, got {self.omega_max}"
                )
            elif self.omega_max <= 0:
                out.append(f"omega_max: must be > 0, got {self.omega_max}")
        if self.n_points is not None and self.n_points < 64:
            out.append(f"n_points: must be >= 64, got {self.n_points}")
        if self.rule == "fixed" and self.n_points is None:
            out.append("n_points: required for rule='fixed'")
        if not (0 < self.rtol < 1e-2):
            out.append(f"rtol: must be in (0, 1e-2), got {self.rtol}")
        return out

    def resolved_omega_max(self, omega_c: float) -> float:
        return self.omega_max if self.omega_max is not None else 40.0 * omega_c


def ohmic_j(omega, spec: BathSpec):
    """Ohmic spectral density with exponential cutoff, (pi/2) a w e^(-w/wc).

    Defined for ``omega >= 0``; callers that need negative frequencies
    apply the even or odd extension themselves.
    """
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0):
        raise ValueError("ohmic_j is defined for omega >= 0; extend by symmetry explicitly")
    out = 0.5 * np.pi * spec.alpha * w * np.exp(-w / spec.omega_c)
    return float(out) if np.isscalar(omega) else out


def _moment_sums(spin_s: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thermal <m> and <m^2> over m = -S..S at each x = beta*omega (finite)."""
    n_levels = int(round(2 * spin_s)) + 1
    m = np.arange(n_levels, dtype=float) - spin_s
    mean = np.empty_like(x)
    mean2 = np.empty_like(x)
    step = max(_MOMENT_CHUNK // n_levels, 1)
    for lo in range(0, x.size, step):
        xs = x[lo : lo + step]
        expo = -np.outer(m, xs)
        expo -= expo.max(axis=0)  # overflow guard; shifts cancel in the ratio
        wgt = np.exp(expo)
        z = wgt.sum(axis=0)
        mean[lo : lo + step] = (m[:, None] * wgt).sum(axis=0) / z
        mean2[lo : lo + step] = (m[:, None] ** 2 * wgt).sum(axis=0) / z
    return mean, mean2


def _check_spin_s(spin_s: float):
    if not (spin_s > 0 and float(2 * spin_s).is_integer()):
        raise ValueError(f"spin quantum number must be in {{1/2, 1, 3/2, ...}}, got {spin_s}")


def spin_z_moments(spin_s: float, beta_omega: float) -> SpinMoments:
    """Boltzmann moments of a single spin's z projection.

    Computed by direct summation over the 2S+1 levels with weights
    e^(-beta*omega*m), stabilized by shifting out the largest exponent.
    The first moment equals the negative derivative of the log partition
    function with respect to beta*omega.
    """
    _check_spin_s(spin_s)
    if math.isinf(beta_omega):
        sign = 1.0 if beta_omega > 0 else -1.0
        return SpinMoments(-sign * spin_s, spin_s * spin_s)
    m1, m2 = _moment_sums(spin_s, np.array([float(beta_omega)]))
    return SpinMoments(float(m1[0]), float(m2[0]))


def zeta_factor(omega, spec: BathSpec):
    """Detailed-balance factor relating the odd and even spectral densities.

    Built from the thermal spin moments; reduces exactly to
    tanh(beta*omega/2) at S = 1/2 and to 1 in the zero-temperature
    limit.  At omega = 0 the continuous extension 0 is returned (the
    density it multiplies vanishes there anyway).  For ``kind="boson"``
    the factor is identically 1.
    """
    w = np.asarray(omega, dtype=float)
    scalar = np.isscalar(omega)
    if spec.kind == "boson":
        out = np.ones_like(w)
        return float(out) if scalar else out
    if spec.zero_temperature:
        out = np.sign(w)
        return float(out) if scalar else out

    s = spec.spin_s
    x = spec.beta * w
    out = np.zeros_like(w)
    finite = x != 0.0
    if np.any(finite):
        xf = x[finite]
        m1, m2 = _moment_sums(s, xf)
        a = s * (s + 1.0) - m2
        out[finite] = 0.5 * (-np.expm1(-xf)) * (a - m1) / a
    return float(out) if scalar else out


def effective_j(omega, spec: BathSpec):
    """Effective spectral density governing the mapped boson bath.

    For the spin bath this is the bare density times the detailed-balance
    factor; at zero temperature the two coincide.  Odd extension to
    negative frequencies is the caller's convention.
    """
    j = ohmic_j(omega, spec)
    if spec.kind == "boson":
        return j
    return j * zeta_factor(omega, spec)


@lru_cache(maxsize=8)
def _gl_rule(order: int):
    return leggauss(order)


def _gl_grid(omega_max: float, omega_c: float, t_max: float,
             refine: int = 0, n_points: int | None = None):
    """Composite 16-node Gauss-Legendre grid on [0, omega_max].

    Panels are sized so that at most ~2 oscillation periods of
    cos(omega*t_max) fall in one panel, which keeps the rule in its
    spectral-accuracy regime for every requested time.
    """
    order = 16
    if n_points is not None:
        n_panels = max(int(np.ceil(n_points / order)), 4)
    else:
        width = min(omega_c / 2.0, 4.0 * np.pi / max(t_max, 1e-3))
        n_panels = max(int(np.ceil(omega_max / width)), 4)
    n_panels *= 2 ** refine
    edges = np.linspace(0.0, omega_max, n_panels + 1)
    x, wq = _gl_rule(order)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    nodes = (mid[:, None] + half[:, None] * x).ravel()
    weights = (half[:, None] * wq).ravel()
    return nodes, weights


def _coth(x: np.ndarray) -> np.ndarray:
    return 1.0 / np.tanh(x)


def quadrature_grid(spec: BathSpec, quad: QuadratureSpec, t_max: float):
    """Nodes and weights of the frequency grid sized for times up to t_max.

    Exposed for integrals over the spectral density outside this module
    (decoherence exponents, cross-checks); uses one refinement above the
    base panel count as a safety margin.
    """
    omega_max = quad.resolved_omega_max(spec.omega_c)
    return _gl_grid(omega_max, spec.omega_c, t_max, refine=1, n_points=quad.n_points)


def _tcf_effective_on_grid(t: np.ndarray, spec: BathSpec,
                           nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """C(t) = (1/pi) int J_eff [coth(bw/2) cos(wt) - i sin(wt)] dw."""
    jeff = effective_j(nodes, spec)
    therm = np.ones_like(nodes) if spec.zero_temperature else _coth(0.5 * spec.beta * nodes)
    w_re = weights * jeff * therm / np.pi
    w_im = weights * jeff / np.pi
    out = np.empty(t.shape, dtype=complex)
    for lo in range(0, t.size, _TIME_CHUNK):
        ts = t[lo : lo + _TIME_CHUNK]
        phase = np.outer(ts, nodes)
        out[lo : lo + _TIME_CHUNK] = np.cos(phase) @ w_re - 1j * (np.sin(phase) @ w_im)
    return out


def _tcf_fermionic_on_grid(t: np.ndarray, spec: BathSpec,
                           nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """C(t) = (1/pi) int J'(w) [e^(-iwt) f(bw) + e^(+iwt) f(-bw)] dw.

    f is the logistic occupancy 1/(1+e^(-x)); J' is the even extension of
    the bare density, folded to the positive axis.
    """
    jp = ohmic_j(nodes, spec)
    if spec.zero_temperature:
        occ_p = np.ones_like(nodes)
        occ_m = np.zeros_like(nodes)
    else:
        occ_p = expit(spec.beta * nodes)
        occ_m = expit(-spec.beta * nodes)
    w_p = weights * jp * occ_p / np.pi
    w_m = weights * jp * occ_m / np.pi
    out = np.empty(t.shape, dtype=complex)
    for lo in range(0, t.size, _TIME_CHUNK):
        ts = t[lo : lo + _TIME_CHUNK]
        phase = np.outer(ts, nodes)
        out[lo : lo + _TIME_CHUNK] = (
            np.exp(-1j * phase) @ w_p + np.exp(1j * phase) @ w_m
        )
    return out


def _quadrature(t, spec, quad, evaluator):
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ValueError("TCF times must be >= 0")
    problems = spec.problems() + quad.problems(spec.omega_c)
    if problems:
        raise ValueError("; ".join(problems))
    omega_max = quad.resolved_omega_max(spec.omega_c)

    # The frequency grid only has to resolve cos(w t) up to the largest t
    # actually requested, so each block of times gets its own grid; early
    # blocks of a long sampling run then stay cheap.  Convergence of a
    # refinement level is judged on a thinned set of probe times (error
    # varies smoothly in t), then the accepted level is evaluated in full.
    result = np.empty(t_arr.shape, dtype=complex)
    scale = None
    for lo in range(0, t_arr.size, _TIME_CHUNK):
        ts = t_arr[lo : lo + _TIME_CHUNK]
        t_max = float(ts.max())
        if quad.rule == "fixed":
            nodes, weights = _gl_grid(omega_max, spec.omega_c, t_max,
                                      n_points=quad.n_points)
            result[lo : lo + _TIME_CHUNK] = evaluator(ts, spec, nodes, weights)
            continue
        probes = np.unique(np.append(ts[::8], ts[-1]))
        accepted = None
        prev = None
        for refine in range(5):
            nodes, weights = _gl_grid(omega_max, spec.omega_c, t_max,
                                      refine=refine, n_points=quad.n_points)
            cur = evaluator(probes, spec, nodes, weights)
            if prev is not None:
                residual = float(np.max(np.abs(cur - prev)))
                if scale is None:
                    scale = max(float(np.max(np.abs(cur))), 1e-300)
                if residual <= quad.rtol * scale:
                    accepted = refine - 1  # the pair's gap bounds the coarse error
                    break
            prev = cur
        if accepted is None:
            raise QuadratureError(
                f"TCF quadrature did not converge to rtol={quad.rtol} "
                f"(last residual {residual:.3e})",
                residual=residual,
            )
        nodes, weights = _gl_grid(omega_max, spec.omega_c, t_max,
                                  refine=accepted, n_points=quad.n_points)
        result[lo : lo + _TIME_CHUNK] = evaluator(ts, spec, nodes, weights)
    return result[0] if np.isscalar(t) else result


def bath_tcf(t, spec: BathSpec, quad: QuadratureSpec | None = None):
    """Exact bath TCF from the effective-density (commutator) route.

    Re C carries the coth thermal weight, Im C the plain odd integral;
    for the spin bath at S = 1/2 the real part is temperature
    independent.
    """
    return _quadrature(t, spec, quad or QuadratureSpec(), _tcf_effective_on_grid)


def bath_tcf_fermionic_form(t, spec: BathSpec, quad: QuadratureSpec | None = None):
    """Exact bath TCF from the anticommutator (Green's-function) route.

    Independent of :func:`bath_tcf` in both formula and code path; the two
    must agree pointwise for the spin bath, which is the detailed-balance
    consistency check used by the test suite.  Not defined for the plain
    boson bath.
    """
    if spec.kind != "spin":
        raise ValueError("the anticommutator route applies to the spin bath only")
    return _quadrature(t, spec, quad or QuadratureSpec(), _tcf_fermionic_on_grid)
