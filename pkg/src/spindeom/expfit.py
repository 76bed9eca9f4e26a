"""Time-domain exponential-sum fitting of the bath correlation function.

The real and imaginary parts of the sampled TCF are fitted separately,
each to a sum of decaying exponentials, by a two-stage Prony scheme:
rates from a shifted-Hankel matrix pencil with singular-value
truncation, amplitudes from linear least squares, followed by optional
variable-projection Gauss-Newton refinement of the rates.  The two fits
are then merged into one complex series with the conjugate-partner
bookkeeping the hierarchy propagation needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import hankel, svd
from scipy.optimize import least_squares

from .bath import BathSpec, QuadratureSpec, bath_tcf

_SVD_TOL = 1e-12
_PAIR_TOL = 1e-8
_MAX_PENCIL = 600


class PronyRankError(RuntimeError):
    """Sample matrix supports fewer resolvable modes than requested."""


class ConjugateClosureError(RuntimeError):
    """A fitted part does not reconstruct a real function."""


@dataclass(frozen=True)
class FitStrategy:
    """Term counts and sampling window of a K_r + K_i fit."""

    k_real: int = 5
    k_imag: int = 5
    plateau_time: float = 40.0
    dt_sample: float = 0.01
    refine: bool = True

    def problems(self) -> list[str]:
        out = []
        if self.k_real < 1:
            out.append(f"k_real: must be >= 1, got {self.k_real}")
        if self.k_imag < 1:
            out.append(f"k_imag: must be >= 1, got {self.k_imag}")
        if not (self.dt_sample > 0):
            out.append(f"dt_sample: must be > 0, got {self.dt_sample}")
        if not (self.plateau_time > 0):
            out.append(f"plateau_time: must be > 0, got {self.plateau_time}")
        elif self.plateau_time / self.dt_sample < 10 * (self.k_real + self.k_imag):
            out.append(
                "plateau_time/dt_sample: must be >= 10*(k_real+k_imag), got "
                f"{self.plateau_time / self.dt_sample:g}"
            )
        return out


@dataclass
class ExponentialSeries:
    """Terms (eta_k, gamma_k) of C(t) ~ sum_k eta_k exp(-gamma_k t).

    ``partner`` maps each index k to the index kbar with
    gamma[kbar] == conj(gamma[k]) exactly as stored; self-partnered terms
    have a real rate.  Rates must not grow (Re gamma >= 0).
    """

    eta: np.ndarray
    gamma: np.ndarray
    partner: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=complex)
        self.gamma = np.asarray(self.gamma, dtype=complex)
        self.partner = np.asarray(self.partner, dtype=int)
        k = self.eta.size
        if self.gamma.size != k or self.partner.size != k:
            raise ValueError("eta, gamma and partner must have equal length")
        if k == 0:
            return
        if np.any(self.gamma.real < 0):
            raise ValueError("rates must have nonnegative real part (decaying basis)")
        if np.any(self.partner[self.partner] != np.arange(k)):
            raise ValueError("partner map must be an involution")
        if not np.array_equal(self.gamma[self.partner], np.conj(self.gamma)):
            raise ValueError("gamma[partner[k]] must equal conj(gamma[k]) exactly")

    @property
    def n_terms(self) -> int:
        return self.eta.size

    def reconstruct(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.n_terms == 0:
            return np.zeros(t.shape, dtype=complex)
        return np.exp(-np.multiply.outer(t, self.gamma)) @ self.eta

    def total_amplitude(self) -> complex:
        """Sum of all eta_k; should match C(0) within the fit error."""
        return complex(self.eta.sum())

    @classmethod
    def empty(cls) -> "ExponentialSeries":
        return cls(np.zeros(0, complex), np.zeros(0, complex), np.zeros(0, int))

    def to_dict(self) -> dict:
        return {
            "terms": [
                {
                    "eta_re": float(e.real),
                    "eta_im": float(e.imag),
                    "gamma_re": float(g.real),
                    "gamma_im": float(g.imag),
                }
                for e, g in zip(self.eta, self.gamma)
            ],
            "partner": self.partner.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExponentialSeries":
        terms = data["terms"]
        eta = np.array([t["eta_re"] + 1j * t["eta_im"] for t in terms], complex)
        gamma = np.array([t["gamma_re"] + 1j * t["gamma_im"] for t in terms], complex)
        partner = np.array(data["partner"], int)
        # re-pin exact conjugation lost to decimal round-tripping
        for k, kb in enumerate(partner):
            if kb > k:
                gamma[kb] = np.conj(gamma[k])
            elif kb == k:
                gamma[k] = complex(gamma[k].real, 0.0)
        return cls(eta, gamma, partner)


@dataclass(frozen=True)
class FitReport:
    """Residual statistics of a fit against the quadrature TCF samples."""

    max_abs_error: float
    rms_error: float
    re_max_error: float
    re_rms_error: float
    im_max_error: float
    im_rms_error: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "max_abs": self.max_abs_error,
            "rms": self.rms_error,
            "re": {"max": self.re_max_error, "rms": self.re_rms_error},
            "im": {"max": self.im_max_error, "rms": self.im_rms_error},
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        return cls(d["max_abs"], d["rms"], d["re"]["max"], d["re"]["rms"],
                   d["im"]["max"], d["im"]["rms"], d["n_samples"])


def sample_tcf(spec: BathSpec, strategy: FitStrategy,
               quad: QuadratureSpec | None = None):
    """Uniform samples of the exact TCF on [0, plateau_time].

    Returns ``(t, c)``; a zero plateau time yields the single sample C(0).
    """
    if strategy.dt_sample <= 0:
        raise ValueError("dt_sample must be > 0")
    if strategy.plateau_time < 0:
        raise ValueError("plateau_time must be >= 0")
    n = int(round(strategy.plateau_time / strategy.dt_sample)) + 1
    t = np.arange(n) * strategy.dt_sample
    return t, bath_tcf(t, spec, quad)


def _hankel_svd(samples: np.ndarray):
    n = samples.size
    p = min(n // 2, _MAX_PENCIL)
    h = hankel(samples[: n - p], samples[n - p - 1 :])
    _, s, vh = svd(h, full_matrices=False)
    return s, vh


def _pencil_roots_from(s, vh, k: int, check_rank: bool = True):
    """Per-step multipliers z of the top-k modes of the shifted Hankel pencil."""
    rank = int(np.count_nonzero(s >= s[0] * _SVD_TOL)) if s.size and s[0] > 0 else 0
    if check_rank and rank < k:
        raise PronyRankError(
            f"sample matrix has numerical rank {rank} (< {k} requested modes)"
        )
    k = min(k, max(rank, 1))
    w = vh[:k]
    x, *_ = np.linalg.lstsq(w[:, :-1].T, w[:, 1:].T, rcond=None)
    z = np.linalg.eigvals(x)
    mag = np.abs(z)
    z = np.where(mag > 1.0, z / mag**2, z)  # reflect growing modes into the disk
    mag = np.abs(z)
    tiny = 1e-8
    z = np.where(mag < tiny, tiny + 0j, z)
    return z


def _signal_band(samples: np.ndarray, dt: float) -> float:
    """Highest angular frequency holding non-negligible spectral weight."""
    spec = np.abs(np.fft.rfft(samples * np.hanning(samples.size)))
    peak = spec.max()
    if peak == 0:
        return 0.0
    hot = np.nonzero(spec > 1e-7 * peak)[0]
    return 2.0 * np.pi * hot[-1] / (samples.size * dt) if hot.size else 0.0


def _takagi_roots(samples: np.ndarray, dt: float, k: int):
    """Rate candidates from the con-eigenvector of the square sample Hankel.

    The roots (inside the unit disk) of the polynomial built from the
    (k+1)-th con-eigenvector of a square Hankel matrix are near-optimal
    nodes for k-term exponential approximation.  For a real symmetric
    Hankel the con-eigenpairs are ordinary eigenpairs up to sign.  The
    samples are thinned toward ~800 points first; if thinning would
    alias the signal band, no candidate is produced.
    """
    n = samples.size
    stride = max(1, int(np.ceil((n - 1) / 800)))
    band = _signal_band(samples, dt)
    if band > 0 and stride * dt * band > 0.9 * np.pi:
        stride = max(1, int(0.9 * np.pi / (dt * band)))
    if (n - 1) // stride > 2400:
        return None
    fs = samples[::stride]
    dts = dt * stride
    half = (fs.size - 1) // 2
    if half < k + 2:
        return None
    h = hankel(fs[: half + 1], fs[half : 2 * half + 1])
    evals, evecs = np.linalg.eigh(h)
    order = np.argsort(-np.abs(evals))
    if k >= len(order):
        return None
    v = evecs[:, order[k]]
    roots = np.roots(v[::-1])
    inside = roots[(np.abs(roots) < 1.0) & (np.abs(roots) > 1e-8)]
    if inside.size == 0:
        return None
    inside = inside[np.argsort(-np.abs(inside))][:k]
    return -np.log(inside) / dts


def _split_rates(gamma: np.ndarray, lenient: bool = False):
    """Group rates into exact real ones and exact conjugate pairs (Im > 0).

    ``lenient`` downgrades unpaired complex rates to their real parts
    (useful for initial guesses) instead of treating them as an error.
    """
    is_real = np.abs(gamma.imag) <= _PAIR_TOL * (1.0 + np.abs(gamma))
    real_rates = sorted(gamma[is_real].real)
    cplx = gamma[~is_real]
    pos = sorted(cplx[cplx.imag > 0], key=lambda g: (g.real, g.imag))
    neg = sorted(cplx[cplx.imag < 0], key=lambda g: (g.real, -g.imag))
    if len(pos) != len(neg):
        if not lenient:
            raise ConjugateClosureError(
                "pencil produced unpaired complex rates from real samples"
            )
        short = min(len(pos), len(neg))
        real_rates += [max(g.real, 0.0) for g in pos[short:] + neg[short:]]
        real_rates.sort()
        pos, neg = pos[:short], neg[:short]
    pairs = [(g + np.conj(h)) / 2.0 for g, h in zip(pos, neg)]
    return [float(max(r, 0.0)) for r in real_rates], [complex(g) for g in pairs]


def _design_matrix(t: np.ndarray, real_rates, pair_rates) -> np.ndarray:
    """Real basis: e^(-rt) per real rate; 2Re/-2Im of e^(-gt) per pair."""
    cols = [np.exp(-r * t) for r in real_rates]
    for g in pair_rates:
        e = np.exp(-g * t)
        cols.append(2.0 * e.real)
        cols.append(-2.0 * e.imag)
    return np.column_stack(cols) if cols else np.zeros((t.size, 0))

def _solve_amplitudes(t, samples, real_rates, pair_rates):
    a = _design_matrix(t, real_rates, pair_rates)
    x, *_ = np.linalg.lstsq(a, samples, rcond=None)
    resid = a @ x - samples
    return x, float(np.linalg.norm(resid))


def _terms_from_solution(x, real_rates, pair_rates):
    terms = []
    nr = len(real_rates)
    for i, r in enumerate(real_rates):
        terms.append((complex(x[i]), complex(r)))
    for j, g in enumerate(pair_rates):
        a = complex(x[nr + 2 * j], x[nr + 2 * j + 1])
        terms.append((a, g))
        terms.append((np.conj(a), np.conj(g)))
    return terms


def _varpro_parts(theta, nr, npair, t, samples, want_jac):
    """Projected residual and (optionally) its exact Jacobian in the rates.

    Amplitudes are eliminated through a QR solve; the Jacobian is the
    Golub-Pereyra form, i.e. the projected basis derivative plus the
    back-coupling term through the pseudo-inverse.
    """
    rr = list(theta[:nr])
    pp = [complex(theta[nr + j], theta[nr + npair + j]) for j in range(npair)]
    a = _design_matrix(t, rr, pp)
    q, r_tri = np.linalg.qr(a)
    x = np.linalg.solve(r_tri, q.T @ samples)
    resid = a @ x - samples
    if not want_jac:
        return resid, (rr, pp, x)
    jac = np.empty((t.size, theta.size))
    datr = np.zeros((a.shape[1], theta.size))
    for i in range(nr):
        dcol = -t * a[:, i]
        jac[:, i] = dcol * x[i]
        datr[i, i] = dcol @ resid
    for j in range(npair):
        e = np.exp(-pp[j] * t)
        dre = -t * e
        dim = -1j * t * e
        c1, c2 = x[nr + 2 * j], x[nr + 2 * j + 1]
        cols_re = (2 * dre.real, -2 * dre.imag)
        cols_im = (2 * dim.real, -2 * dim.imag)
        jac[:, nr + j] = cols_re[0] * c1 + cols_re[1] * c2
        jac[:, nr + npair + j] = cols_im[0] * c1 + cols_im[1] * c2
        datr[nr + 2 * j, nr + j] = cols_re[0] @ resid
        datr[nr + 2 * j + 1, nr + j] = cols_re[1] @ resid
        datr[nr + 2 * j, nr + npair + j] = cols_im[0] @ resid
        datr[nr + 2 * j + 1, nr + npair + j] = cols_im[1] @ resid
    jac -= q @ (q.T @ jac)
    jac += q @ np.linalg.solve(r_tri.T, datr)
    return resid, jac


def _refine_rates(t, samples, real_rates, pair_rates, max_iter=200):
    """Variable-projection Gauss-Newton on the rates; amplitudes eliminated."""
    nr, npair = len(real_rates), len(pair_rates)
    theta0 = np.array(
        [max(r, 0.0) for r in real_rates]
        + [max(g.real, 0.0) for g in pair_rates]
        + [max(g.imag, 0.0) for g in pair_rates]
    )
    if theta0.size == 0:
        return real_rates, pair_rates

    lo = np.zeros_like(theta0)
    hi = np.full_like(theta0, np.inf)
    try:
        sol = least_squares(
            lambda th: _varpro_parts(th, nr, npair, t, samples, False)[0],
            theta0,
            jac=lambda th: _varpro_parts(th, nr, npair, t, samples, True)[1],
            bounds=(lo, hi), method="trf",
            gtol=1e-12, xtol=1e-15, ftol=1e-15, max_nfev=max_iter,
        )
        theta = sol.x
    except np.linalg.LinAlgError:
        theta = theta0
    rr = list(theta[:nr])
    pp = [complex(theta[nr + j], theta[nr + npair + j]) for j in range(npair)]
    return rr, pp


def _rate_candidates(f, dt, j, svd_cache, best_by_j):
    """Deterministic initial rate sets for a j-term fit."""
    cands = []
    z = _pencil_roots_from(*svd_cache, j, check_rank=False)
    cands.append(-np.log(z) / dt)
    tk = _takagi_roots(f, dt, j)
    if tk is not None:
        cands.append(tk)
    # greedy: extend a smaller fit by modes of its own residual
    t = np.arange(f.size) * dt
    for back in (1, 2):
        prev = best_by_j.get(j - back)
        if prev is None:
            continue
        _, rr, pp, x = prev
        recon = _design_matrix(t, rr, pp) @ x
        resid = f - recon
        if not np.any(np.abs(resid) > 1e-14):
            continue
        s2, vh2 = _hankel_svd(resid[:: max(1, resid.size // 1600)])
        z2 = _pencil_roots_from(s2, vh2, back, check_rank=False)
        extra = -np.log(z2) / (dt * max(1, resid.size // 1600))
        base = [complex(r) for r in rr] + [g for g in pp] + [np.conj(g) for g in pp]
        cands.append(np.array(base + list(extra)))
    return cands


def prony_fit(samples, k: int, dt: float, refine: bool = True):
    """Best k-term exponential fit of a real uniform time series.

    Rates are initialized from the shifted-Hankel matrix pencil (plus a
    con-eigenvector candidate and a greedy extension of the smaller
    fits), refined by variable-projection Gauss-Newton, and the
    amplitudes solved by linear least squares in a conjugate-symmetric
    real basis, so the reconstruction is exactly real and every rate
    decays.  Term counts 1..k are fitted in turn and a weaker (j+1)-term
    optimum is replaced by the j-term one padded with a zero-amplitude
    term, so the least-squares residual never increases with k.
    """
    f = np.asarray(samples, dtype=float)
    if f.ndim != 1:
        raise ValueError("samples must be a 1-D real series")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > f.size / 10:
        raise ValueError(f"k={k} too large for {f.size} samples (need k <= n/10)")
    t = np.arange(f.size) * dt

    svd_cache = _hankel_svd(f)
    _pencil_roots_from(*svd_cache, k)  # rank gate for the requested k
    best_by_j: dict[int, tuple] = {}
    best = None  # (resid2, real_rates, pair_rates, x)
    for j in range(1, k + 1):
        sols = []
        for gamma in _rate_candidates(f, dt, j, svd_cache, best_by_j):
            real_rates, pair_rates = _split_rates(gamma, lenient=True)
            if refine:
                real_rates, pair_rates = _refine_rates(t, f, real_rates, pair_rates)
            try:
                x, resid2 = _solve_amplitudes(t, f, real_rates, pair_rates)
            except np.linalg.LinAlgError:
                continue
            sols.append((resid2, real_rates, pair_rates, x))
        sols.sort(key=lambda s: s[0])
        cur = sols[0]
        if best is not None and best[0] < cur[0]:
            # pad the better smaller fit with an inert term
            real_rates = list(best[1]) + [1.0]
            x = np.concatenate([best[3][: len(best[1])], [0.0], best[3][len(best[1]) :]])
            cur = (best[0], real_rates, list(best[2]), x)
        best = cur
        best_by_j[j] = cur
    return _terms_from_solution(best[3], best[1], best[2])


def _close_part(terms, tol: float):
    """Exactly conjugate-close one fitted part; returns (terms, partner).

    Missing partners of complex-rate terms are created with the conjugate
    amplitude (implied by the part reconstructing a real function); a
    closure violation beyond ``tol`` is an error.
    """
    items = [(complex(a), complex(g)) for a, g in terms]
    out_terms: list[tuple[complex, complex]] = []
    out_partner: list[int] = []
    used = [False] * len(items)
    for i, (a, g) in enumerate(items):
        if used[i]:
            continue
        used[i] = True
        if abs(g.imag) <= tol * (1.0 + abs(g)):
            if abs(a.imag) > tol * (1.0 + abs(a)):
                raise ConjugateClosureError(
                    f"real-rate term has non-real amplitude {a!r}"
                )
            out_partner.append(len(out_terms))
            out_terms.append((complex(a.real), complex(g.real)))
            continue
        candidates = [
            j for j in range(i + 1, len(items))
            if not used[j] and abs(items[j][1] - np.conj(g)) <= tol * (1.0 + abs(g))
        ]
        if candidates:
            j = min(candidates, key=lambda j: abs(items[j][1] - np.conj(g)))
            aj, gj = items[j]
            if abs(aj - np.conj(a)) > tol * (1.0 + abs(a)):
                raise ConjugateClosureError(
                    f"conjugate rates {g!r}/{gj!r} carry amplitudes {a!r}/{aj!r} "
                    f"that violate closure beyond {tol}"
                )
            used[j] = True
            a0 = (a + np.conj(aj)) / 2.0
            g0 = (g + np.conj(gj)) / 2.0
        else:
            # partner absent: create it; amplitude implied by realness of the part
            a0, g0 = a, g
        idx = len(out_terms)
        out_partner.extend([idx + 1, idx])
        out_terms.append((a0, g0))
        out_terms.append((np.conj(a0), np.conj(g0)))
    return out_terms, out_partner


def assemble_series(re_fit, im_fit, tol: float = 1e-8) -> ExponentialSeries:
    """Merge the Re and Im part fits into one complex exponential series.

    C(t) = R(t) + i I(t): amplitudes of the imaginary part enter
    multiplied by i.  Partners never cross between the two parts since
    conjugate rates live within each part's own conjugate-closed set.
    """
    re_terms, re_partner = _close_part(re_fit, tol)
    im_terms, im_partner = _close_part(im_fit, tol)
    eta = [a for a, _ in re_terms] + [1j * b for b, _ in im_terms]
    gamma = [g for _, g in re_terms] + [g for _, g in im_terms]
    off = len(re_terms)
    partner = re_partner + [p + off for p in im_partner]
    return ExponentialSeries(np.array(eta, complex), np.array(gamma, complex),
                             np.array(partner, int))


def fit_report(series: ExponentialSeries, t, samples) -> FitReport:
    """Residual statistics of a series against sampled TCF values."""
    c = np.asarray(samples, dtype=complex)
    d = series.reconstruct(t) - c
    return FitReport(
        max_abs_error=float(np.max(np.abs(d))),
        rms_error=float(np.sqrt(np.mean(np.abs(d) ** 2))),
        re_max_error=float(np.max(np.abs(d.real))),
        re_rms_error=float(np.sqrt(np.mean(d.real**2))),
        im_max_error=float(np.max(np.abs(d.imag))),
        im_rms_error=float(np.sqrt(np.mean(d.imag**2))),
        n_samples=int(c.size),
    )


@dataclass
class TCFFit:
    """A fitted bath: the series, its report, and the sampled exact TCF."""

    series: ExponentialSeries
    report: FitReport
    times: np.ndarray
    samples: np.ndarray


def fit_bath(spec: BathSpec, strategy: FitStrategy,
             quad: QuadratureSpec | None = None) -> TCFFit:
    """Sample the exact TCF and run the full two-part fit pipeline."""
    problems = strategy.problems()
    if problems:
        raise ValueError("invalid FitStrategy: " + "; ".join(problems))
    t, c = sample_tcf(spec, strategy, quad)
    re_fit = prony_fit(c.real, strategy.k_real, strategy.dt_sample, strategy.refine)
    im_fit = prony_fit(c.imag, strategy.k_imag, strategy.dt_sample, strategy.refine)
    series = assemble_series(re_fit, im_fit)
    return TCFFit(series, fit_report(series, t, c), t, c)


def fit_to_json(fit: TCFFit) -> dict:
    """Documented JSON layout of a fit: terms, partner map, errors, samples."""
    out = {"schema": "spindeom-fit-1"}
    out.update(fit.series.to_dict())
    out["errors"] = fit.report.to_dict()
    t = fit.times
    out["samples"] = {
        "t0": float(t[0]) if t.size else 0.0,
        "dt": float(t[1] - t[0]) if t.size > 1 else 0.0,
        "n": int(t.size),
        "re": [float(v) for v in fit.samples.real],
        "im": [float(v) for v in fit.samples.imag],
    }
    return out


def fit_from_json(data: dict) -> TCFFit:
    series = ExponentialSeries.from_dict(data)
    report = FitReport.from_dict(data["errors"])
    s = data["samples"]
    t = s["t0"] + s["dt"] * np.arange(s["n"])
    c = np.array(s["re"], float) + 1j * np.array(s["im"], float)
    return TCFFit(series, report, t, c)
