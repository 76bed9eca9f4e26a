"""Dissipaton hierarchy construction and propagation.

One dissipation mode couples the two-level system to the fitted
exponential decomposition of the bath TCF.  The hierarchy state is a
flat array of 2x2 complex matrices indexed by occupation vectors; the
right-hand side is evaluated with vectorized gathers against
precomputed neighbor tables, which is the hot loop of the whole
package.  Truncation is a hard tier cap; on-the-fly filtering zeroes
entries whose max-norm falls below a tolerance and re-materializes them
on demand when a neighbor could source them again.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .expfit import ExponentialSeries
from .observables import (
    SIGMA_X,
    SIGMA_Z,
    Trajectory,
    coherence_abs,
    population,
    von_neumann_entropy,
)

try:
    import numba

    numba.config.THREADING_LAYER = "workqueue"
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_JIT = _HAVE_NUMBA  # flip off to force the pure-numpy kernel

DEFAULT_KEY_CAP = 5_000_000
_ROOT_NORM_LIMIT = 10.0


class HierarchySizeError(RuntimeError):
    """Requested index set exceeds the configured key cap."""


class HierarchyDivergenceError(RuntimeError):
    """Propagation produced non-finite or runaway values."""


@dataclass
class SystemSpec:
    """Two-level system: bias, tunneling, coupling operator, initial state."""

    epsilon: float = 0.0
    delta: float = 1.0
    q_op: np.ndarray = field(default_factory=lambda: SIGMA_Z.copy())
    rho0: np.ndarray = field(
        default_factory=lambda: np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex)
    )

    def problems(self) -> list[str]:
        out = []
        q = np.asarray(self.q_op, dtype=complex)
        r = np.asarray(self.rho0, dtype=complex)
        if q.shape != (2, 2):
            out.append(f"q_op: must be 2x2, got {q.shape}")
        elif np.max(np.abs(q - q.conj().T)) > 1e-12:
            out.append("q_op: must be Hermitian")
        if r.shape != (2, 2):
            out.append(f"rho0: must be 2x2, got {r.shape}")
        else:
            if np.max(np.abs(r - r.conj().T)) > 1e-12:
                out.append("rho0: must be Hermitian")
            if abs(np.trace(r) - 1.0) > 1e-12:
                out.append(f"rho0: trace must be 1, got {np.trace(r)}")
            if np.linalg.eigvalsh(0.5 * (r + r.conj().T)).min() < -1e-12:
                out.append("rho0: must be positive semidefinite")
        return out

    def hamiltonian(self) -> np.ndarray:
        return self.epsilon * SIGMA_Z + self.delta * SIGMA_X


@dataclass
class HierarchyParams:
    """Truncation tier, integrator step, filter tolerance and run horizon."""

    tier: int
    t_final: float
    dt: float = 0.0025
    filter_tol: float | None = 5e-7  # None or 0 disables filtering
    record_stride: int = 4
    max_keys: int = DEFAULT_KEY_CAP

    def problems(self) -> list[str]:
        out = []
        if self.tier < 0:
            out.append(f"tier: must be >= 0, got {self.tier}")
        if not (self.dt > 0):
            out.append(f"dt: must be > 0, got {self.dt}")
        if not (self.t_final >= 0):
            out.append(f"t_final: must be >= 0, got {self.t_final}")
        if self.filter_tol is not None and self.filter_tol < 0:
            out.append(f"filter_tol: must be >= 0 or None, got {self.filter_tol}")
        if self.record_stride < 1:
            out.append(f"record_stride: must be >= 1, got {self.record_stride}")
        if self.max_keys < 1:
            out.append(f"max_keys: must be >= 1, got {self.max_keys}")
        return out

    @property
    def filtering(self) -> bool:
        return self.filter_tol is not None and self.filter_tol > 0


def deom_coefficients(series: ExponentialSeries):
    """Symmetric/antisymmetric amplitude splits per term.

    eta'_k = (eta_k + conj(eta_kbar)) / 2 enters the commutator channel,
    eta''_k = (eta_k - conj(eta_kbar)) / (2i) the anticommutator one.
    """
    eta = series.eta
    eta_bar = np.conj(eta[series.partner])
    eta_p = 0.5 * (eta + eta_bar)
    eta_pp = (eta - eta_bar) / 2j
    return eta_p, eta_pp


def _compositions(n: int, k: int, memo: dict) -> np.ndarray:
    """All length-k occupation vectors summing to n, first entry descending."""
    key = (n, k)
    if key in memo:
        return memo[key]
    if k == 0:
        out = np.zeros((1 if n == 0 else 0, 0), dtype=np.uint8)
    elif k == 1:
        out = np.array([[n]], dtype=np.uint8)
    else:
        blocks = []
        for first in range(n, -1, -1):
            rest = _compositions(n - first, k - 1, memo)
            head = np.full((rest.shape[0], 1), first, dtype=np.uint8)
            blocks.append(np.hstack([head, rest]))
        out = np.vstack(blocks)
    memo[key] = out
    return out


def build_index_set(k_terms: int, tier: int, cap: int = DEFAULT_KEY_CAP) -> np.ndarray:
    """All occupation vectors with total tier <= cap, graded ordering.

    Within a tier the first component descends, matching the enumeration
    the tests pin down.  The count C(tier + k, k) is checked against
    ``cap`` before any key is materialized.
    """
    if k_terms < 0 or tier < 0:
        raise ValueError("k_terms and tier must be >= 0")
    count = math.comb(tier + k_terms, k_terms)
    if count > cap:
        raise HierarchySizeError(
            f"index set would hold {count} keys, above the cap of {cap}"
        )
    if k_terms == 0:
        return np.zeros((1, 0), dtype=np.uint8)
    if tier > 255:
        raise HierarchySizeError("tier above 255 not representable")
    memo: dict = {}
    return np.vstack([_compositions(n, k_terms, memo) for n in range(tier + 1)])


def _keys_bytes_view(keys: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(keys).view(np.dtype((bytes, keys.shape[1]))).ravel()


def _find_root_row(keys: np.ndarray) -> int:
    if keys.shape[1] == 0:
        return 0
    row = _KeyLookup(keys).find(np.zeros((1, keys.shape[1]), dtype=np.uint8))[0]
    if row < 0:
        raise ValueError("key set is missing the root")
    return int(row)


class _KeyLookup:
    """Vectorized occupation-vector -> row lookup via a sorted bytes view."""

    def __init__(self, keys: np.ndarray):
        view = _keys_bytes_view(keys)
        self.order = np.argsort(view, kind="stable")
        self.sorted_view = view[self.order]

    def find(self, queries: np.ndarray) -> np.ndarray:
        """Row indices of query keys; -1 where absent."""
        qv = _keys_bytes_view(queries)
        pos = np.searchsorted(self.sorted_view, qv)
        pos_c = np.minimum(pos, self.sorted_view.size - 1)
        hit = self.sorted_view[pos_c] == qv
        return np.where(hit, self.order[pos_c], -1)


class _Workspace:
    """Neighbor tables and per-key static weights for the RHS kernel."""

    def __init__(self, keys: np.ndarray, tier_cap: int, series: ExponentialSeries,
                 coeffs=None):
        n, k = keys.shape
        self.keys = keys
        self.n = n
        self.k = k
        self.tier_cap = tier_cap
        occ = keys.astype(np.float64)
        self.tiers = occ.sum(axis=1).astype(np.int64)
        if coeffs is None:
            coeffs = deom_coefficients(series)
        eta_p, eta_pp = coeffs
        self.decay = occ @ series.gamma if k else np.zeros(n, dtype=complex)
        self.w1 = occ * eta_p[None, :] if k else np.zeros((n, 0), dtype=complex)
        self.w2 = occ * eta_pp[None, :] if k else np.zeros((n, 0), dtype=complex)

        pad = n  # gather row for absent neighbors; held at zero
        self.plus_idx = np.full((n, k), pad, dtype=np.int64)
        self.minus_idx = np.full((n, k), pad, dtype=np.int64)
        boundary = np.zeros(n, dtype=bool)
        if k:
            lut = _KeyLookup(keys)
            eye = np.eye(k, dtype=np.int16)
            base = keys.astype(np.int16)[:, None, :]
            up = (base + eye[None, :, :]).reshape(n * k, k)
            up_ok = up.sum(axis=1) <= tier_cap
            idx = np.full(n * k, -1, dtype=np.int64)
            idx[up_ok] = lut.find(up[up_ok].astype(np.uint8))
            self.plus_idx = np.where(idx >= 0, idx, pad).reshape(n, k)
            boundary |= ((idx.reshape(n, k) < 0) & up_ok.reshape(n, k)).any(axis=1)

            down = (base - eye[None, :, :]).reshape(n * k, k)
            down_ok = (down >= 0).all(axis=1)
            idx = np.full(n * k, -1, dtype=np.int64)
            idx[down_ok] = lut.find(down[down_ok].astype(np.uint8))
            self.minus_idx = np.where(idx >= 0, idx, pad).reshape(n, k)
            boundary |= ((idx.reshape(n, k) < 0) & down_ok.reshape(n, k)).any(axis=1)
        self.boundary = boundary


if _HAVE_NUMBA:

    @numba.njit(parallel=True, fastmath=False, cache=True)
    def _rhs_kernel_flat(rho, plus_idx, minus_idx, w1, w2, decay, h, q, out):
        """Per-key right-hand side on (N+1, 4) flattened matrices.

        Row N of ``rho`` is the all-zero gather target for absent
        neighbors.  Each output row is written by exactly one loop
        iteration with a fixed in-row summation order, so the result is
        independent of the thread schedule.
        """
        n = out.shape[0]
        k = plus_idx.shape[1]
        h00, h01, h10, h11 = h[0], h[1], h[2], h[3]
        q00, q01, q10, q11 = q[0], q[1], q[2], q[3]
        for i in numba.prange(n):
            r00, r01, r10, r11 = rho[i, 0], rho[i, 1], rho[i, 2], rho[i, 3]
            # -i [H, r] - decay r
            c00 = h00 * r00 + h01 * r10 - (r00 * h00 + r01 * h10)
            c01 = h00 * r01 + h01 * r11 - (r00 * h01 + r01 * h11)
            c10 = h10 * r00 + h11 * r10 - (r10 * h00 + r11 * h10)
            c11 = h10 * r01 + h11 * r11 - (r10 * h01 + r11 * h11)
            d = decay[i]
            o00 = -1j * c00 - d * r00
            o01 = -1j * c01 - d * r01
            o10 = -1j * c10 - d * r10
            o11 = -1j * c11 - d * r11
            s00 = 0j; s01 = 0j; s10 = 0j; s11 = 0j
            m100 = 0j; m101 = 0j; m110 = 0j; m111 = 0j
            m200 = 0j; m201 = 0j; m210 = 0j; m211 = 0j
            for j in range(k):
                ip = plus_idx[i, j]
                s00 += rho[ip, 0]; s01 += rho[ip, 1]
                s10 += rho[ip, 2]; s11 += rho[ip, 3]
                im = minus_idx[i, j]
                a1 = w1[i, j]; a2 = w2[i, j]
                g0, g1, g2, g3 = rho[im, 0], rho[im, 1], rho[im, 2], rho[im, 3]
                m100 += a1 * g0; m101 += a1 * g1; m110 += a1 * g2; m111 += a1 * g3
                m200 += a2 * g0; m201 += a2 * g1; m210 += a2 * g2; m211 += a2 * g3
            # -i [Q, s + m1] + {Q, m2}
            x00 = s00 + m100; x01 = s01 + m101; x10 = s10 + m110; x11 = s11 + m111
            cc00 = q00 * x00 + q01 * x10 - (x00 * q00 + x01 * q10)
            cc01 = q00 * x01 + q01 * x11 - (x00 * q01 + x01 * q11)
            cc10 = q10 * x00 + q11 * x10 - (x10 * q00 + x11 * q10)
            cc11 = q10 * x01 + q11 * x11 - (x10 * q01 + x11 * q11)
            a00 = q00 * m200 + q01 * m210 + (m200 * q00 + m201 * q10)
            a01 = q00 * m201 + q01 * m211 + (m200 * q01 + m201 * q11)
            a10 = q10 * m200 + q11 * m210 + (m210 * q00 + m211 * q10)
            a11 = q10 * m201 + q11 * m211 + (m210 * q01 + m211 * q11)
            out[i, 0] = o00 - 1j * cc00 + a00
            out[i, 1] = o01 - 1j * cc01 + a01
            out[i, 2] = o10 - 1j * cc10 + a10
            out[i, 3] = o11 - 1j * cc11 + a11


def _rhs_numpy(rho_pad: np.ndarray, ws: _Workspace, h_sys: np.ndarray,
               q_op: np.ndarray, out: np.ndarray) -> np.ndarray:
    rho = rho_pad[:-1]
    comm = h_sys @ rho - rho @ h_sys
    out[:] = -1j * comm - ws.decay[:, None, None] * rho
    if ws.k:
        up = rho_pad[ws.plus_idx].sum(axis=1)
        out += -1j * (q_op @ up - up @ q_op)
        down = rho_pad[ws.minus_idx]
        m1 = np.einsum("nk,nkab->nab", ws.w1, down)
        m2 = np.einsum("nk,nkab->nab", ws.w2, down)
        out += -1j * (q_op @ m1 - m1 @ q_op) + (q_op @ m2 + m2 @ q_op)
    return out


def _rhs_kernel(rho_pad: np.ndarray, ws: _Workspace, h_sys: np.ndarray,
                q_op: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Hierarchy right-hand side for all keys at once.

    ``rho_pad`` carries one extra all-zero row used as the gather target
    for truncated or pruned neighbors, which keeps the kernel free of
    masks.  Dispatches to the jitted flat kernel when available; both
    paths produce the same values and are cross-checked in the tests.
    """
    if USE_JIT and _HAVE_NUMBA and ws.k:
        _rhs_kernel_flat(
            rho_pad.reshape(rho_pad.shape[0], 4),
            ws.plus_idx, ws.minus_idx, ws.w1, ws.w2, ws.decay,
            np.ascontiguousarray(h_sys, dtype=complex).reshape(4),
            np.ascontiguousarray(q_op, dtype=complex).reshape(4),
            out.reshape(out.shape[0], 4),
        )
        return out
    return _rhs_numpy(rho_pad, ws, h_sys, q_op, out)


class DDOStore:
    """Hierarchy state: an occupation-key to 2x2 matrix collection.

    Wraps the flat arrays used for propagation; the root (all-zero key)
    is always present and is the reduced density matrix.
    """

    def __init__(self, keys: np.ndarray, rho: np.ndarray, tier_cap: int,
                 series: ExponentialSeries):
        keys = np.ascontiguousarray(keys, dtype=np.uint8)
        if keys.ndim != 2 or rho.shape != (keys.shape[0], 2, 2):
            raise ValueError("keys must be (N, K) and rho (N, 2, 2)")
        if keys.shape[1] and keys.sum(axis=1).max(initial=0) > tier_cap:
            raise ValueError("store holds keys above the tier cap")
        self.keys = keys
        self.rho = np.asarray(rho, dtype=complex)
        self.tier_cap = tier_cap
        self.series = series
        self._index = {k.tobytes(): i for i, k in enumerate(keys)}
        root = np.zeros(keys.shape[1], dtype=np.uint8)
        if root.tobytes() not in self._index:
            raise ValueError("store must contain the root key")
        self.root_row = self._index[root.tobytes()]
        self._workspace: _Workspace | None = None

    @classmethod
    def initial(cls, series: ExponentialSeries, tier_cap: int, rho0: np.ndarray,
                adaptive: bool = False, cap: int = DEFAULT_KEY_CAP) -> "DDOStore":
        """Factorized initial condition: root = rho0, everything else zero."""
        k = series.n_terms
        if adaptive and k:
            root = np.zeros((1, k), dtype=np.uint8)
            keys = _grow_keys(root, tier_cap)
        else:
            keys = build_index_set(k, tier_cap, cap)
        rho = np.zeros((keys.shape[0], 2, 2), dtype=complex)
        store = cls(keys, rho, tier_cap, series)
        store.rho[store.root_row] = np.asarray(rho0, dtype=complex)
        return store

    @property
    def n_entries(self) -> int:
        return self.keys.shape[0]

    @property
    def root(self) -> np.ndarray:
        return self.rho[self.root_row]

    def get(self, key) -> np.ndarray | None:
        row = self._index.get(np.asarray(key, dtype=np.uint8).tobytes())
        return None if row is None else self.rho[row]

    def items(self):
        for i, k in enumerate(self.keys):
            yield tuple(int(v) for v in k), self.rho[i]

    def norms(self) -> np.ndarray:
        return np.abs(self.rho).reshape(self.n_entries, -1).max(axis=1)

    def copy(self) -> "DDOStore":
        return DDOStore(self.keys.copy(), self.rho.copy(), self.tier_cap, self.series)

    def workspace(self) -> _Workspace:
        if self._workspace is None:
            self._workspace = _Workspace(self.keys, self.tier_cap, self.series)
        return self._workspace


def _grow_keys(active_keys: np.ndarray, tier_cap: int) -> np.ndarray:
    """Active keys plus every tier-legal neighbor, lexicographically sorted."""
    n, k = active_keys.shape
    if k == 0 or n == 0:
        return np.zeros((1, 0), dtype=np.uint8)
    eye = np.eye(k, dtype=np.int16)
    base = active_keys.astype(np.int16)[:, None, :]
    up = (base + eye[None, :, :]).reshape(n * k, k)
    up = up[up.sum(axis=1) <= tier_cap]
    down = (base - eye[None, :, :]).reshape(n * k, k)
    down = down[(down >= 0).all(axis=1)]
    root = np.zeros((1, k), dtype=np.int16)
    all_keys = np.vstack([active_keys.astype(np.int16), up, down, root])
    return np.unique(all_keys, axis=0).astype(np.uint8)


def deom_rhs(store: DDOStore, sys: SystemSpec, coeffs=None) -> DDOStore:
    """Time derivative of every entry, as a store with the same keys."""
    if coeffs is not None:
        ws = _Workspace(store.keys, store.tier_cap, store.series, coeffs)
    else:
        ws = store.workspace()
    rho_pad = np.zeros((store.n_entries + 1, 2, 2), dtype=complex)
    rho_pad[:-1] = store.rho
    out = np.empty_like(store.rho)
    _rhs_kernel(rho_pad, ws, sys.hamiltonian(), np.asarray(sys.q_op, complex), out)
    deriv = DDOStore(store.keys, out, store.tier_cap, store.series)
    deriv._workspace = ws
    return deriv


def rk4_step(store: DDOStore, sys: SystemSpec, coeffs=None,
             dt: float = 0.0025) -> DDOStore:
    """One classical Runge-Kutta step of the whole hierarchy."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if coeffs is not None:
        ws = _Workspace(store.keys, store.tier_cap, store.series, coeffs)
    else:
        ws = store.workspace()
    h = sys.hamiltonian()
    q = np.asarray(sys.q_op, dtype=complex)
    n = store.n_entries
    pad = np.zeros((n + 1, 2, 2), dtype=complex)
    pad[:-1] = store.rho
    work = np.zeros_like(pad)
    k1, k2, k3, k4 = (np.empty_like(store.rho) for _ in range(4))
    _rhs_kernel(pad, ws, h, q, k1)
    work[:-1] = pad[:-1] + (0.5 * dt) * k1
    _rhs_kernel(work, ws, h, q, k2)
    work[:-1] = pad[:-1] + (0.5 * dt) * k2
    _rhs_kernel(work, ws, h, q, k3)
    work[:-1] = pad[:-1] + dt * k3
    _rhs_kernel(work, ws, h, q, k4)
    new_rho = store.rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(new_rho).all():
        bad = np.nonzero(~np.isfinite(new_rho).reshape(n, -1).all(axis=1))[0][0]
        key = tuple(int(v) for v in store.keys[bad])
        raise HierarchyDivergenceError(f"non-finite value at key {key}")
    out = DDOStore(store.keys, new_rho, store.tier_cap, store.series)
    out._workspace = ws
    return out


def filter_prune(store: DDOStore, tol: float | None) -> DDOStore:
    """Drop entries (never the root) whose max-norm falls below tol.

    A disabled tolerance (None or 0) returns an unchanged copy; an
    infinite one keeps only the root.  Dropped entries act as zeros and
    re-enter propagation when a neighbor's source would exceed the
    tolerance again.
    """
    if tol is None or tol == 0:
        return store.copy()
    keep = store.norms() >= tol
    keep[store.root_row] = True
    return DDOStore(store.keys[keep], store.rho[keep], store.tier_cap, store.series)


def _record_stats(root: np.ndarray, stats: dict) -> None:
    trace_dev = abs(complex(np.trace(root)) - 1.0)
    herm_dev = float(np.max(np.abs(root - root.conj().T)))
    stats["max_trace_dev"] = max(stats.get("max_trace_dev", 0.0), trace_dev)
    stats["max_herm_dev"] = max(stats.get("max_herm_dev", 0.0), herm_dev)


def propagate(sys: SystemSpec, series: ExponentialSeries, params: HierarchyParams,
              metadata: dict | None = None,
              checkpoint_path=None, checkpoint_every: int | None = None,
              resume_from=None) -> Trajectory:
    """Propagate the hierarchy from the factorized initial condition.

    Observables are recorded every ``record_stride`` steps (and at the
    final step).  With filtering enabled the materialized key set grows
    and shrinks on demand; without it the full index set below the tier
    cap is built up front.  Checkpoints, when requested, carry the whole
    state needed to resume bit-compatibly at a step boundary.
    """
    problems = sys.problems() + params.problems()
    if problems:
        raise ValueError("; ".join(problems))
    coeffs = deom_coefficients(series)
    h = sys.hamiltonian()
    q = np.asarray(sys.q_op, dtype=complex)
    tol = params.filter_tol if params.filtering else 0.0
    n_steps = int(round(params.t_final / params.dt))

    if resume_from is not None:
        state = load_checkpoint(resume_from) if not isinstance(resume_from, dict) else resume_from
        keys = state["keys"]
        rho = state["rho"]
        start_step = int(state["step"])
    else:
        store0 = DDOStore.initial(series, params.tier, sys.rho0,
                                  adaptive=params.filtering, cap=params.max_keys)
        keys, rho = store0.keys, store0.rho
        start_step = 0

    ws = _Workspace(keys, params.tier, series, coeffs)
    root_row = _find_root_row(keys)
    n = keys.shape[0]
    pad = np.zeros((n + 1, 2, 2), dtype=complex)
    pad[:-1] = rho
    work = np.zeros_like(pad)
    k_bufs = [np.empty((n, 2, 2), dtype=complex) for _ in range(4)]

    records = {"t": [], "P": [], "S": [], "coh": [], "act": []}
    stats: dict = {"n_rebuilds": 0, "max_tier_active": 0, "max_keys_held": n}

    def rebuild(active_mask):
        nonlocal ws, root_row, n, pad, work, k_bufs
        new_keys = _grow_keys(ws.keys[active_mask], params.tier)
        if new_keys.shape[0] > params.max_keys:
            raise HierarchySizeError(
                f"filtered set grew to {new_keys.shape[0]} keys, above "
                f"max_keys={params.max_keys}"
            )
        old_rows = _KeyLookup(ws.keys).find(new_keys)
        new_n = new_keys.shape[0]
        new_pad = np.zeros((new_n + 1, 2, 2), dtype=complex)
        hit = old_rows >= 0
        new_pad[:-1][hit] = pad[:-1][old_rows[hit]]
        ws = _Workspace(new_keys, params.tier, series, coeffs)
        root_row = _find_root_row(new_keys)
        n = new_n
        pad = new_pad
        work = np.zeros_like(pad)
        k_bufs = [np.empty((n, 2, 2), dtype=complex) for _ in range(4)]
        stats["n_rebuilds"] += 1
        stats["max_keys_held"] = max(stats["max_keys_held"], n)

    def record(step):
        root = pad[root_row]
        if not np.isfinite(root).all():
            raise HierarchyDivergenceError("non-finite root density matrix")
        if np.max(np.abs(root)) > _ROOT_NORM_LIMIT:
            raise HierarchyDivergenceError(
                "root norm exceeded limit; raise the tier cap or lower dt"
            )
        records["t"].append(step * params.dt)
        records["P"].append(population(root))
        records["S"].append(von_neumann_entropy(root))
        records["coh"].append(coherence_abs(root))
        norms = np.abs(pad[:-1]).reshape(n, -1).max(axis=1)
        act = norms >= tol if tol else norms > 0
        act[root_row] = True
        n_act = int(act.sum()) if tol else n
        stats["max_tier_active"] = max(
            stats["max_tier_active"], int(ws.tiers[act].max())
        )
        records["act"].append(n_act)
        _record_stats(root, stats)

    if start_step == 0:
        record(0)

    for step in range(start_step, n_steps):
        if tol:
            norms = np.abs(pad[:-1]).reshape(n, -1).max(axis=1)
            active = norms >= tol
            active[root_row] = True
            pad[:-1][~active] = 0.0
            if np.any(active & ws.boundary):
                rebuild(active)

        _rhs_kernel(pad, ws, h, q, k_bufs[0])
        work[:-1] = pad[:-1] + (0.5 * params.dt) * k_bufs[0]
        _rhs_kernel(work, ws, h, q, k_bufs[1])
        work[:-1] = pad[:-1] + (0.5 * params.dt) * k_bufs[1]
        _rhs_kernel(work, ws, h, q, k_bufs[2])
        work[:-1] = pad[:-1] + params.dt * k_bufs[2]
        _rhs_kernel(work, ws, h, q, k_bufs[3])
        pad[:-1] += (params.dt / 6.0) * (
            k_bufs[0] + 2.0 * k_bufs[1] + 2.0 * k_bufs[2] + k_bufs[3]
        )

        done = step + 1
        if done % params.record_stride == 0 or done == n_steps:
            record(done)
        if checkpoint_path is not None and checkpoint_every and \
                done % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, ws.keys, pad[:-1], done, sys, series, params)

    traj = Trajectory(
        times=np.array(records["t"]),
        population=np.array(records["P"]),
        entropy=np.array(records["S"]),
        coherence=np.array(records["coh"]),
        n_active=np.array(records["act"], dtype=int),
        metadata=dict(metadata or {}),
        stats=stats,
        final_rho=pad[root_row].copy(),
    )
    return traj


def save_checkpoint(path, keys, rho, step, sys: SystemSpec,
                    series: ExponentialSeries, params: HierarchyParams) -> None:
    """Binary dump of the full propagation state at a step boundary."""
    meta = {
        "step": int(step),
        "system": {
            "epsilon": sys.epsilon,
            "delta": sys.delta,
            "q_op": [[str(v) for v in row] for row in np.asarray(sys.q_op, complex)],
            "rho0": [[str(v) for v in row] for row in np.asarray(sys.rho0, complex)],
        },
        "params": {
            "tier": params.tier, "t_final": params.t_final, "dt": params.dt,
            "filter_tol": params.filter_tol, "record_stride": params.record_stride,
            "max_keys": params.max_keys,
        },
        "series": series.to_dict(),
    }
    np.savez(path, keys=keys, rho=rho, step=np.int64(step),
             meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))


def load_checkpoint(path) -> dict:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        return {
            "keys": np.ascontiguousarray(data["keys"], dtype=np.uint8),
            "rho": np.ascontiguousarray(data["rho"], dtype=complex),
            "step": int(data["step"]),
            "meta": meta,
        }
