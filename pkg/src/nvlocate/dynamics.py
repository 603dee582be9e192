"""Exact NV-coherence computation for a nuclear cluster under pulsed control.

The electron never flips between the |0> / |m_s> manifold during free
evolution, so the joint state stays block diagonal and the coherence is

    L(t) = Re Tr[ rho_B  U0(t)^dag U1(t) ],    rho_B = 1 / 2^N,

where U0/U1 propagate the nuclei under the two branch Hamiltonians

    h0 = - sum_j gamma_j B_z I_j^z + H_nn (+ RF drive terms)
    h1 = h0 + m_s sum_j A_j . I_j

and every ideal instantaneous pi pulse swaps the roles of h0 and h1.

Integration strategy:

- no RF tone: the Hamiltonians are constant between pulses; segment
  propagators are cached per duration and one DD period is raised to a
  matrix power across repetitions.
- one RF tone: between pulses the Hamiltonian is periodic with the tone
  period, so a within-period cumulative propagator grid (symmetric
  splitting with the tone integral taken exactly per substep) is built
  once and reused; whole periods enter as matrix powers.  Halving the
  substep is the accuracy contract.
- a second, weak tone (the spin-control field) enters through a
  first-order Dyson correction per inter-pulse interval, evaluated with
  the same grid; this requires gamma*V_control * interval << 1, which the
  caller's regime check enforces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .constants import gamma_of
from .errors import DimensionTooLarge, IntegratorFailure, NoResonantSpin
from .pulse_seq import PulseSequence, fourier_coeff
from .rf_control import RfField, a_pm, drive_geometry, hyperfine_components
from .spin_model import SpinSystem, internuclear_dipolar

MAX_CLUSTER_SPINS = 8

_SX = np.array([[0.0, 0.5], [0.5, 0.0]], dtype=complex)
_SY = np.array([[0.0, -0.5j], [0.5j, 0.0]], dtype=complex)
_SZ = np.array([[0.5, 0.0], [0.0, -0.5]], dtype=complex)
_ID = np.eye(2, dtype=complex)


def spin_operators(n_spins: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(Ix, Iy, Iz) for each of n spin-1/2 in the product basis."""
    ops = []
    for j in range(n_spins):
        mats = []
        for s in (_SX, _SY, _SZ):
            m = np.array([[1.0 + 0j]])
            for k in range(n_spins):
                m = np.kron(m, s if k == j else _ID)
            mats.append(m)
        ops.append(tuple(mats))
    return ops


@dataclass(frozen=True)
class BranchHamiltonians:
    """Static parts of the two branch Hamiltonians on the cluster space."""

    h0: np.ndarray
    h1: np.ndarray
    n_spins: int

    @property
    def dim(self) -> int:
        return 2 ** self.n_spins


@dataclass(frozen=True)
class ToneSpec:
    """One RF tone: Hermitian drive operator with scalar cos(w t - phi)."""

    matrix: np.ndarray
    omega: float
    phase: float


@dataclass
class CoherenceTrace:
    """Sampled coherence against one swept parameter."""

    param: str
    values: np.ndarray
    coherence: np.ndarray
    metadata: dict

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.coherence = np.asarray(self.coherence, dtype=float)
        if self.values.shape != self.coherence.shape:
            raise ValueError("values and coherence must have equal length")

    def to_csv(self) -> str:
        lines = [f"# {k}={v}" for k, v in sorted(self.metadata.items())]
        lines.append(f"{self.param},L")
        for x, l in zip(self.values, self.coherence):
            lines.append(f"{x:.12g},{l:.12g}")
        return "\n".join(lines) + "\n"


def trace_from_csv(text: str) -> CoherenceTrace:
    meta = {}
    rows = []
    param = "param"
    header_seen = False
    for ln in text.splitlines():
        if not ln.strip():
            continue
        if ln.startswith("#"):
            key, _, val = ln[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
            continue
        if not header_seen:
            param = ln.split(",")[0]
            header_seen = True
            continue
        a, b = ln.split(",")
        rows.append((float(a), float(b)))
    vals = np.array([r[0] for r in rows])
    cohs = np.array([r[1] for r in rows])
    return CoherenceTrace(param, vals, cohs, meta)


def build_branches(system: SpinSystem, indices: Optional[Sequence[int]] = None,
                   include_nn: bool = True,
                   max_spins: int = MAX_CLUSTER_SPINS) -> BranchHamiltonians:
    """Assemble h0/h1 for the chosen nuclei (all by default)."""
    if indices is None:
        indices = range(len(system.nuclei))
    indices = list(indices)
    n = len(indices)
    if n > max_spins:
        raise DimensionTooLarge(f"{n} spins exceed the {max_spins}-spin cap")
    ops = spin_operators(n)
    dim = 2 ** n
    h0 = np.zeros((dim, dim), dtype=complex)
    for local, j in enumerate(indices):
        spin = system.nuclei[j]
        h0 -= gamma_of(spin.species) * system.b_z * ops[local][2]
    if include_nn:
        for a in range(n):
            for b in range(a + 1, n):
                sa = system.nuclei[indices[a]]
                sb = system.nuclei[indices[b]]
                coeff, rhat = internuclear_dipolar(sa, sb)
                ia, ib = ops[a], ops[b]
                dot = sum(ia[c] @ ib[c] for c in range(3))
                proj_a = sum(rhat[c] * ia[c] for c in range(3))
                proj_b = sum(rhat[c] * ib[c] for c in range(3))
                h0 += coeff * (dot - 3.0 * (proj_a @ proj_b))
    h1 = h0.copy()
    for local, j in enumerate(indices):
        a_vec = system.hyperfine(j)
        h1 += system.m_s * sum(a_vec[c] * ops[local][c] for c in range(3))
    return BranchHamiltonians(h0=h0, h1=h1, n_spins=n)


def tones_from_fields(system: SpinSystem, fields: Sequence[RfField],
                      indices: Optional[Sequence[int]] = None) -> list[ToneSpec]:
    """Drive operators W = sum_j gamma_j V (nhat . I_j) for each tone."""
    if indices is None:
        indices = range(len(system.nuclei))
    indices = list(indices)
    ops = spin_operators(len(indices))
    tones = []
    for f in fields:
        if f.amplitude == 0.0:
            continue
        w = np.zeros((2 ** len(indices),) * 2, dtype=complex)
        for local, j in enumerate(indices):
            gamma = gamma_of(system.nuclei[j].species)
            for c in range(3):
                w += gamma * f.amplitude * f.direction[c] * ops[local][c]
        tones.append(ToneSpec(matrix=w, omega=f.omega, phase=f.phase))
    return tones


# ---------------------------------------------------------------------------
# propagation machinery
# ---------------------------------------------------------------------------

class _StaticBranch:
    """Cheap exponentials of one static Hamiltonian via its eigenbasis."""

    def __init__(self, h: np.ndarray):
        self.evals, self.evecs = np.linalg.eigh(h)
        self._cache: dict[float, np.ndarray] = {}

    def expm(self, dt: float) -> np.ndarray:
        key = dt
        u = self._cache.get(key)
        if u is None:
            v = self.evecs
            u = (v * np.exp(-1j * self.evals * dt)) @ v.conj().T
            if len(self._cache) < 64:
                self._cache[key] = u
        return u


class _PowerCache:
    """Binary powers of a fixed unitary."""

    def __init__(self, u: np.ndarray):
        self._pows = [u]

    def power(self, n: int) -> np.ndarray:
        if n == 0:
            return np.eye(self._pows[0].shape[0], dtype=complex)
        while 2 ** len(self._pows) <= n:
            last = self._pows[-1]
            self._pows.append(last @ last)
        out = None
        bit = 0
        m = n
        while m:
            if m & 1:
                out = self._pows[bit] if out is None else self._pows[bit] @ out
            m >>= 1
            bit += 1
        return out


class _ToneGrid:
    """Within-period propagators for static H + cos-modulated tone.

    Grid index k holds the propagator from the period start (tone phase
    zero) to s_k = k T / G.  Substeps use a symmetric split
    exp(-i H dt/2) exp(-i cbar W dt) exp(-i H dt/2) with cbar the exact
    substep average of cos(w s), so halving G is the convergence knob.
    """

    def __init__(self, static: _StaticBranch, tone: ToneSpec, n_grid: int,
                 control: Optional[ToneSpec] = None):
        self.static = static
        self.omega = tone.omega
        self.period = 2.0 * np.pi / tone.omega
        self.n_grid = n_grid
        w_evals, w_vecs = np.linalg.eigh(tone.matrix)
        dt = self.period / n_grid
        dim = tone.matrix.shape[0]
        e_half = static.expm(dt / 2.0)
        edges = np.arange(n_grid + 1) * dt
        sines = np.sin(self.omega * edges)
        cbars = (sines[1:] - sines[:-1]) / (self.omega * dt)
        grid = np.empty((n_grid + 1, dim, dim), dtype=complex)
        grid[0] = np.eye(dim, dtype=complex)
        gamma_grid = None
        kmat = None
        if control is not None:
            gamma_grid = np.empty((n_grid + 1, dim, dim), dtype=complex)
            gamma_grid[0] = 0.0
            kmat = control.matrix
            g_prev = kmat.astype(complex)  # K(0) = W_c at identity frame
        for k in range(n_grid):
            phase = np.exp(-1j * cbars[k] * w_evals * dt)
            step = e_half @ ((w_vecs * phase) @ w_vecs.conj().T) @ e_half
            grid[k + 1] = step @ grid[k]
            if control is not None:
                c = grid[k + 1]
                g_next = np.exp(1j * control.omega * edges[k + 1]) * (
                    c.conj().T @ kmat @ c)
                gamma_grid[k + 1] = gamma_grid[k] + 0.5 * dt * (g_prev + g_next)
                g_prev = g_next
        self.grid = grid
        self.gamma_grid = gamma_grid
        self.u_period = grid[n_grid]
        self._powers = _PowerCache(self.u_period)
        self._w_evals = w_evals
        self._w_vecs = w_vecs
        self._dt = dt
        if control is not None:
            # eigendecomposition of the (unitary) period propagator for
            # geometric sums over whole periods
            mu, v = np.linalg.eig(self.u_period)
            self._mu = mu
            self._v = v
            self._v_inv = np.linalg.inv(v)
            self._gamma_full = self.gamma_grid[n_grid]
            self._gamma_full_eig = self._v_inv @ self._gamma_full @ self._v
            self._xi = np.exp(1j * control.omega * self.period)

    # -- basic pieces ------------------------------------------------------

    def _piece(self, s_from: float, s_to: float) -> np.ndarray:
        """One symmetric-split substep over an arbitrary sub-grid span."""
        eps = s_to - s_from
        if eps <= 0.0:
            return np.eye(self.grid.shape[1], dtype=complex)
        cbar = ((np.sin(self.omega * s_to) - np.sin(self.omega * s_from))
                / (self.omega * eps))
        e_half = self.static.expm(eps / 2.0)
        v = self._w_vecs
        mid = (v * np.exp(-1j * cbar * self._w_evals * eps)) @ v.conj().T
        return e_half @ mid @ e_half

    def to_point(self, s: float) -> np.ndarray:
        """Propagator from the period start to fraction-time s in [0, T]."""
        memo = getattr(self, "_to_point_memo", None)
        if memo is None:
            memo = {}
            self._to_point_memo = memo
        hit = memo.get(s)
        if hit is not None:
            return hit
        k_near = int(round(s / self._dt))
        if 0 <= k_near <= self.n_grid and abs(s - k_near * self._dt) < 1e-9 * self._dt:
            out = self.grid[k_near]
        else:
            k = min(int(s / self._dt), self.n_grid)
            out = self._piece(k * self._dt, s) @ self.grid[k]
        if len(memo) > 8:
            memo.clear()
        memo[s] = out
        return out

    def span(self, s_a: float, m_periods: int, s_b: float) -> np.ndarray:
        """Propagator from s_a (period 0) to s_b (period m_periods)."""
        wa = self.to_point(s_a)
        wb = self.to_point(s_b)
        if m_periods == 0:
            return wb @ wa.conj().T
        return wb @ self._powers.power(m_periods) @ wa.conj().T

    # -- first-order control integral over an interval ----------------------

    def control_integral(self, s_a: float, m_periods: int, s_b: float,
                         t_period0: float, control_omega: float) -> np.ndarray:
        """X = int exp(i w_c t) K(t) dt over the interval, frame of s_a.

        K(t) = U(s_a -> t)^dag W_c U(s_a -> t).  The caller multiplies by
        the complex tone amplitude and Hermitianizes.  t_period0 is the
        absolute time of the start of the period containing s_a.
        """
        wa = self.to_point(s_a)

        def gamma_between(lo: float, hi: float) -> np.ndarray:
            klo = min(int(round(lo / self._dt)), self.n_grid)
            khi = min(int(round(hi / self._dt)), self.n_grid)
            g = self.gamma_grid[khi] - self.gamma_grid[klo]
            return g

        phase0 = np.exp(1j * control_omega * t_period0)
        if m_periods == 0:
            x = phase0 * gamma_between(s_a, s_b)
            return wa @ x @ wa.conj().T

        total = phase0 * gamma_between(s_a, self.period)
        if m_periods > 1:
            # sum_{m=1..M-1} xi^m U^-m Gamma_full U^m via the eigenbasis
            gp = self._gamma_full_eig
            mu = self._mu
            q = self._xi * (mu[None, :] / mu[:, None])
            m_count = m_periods - 1
            with np.errstate(divide="ignore", invalid="ignore"):
                geo = q * (1.0 - q ** m_count) / (1.0 - q)
            close = np.abs(1.0 - q) < 1e-9
            if np.any(close):
                geo = np.where(close, q * m_count, geo)
            total = total + phase0 * (self._v @ (gp * geo) @ self._v_inv)
        xlast = gamma_between(0.0, s_b)
        phase_last = np.exp(1j * control_omega * (t_period0 + m_periods * self.period))
        um = self._powers.power(m_periods)
        total = total + phase_last * (um.conj().T @ xlast @ um)
        return wa @ total @ wa.conj().T


def _unitarize_correction(j: np.ndarray) -> np.ndarray:
    """exp(-i j) by 4th-order Taylor; j is small and Hermitian."""
    dim = j.shape[0]
    j2 = j @ j
    j3 = j2 @ j
    j4 = j2 @ j2
    return (np.eye(dim, dtype=complex) - 1j * j - 0.5 * j2
            + (1j / 6.0) * j3 + (1.0 / 24.0) * j4)


class CoherencePropagator:
    """Branch propagators for one system/sequence/field configuration.

    Use `trace(times)` for L at the given times (must be sorted) or
    `coherence(t)` for a single value.
    """

    def __init__(self, branches: BranchHamiltonians,
                 tones: Sequence[ToneSpec], seq: PulseSequence,
                 n_grid: Optional[int] = None):
        self.branches = branches
        self.seq = seq
        dim = branches.dim
        self.dim = dim
        if n_grid is None:
            n_grid = 1024 if dim <= 16 else 512
        self.n_grid = n_grid
        tones = list(tones)
        if len(tones) > 2:
            raise IntegratorFailure("at most two RF tones are supported")
        self.static = (_StaticBranch(branches.h0), _StaticBranch(branches.h1))
        self.control: Optional[ToneSpec] = None
        self.primary: Optional[ToneSpec] = None
        if len(tones) == 2:
            # the stronger tone sets the period; the weak one is treated
            # perturbatively (first-order Dyson per interval)
            tones.sort(key=lambda t: -np.linalg.norm(t.matrix, ord=2))
            strong, weak = tones
            ratio = (np.linalg.norm(weak.matrix, ord=2)
                     / np.linalg.norm(strong.matrix, ord=2))
            if ratio > 0.2:
                raise IntegratorFailure(
                    "two comparable tones: no exact method available "
                    f"(amplitude ratio {ratio:.2f} > 0.2)")
            self.primary, self.control = strong, weak
        elif len(tones) == 1:
            self.primary = tones[0]
        self.grids = None
        if self.primary is not None:
            self.grids = [
                _ToneGrid(self.static[b], self.primary, n_grid, self.control)
                for b in (0, 1)]
        self._no_tone_period: Optional[tuple[np.ndarray, np.ndarray]] = None
        # For large clusters, land the pulses on the substep grid: the
        # time quantization (half a substep, ~1e-4 of an interpulse gap)
        # is far below any protocol sensitivity and makes every grid
        # lookup exact.
        self._snap = self.primary is not None and dim > 16

    def _snap_times(self, times: np.ndarray) -> np.ndarray:
        om, ph = self.primary.omega, self.primary.phase
        units = (om * times - ph) / (2.0 * np.pi) * self.n_grid
        return (2.0 * np.pi * np.round(units) / self.n_grid + ph) / om

    # -- event decomposition -------------------------------------------------

    def _locate(self, t: float) -> tuple[int, float]:
        """(period index, within-period time) of the primary tone at t."""
        x = (self.primary.omega * t - self.primary.phase) / (2.0 * np.pi)
        m = int(np.floor(x + 1e-12))
        s = (x - m) * self.grids[0].period
        return m, s

    def _interval(self, branch: int, t_a: float, t_b: float,
                  control_phase: Optional[float] = None) -> np.ndarray:
        """Propagator for one pulse-free interval on the given branch."""
        if t_b <= t_a:
            return np.eye(self.dim, dtype=complex)
        if self.primary is None:
            return self.static[branch].expm(t_b - t_a)
        grid = self.grids[branch]
        m_a, s_a = self._locate(t_a)
        m_b, s_b = self._locate(t_b)
        u = grid.span(s_a, m_b - m_a, s_b)
        if self.control is not None:
            t0 = t_a - s_a
            x = grid.control_integral(s_a, m_b - m_a, s_b, t0,
                                      self.control.omega)
            phase = self.control.phase if control_phase is None else control_phase
            zx = 0.5 * np.exp(-1j * phase) * x
            j = zx + zx.conj().T
            u = u @ _unitarize_correction(j)
        return u

    # -- public API ---------------------------------------------------------

    def trace(self, times: np.ndarray,
              control_phase: Optional[float] = None) -> np.ndarray:
        """L at each requested time (sorted, >= 0).

        control_phase overrides the weak tone's phase; the expensive
        within-period grids are phase independent, so one propagator can
        serve a whole phase scan.
        """
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) < 0):
            raise ValueError("times must be sorted")
        pulses = self.seq.absolute_times()
        if self._snap:
            pulses = self._snap_times(pulses)
        events = []  # (time, kind) kind: 0 pulse, 1 sample
        for t in pulses:
            events.append((t, 0))
        for t in times:
            events.append((t, 1))
        events.sort(key=lambda e: (e[0], e[1]))
        u0 = np.eye(self.dim, dtype=complex)
        u1 = np.eye(self.dim, dtype=complex)
        out = np.empty(len(times))
        n_out = 0
        parity = 0
        t_prev = 0.0
        for t_ev, kind in events:
            if t_ev > times[-1]:
                break
            if t_ev > t_prev + 1e-300:
                p_a = self._interval(parity, t_prev, t_ev, control_phase)
                p_b = self._interval(1 - parity, t_prev, t_ev, control_phase)
                u0 = p_a @ u0
                u1 = p_b @ u1
                t_prev = t_ev
            if kind == 0:
                parity ^= 1
            else:
                val = np.vdot(u0, u1).real / self.dim
                out[n_out] = val
                n_out += 1
        while n_out < len(times):  # samples at t beyond the last event
            out[n_out] = np.vdot(u0, u1).real / self.dim
            n_out += 1
        return out

    def coherence(self, t: float,
                  control_phase: Optional[float] = None) -> float:
        if self.primary is None:
            return self._coherence_no_tone(t)
        return float(self.trace(np.array([t]), control_phase)[0])

    def control_phase_scan(self, t: float, phases: np.ndarray) -> np.ndarray:
        """L(t) for every control phase at once.

        The span propagators and control integrals are phase independent,
        so they are computed once per interval and the (cheap) phase
        recombination is batched over the scan.
        """
        if self.control is None:
            raise IntegratorFailure("no weak control tone to scan")
        phases = np.asarray(phases, dtype=float)
        n_b = phases.size
        z = 0.5 * np.exp(-1j * phases)[:, None, None]
        pulses = self.seq.absolute_times()
        if self._snap:
            pulses = self._snap_times(pulses)
        bounds = np.concatenate([pulses[pulses < t], [t]])
        eye = np.eye(self.dim, dtype=complex)
        u0 = np.broadcast_to(eye, (n_b, self.dim, self.dim)).copy()
        u1 = u0.copy()
        parity = 0
        t_prev = 0.0
        for t_ev in bounds:
            if t_ev > t_prev:
                m_a, s_a = self._locate(t_prev)
                m_b, s_b = self._locate(t_ev)
                t0 = t_prev - s_a
                for branch, u in ((parity, 0), (1 - parity, 1)):
                    grid = self.grids[branch]
                    span = grid.span(s_a, m_b - m_a, s_b)
                    x = grid.control_integral(s_a, m_b - m_a, s_b, t0,
                                              self.control.omega)
                    zx = z * x
                    j = zx + np.swapaxes(zx.conj(), 1, 2)
                    j2 = j @ j
                    corr = eye - 1j * j - 0.5 * j2 + (1j / 6.0) * (j2 @ j)
                    step = span @ corr
                    if u == 0:
                        u0 = step @ u0
                    else:
                        u1 = step @ u1
                t_prev = t_ev
            parity ^= 1
        prod = np.swapaxes(u0.conj(), 1, 2) @ u1
        return np.einsum("bii->b", prod).real / self.dim

    def _coherence_no_tone(self, t: float) -> float:
        """Fast path: whole periods by matrix power."""
        seq = self.seq
        n_per = int(np.floor(t / seq.period + 1e-9)) if seq.period > 0 else 0
        n_per = min(n_per, seq.repetitions)
        u0 = np.eye(self.dim, dtype=complex)
        u1 = np.eye(self.dim, dtype=complex)
        if n_per > 0 and seq.pulses_per_period % 2 == 0:
            t0, t1 = self._period_propagators()
            u0 = np.linalg.matrix_power(t0, n_per)
            u1 = np.linalg.matrix_power(t1, n_per)
            t_done = n_per * seq.period
        else:
            t_done = 0.0
        if t > t_done + 1e-15 * max(t, 1.0):
            parity = 0
            pulses = seq.absolute_times()
            inside = pulses[(pulses >= t_done) & (pulses < t)]
            parity = int(np.searchsorted(pulses, t_done, side="left")) % 2
            t_prev = t_done
            for tp in inside:
                p_a = self._interval(parity, t_prev, tp)
                u0 = p_a @ u0
                u1 = self._interval(1 - parity, t_prev, tp) @ u1
                parity ^= 1
                t_prev = tp
            u0 = self._interval(parity, t_prev, t) @ u0
            u1 = self._interval(1 - parity, t_prev, t) @ u1
        return float(np.vdot(u0, u1).real / self.dim)

    def _period_propagators(self) -> tuple[np.ndarray, np.ndarray]:
        if self._no_tone_period is None:
            seq = self.seq
            bounds = np.concatenate([[0.0], seq.times_in_period, [seq.period]])
            u0 = np.eye(self.dim, dtype=complex)
            u1 = np.eye(self.dim, dtype=complex)
            parity = 0
            for i in range(len(bounds) - 1):
                dt = bounds[i + 1] - bounds[i]
                if dt > 0:
                    u0 = self.static[parity].expm(dt) @ u0
                    u1 = self.static[1 - parity].expm(dt) @ u1
                if i < len(bounds) - 2:
                    parity ^= 1
            self._no_tone_period = (u0, u1)
        return self._no_tone_period


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def simulate_coherence(system: SpinSystem, seq: PulseSequence,
                       fields: Sequence[RfField] = (), t: Optional[float] = None,
                       *, times: Optional[np.ndarray] = None,
                       indices: Optional[Sequence[int]] = None,
                       include_nn: bool = True,
                       max_spins: int = MAX_CLUSTER_SPINS,
                       n_grid: Optional[int] = None):
    """NV coherence L for the given cluster, sequence and RF fields.

    Returns a float for a single `t`, or an array when `times` is given.
    """
    branches = build_branches(system, indices, include_nn, max_spins)
    tones = tones_from_fields(system, fields, indices)
    prop = CoherencePropagator(branches, tones, seq, n_grid)
    if times is not None:
        return prop.trace(np.asarray(times, dtype=float))
    if t is None:
        t = seq.total_time
    return prop.coherence(float(t))


def simulate_with_control(system: SpinSystem, seq: PulseSequence,
                          decoupling: Optional[RfField],
                          control: Optional[RfField], t: float,
                          **kwargs) -> float:
    """Coherence with both the decoupling and the control tone applied."""
    fields = [f for f in (decoupling, control)
              if f is not None and f.amplitude > 0]
    return simulate_coherence(system, seq, fields, t, **kwargs)


def analytic_coherence_ax(a_x_mag: float, f_kdd: float, t) -> np.ndarray:
    """Single addressed spin, no decoupling: L = cos(f |A_x| t / 4)."""
    return np.cos(0.25 * f_kdd * a_x_mag * np.asarray(t, dtype=float))


def analytic_coherence_apm(a_pm_mag: float, f_kdd: float, t) -> np.ndarray:
    """Single addressed spin at a shifted resonance: L = cos(f |a| t / 8)."""
    return np.cos(0.125 * f_kdd * a_pm_mag * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class EffectiveCoupling:
    spin: int
    vector: np.ndarray
    prefactor: float
    resonance: str


def effective_hamiltonian(system: SpinSystem, seq: PulseSequence, k_dd: int,
                          resonance: str = "bare",
                          decoupling: Optional[RfField] = None,
                          delta: float = 0.0, branch: int = -1,
                          window_factor: float = 10.0) -> EffectiveCoupling:
    """Identify the addressed spin and its effective sigma_z-conditioned
    coupling vector for the current sequence.

    resonance: 'bare'  -> k w_DD = omega_n, vector A_n^x, prefactor m_s f/4
               'shifted' -> k w_DD = w_rfd +- nu_n, vector a^(+-), m_s f/8
               'nu'    -> k w_DD = nu_n, vector A^z - (A^z.nu)nu, m_s f/4
    """
    f_k = fourier_coeff(seq, k_dd)
    target = k_dd * seq.omega_dd
    best = None
    for j in range(len(system.nuclei)):
        larmor = system.larmor(j)
        a_vec = system.hyperfine(j)
        if resonance == "bare":
            freq = larmor.magnitude
            a_x, _, _ = hyperfine_components(a_vec, larmor.direction)
            vector = a_x
            prefactor = system.m_s * f_k / 4.0
        elif resonance in ("shifted", "nu"):
            if decoupling is None:
                raise ValueError("decoupled resonance requires the field")
            geo = drive_geometry(decoupling, larmor, delta,
                                 system.nuclei[j].species,
                                 rwa_fail=0.0, rwa_warn=0.0)
            if resonance == "shifted":
                freq = decoupling.omega + branch * geo.nu
                vector = a_pm(a_vec, geo, branch)
                prefactor = system.m_s * f_k / 8.0
            else:
                freq = geo.nu
                _, _, a_z = hyperfine_components(a_vec, larmor.direction)
                nu_hat = geo.nu_hat
                vector = a_z - np.dot(a_z, nu_hat) * nu_hat
                prefactor = system.m_s * f_k / 4.0
        else:
            raise ValueError(f"unknown resonance kind {resonance!r}")
        width = window_factor * (abs(f_k) * np.linalg.norm(vector) / 4.0
                                 + seq.omega_dd / max(seq.repetitions, 1) / k_dd)
        miss = abs(freq - target)
        if miss <= width and (best is None or miss < best[0]):
            best = (miss, EffectiveCoupling(j, vector, prefactor, resonance))
    if best is None:
        raise NoResonantSpin(
            f"no nucleus within the addressing window of {target:.6g} rad/s")
    return best[1]


# ---------------------------------------------------------------------------
# batched no-RF evaluation (cluster-expansion back end)
# ---------------------------------------------------------------------------

def batched_no_rf_coherence(h0s: np.ndarray, h1s: np.ndarray,
                            seq: PulseSequence, t: float) -> np.ndarray:
    """L(t) for a stack of equally sized clusters without RF tones.

    h0s/h1s: (B, d, d) Hermitian stacks.  Whole DD periods go through a
    batched matrix power; the remainder is composed segment by segment.
    """
    b, dim, _ = h0s.shape
    ev0, vec0 = np.linalg.eigh(h0s)
    ev1, vec1 = np.linalg.eigh(h1s)

    def expm_batch(which: int, dt: float) -> np.ndarray:
        ev, vec = (ev0, vec0) if which == 0 else (ev1, vec1)
        return (vec * np.exp(-1j * ev * dt)[:, None, :]) @ np.swapaxes(
            vec.conj(), 1, 2)

    def power_batch(u: np.ndarray, n: int) -> np.ndarray:
        out = np.broadcast_to(np.eye(dim, dtype=complex), u.shape).copy()
        base = u
        while n:
            if n & 1:
                out = base @ out
            base = base @ base
            n >>= 1
        return out

    n_per = min(int(np.floor(t / seq.period + 1e-9)), seq.repetitions)
    bounds = np.concatenate([[0.0], seq.times_in_period, [seq.period]])
    u0 = np.broadcast_to(np.eye(dim, dtype=complex), h0s.shape).copy()
    u1 = u0.copy()
    if n_per > 0 and seq.pulses_per_period % 2 == 0:
        p0 = np.broadcast_to(np.eye(dim, dtype=complex), h0s.shape).copy()
        p1 = p0.copy()
        parity = 0
        cache: dict[tuple[int, float], np.ndarray] = {}
        for i in range(len(bounds) - 1):
            dt = bounds[i + 1] - bounds[i]
            if dt > 0:
                for which, tgt in ((parity, 0), (1 - parity, 1)):
                    key = (which, dt)
                    if key not in cache:
                        cache[key] = expm_batch(which, dt)
                    if tgt == 0:
                        p0 = cache[key] @ p0
                    else:
                        p1 = cache[key] @ p1
            if i < len(bounds) - 2:
                parity ^= 1
        u0 = power_batch(p0, n_per)
        u1 = power_batch(p1, n_per)
    t_done = n_per * seq.period
    if t > t_done + 1e-15 * max(t, 1.0):
        pulses = seq.absolute_times()
        inside = pulses[(pulses >= t_done) & (pulses < t)]
        parity = int(np.searchsorted(pulses, t_done, side="left")) % 2
        t_prev = t_done
        for tp in np.concatenate([inside, [t]]):
            dt = tp - t_prev
            if dt > 0:
                u0 = expm_batch(parity, dt) @ u0
                u1 = expm_batch(1 - parity, dt) @ u1
            parity ^= 1
            t_prev = tp
    prod = np.swapaxes(u0.conj(), 1, 2) @ u1
    return np.einsum("bii->b", prod).real / dim
