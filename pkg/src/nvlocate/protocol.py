"""The measurement protocol: scans, dip fitting, hyperfine extraction,
direction finding by control-phase scans, and inversion to 3D positions.

Everything downstream of `run_scan` treats simulated traces as opaque
measurement data: the fitters never look at the ground-truth sample.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .constants import TWO_PI, gamma_of
from .cluster_expansion import (DEFAULT_EDGE_THRESHOLD, dce_coherence,
                                partition_disjoint)
from .dynamics import (CoherencePropagator, CoherenceTrace, build_branches,
                       simulate_coherence, tones_from_fields)
from .errors import (FitDiverged, FlatResponse, Indistinguishable, NoRoot,
                     NoSolution)
from .pulse_seq import make_axy
from .rf_control import (RfField, SQRT3, a_pm_magnitude_factor,
                         decoupling_setup, effective_axis)
from .sample_gen import CUBIC_TO_NV, LatticeRegion, _BASIS, _FCC
from .spin_model import (NuclearSpin, SpinSystem, ZHAT, dipole_prefactor,
                         effective_larmor, unit)

MAX_EXACT_SPINS = 8


@dataclass(frozen=True)
class ProtocolConfig:
    """Fixed control parameters shared by every scan of a reconstruction."""

    k_dd: int
    f_coeff: float
    repetitions: int
    delta: float = 0.0                 # rad/s; 0 disables RF decoupling
    n_rf: tuple = (1.0, 0.0, 0.0)
    branch: int = -1
    control_drive: float = TWO_PI * 1e3   # gamma*V_rfc, rad/s
    scan_points: int = 200
    f_scan_max: float = 0.12
    f_scan_points: int = 16
    phase_points: int = 12
    phase_refine_points: int = 7
    dip_prominence: float = 0.05
    single_spin_residual: float = 0.05
    dce_threshold: float = DEFAULT_EDGE_THRESHOLD
    max_group: int = 6
    n_grid: Optional[int] = None
    workers: int = 1
    sign_prior: Optional[str] = None   # 'z_positive' | 'z_negative' | None
    lattice_region: Optional[LatticeRegion] = None
    n_rf_known: bool = True

    @property
    def n_rf_vec(self) -> np.ndarray:
        return unit(np.asarray(self.n_rf, dtype=float))


@dataclass(frozen=True)
class ScanSpec:
    """One parameter sweep: what is scanned and at which anchor point."""

    kind: str                       # frequency | f_coefficient | phase | time
    values: np.ndarray
    m_s: int
    config: ProtocolConfig
    anchor: Optional[float] = None  # omega_scan of the addressed dip

    def __post_init__(self):
        if self.kind not in ("frequency", "f_coefficient", "phase", "time"):
            raise ValueError(f"unknown scan kind {self.kind!r}")
        object.__setattr__(self, "values",
                           np.asarray(self.values, dtype=float))
        if self.values.size == 0:
            raise ValueError("empty scan range")
        if self.kind != "frequency" and self.anchor is None:
            raise ValueError(f"{self.kind} scan needs an anchor frequency")


@dataclass
class DipRecord:
    center: float          # rad/s
    depth: float
    width: float           # rad/s
    single_spin: Optional[bool] = None


def _sim_point(system: SpinSystem, seq, fields, t, config: ProtocolConfig,
               control_phases: Optional[np.ndarray] = None):
    """Full-cluster or disjoint-cluster simulation of one scan point."""
    if len(system.nuclei) <= MAX_EXACT_SPINS:
        if control_phases is not None:
            branches = build_branches(system)
            tones = tones_from_fields(system, fields)
            prop = CoherencePropagator(branches, tones, seq, config.n_grid)
            return prop.control_phase_scan(t, control_phases)
        return simulate_coherence(system, seq, fields, t,
                                  n_grid=config.n_grid)
    partition = partition_disjoint(system, config.dce_threshold,
                                   config.max_group)
    if control_phases is not None:
        out = np.ones(len(control_phases))
        for g in partition.groups:
            sub = system.subsystem(g)
            branches = build_branches(sub)
            tones = tones_from_fields(sub, fields)
            prop = CoherencePropagator(branches, tones, seq, config.n_grid)
            out = out * prop.control_phase_scan(t, control_phases)
        return out
    return dce_coherence(system, partition, seq, fields, t, config.n_grid)


def _scan_point_payload(args):
    system, seq, fields, t, config = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return _sim_point(system, seq, fields, t, config)


def _point_setup(config: ProtocolConfig, species: str, omega_scan: float,
                 f_coeff: float):
    """Sequence and fields for one addressed frequency."""
    if config.delta > 0:
        fld, dd_target = decoupling_setup(omega_scan, config.delta, species,
                                          config.n_rf_vec, config.branch)
        fields = (fld,)
    else:
        fld = None
        dd_target = omega_scan
        fields = ()
    tau = TWO_PI * config.k_dd / dd_target
    seq = make_axy(tau, f_coeff, config.k_dd, config.repetitions)
    return seq, fields, fld


def _control_field(config: ProtocolConfig, species: str,
                   fld: Optional[RfField], omega_scan: float,
                   phase: float) -> RfField:
    gamma = gamma_of(species)
    if fld is None:
        omega_c = omega_scan
    else:
        omega_c = fld.omega + config.branch * SQRT3 * config.delta
    return RfField(config.control_drive / gamma, omega_c, phase,
                   config.n_rf_vec, role="control")


def run_scan(system: SpinSystem, spec: ScanSpec) -> CoherenceTrace:
    """Simulate one sweep and return the sampled coherence."""
    config = spec.config
    system = system.with_m_s(spec.m_s)
    species = system.nuclei[0].species if system.nuclei else "13C"
    meta = {
        "kind": spec.kind, "m_s": spec.m_s, "k_dd": config.k_dd,
        "f_coeff": config.f_coeff, "repetitions": config.repetitions,
        "delta_rad_s": config.delta, "branch": config.branch,
        "b_z_tesla": system.b_z, "n_spins": len(system.nuclei),
    }
    if len(system.nuclei) == 0:
        return CoherenceTrace(spec.kind, spec.values,
                              np.ones_like(spec.values), meta)

    if spec.kind == "frequency":
        jobs = []
        for w in spec.values:
            seq, fields, _ = _point_setup(config, species, w, config.f_coeff)
            jobs.append((system, seq, fields, seq.total_time, config))
        coh = _run_jobs(jobs, config.workers)
        return CoherenceTrace("omega_scan_rad_s", spec.values, coh, meta)

    if spec.kind == "f_coefficient":
        jobs = []
        for f in spec.values:
            seq, fields, _ = _point_setup(config, species, spec.anchor, f)
            jobs.append((system, seq, fields, seq.total_time, config))
        coh = _run_jobs(jobs, config.workers)
        meta["anchor_rad_s"] = spec.anchor
        return CoherenceTrace("f_coeff", spec.values, coh, meta)

    if spec.kind == "phase":
        seq, fields, fld = _point_setup(config, species, spec.anchor,
                                        config.f_coeff)
        meta["anchor_rad_s"] = spec.anchor
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if fld is not None:
                ctrl = _control_field(config, species, fld, spec.anchor, 0.0)
                coh = _sim_point(system, seq, fields + (ctrl,),
                                 seq.total_time, config,
                                 control_phases=spec.values)
            else:
                jobs = []
                for phi in spec.values:
                    ctrl = _control_field(config, species, None, spec.anchor,
                                          phi)
                    jobs.append((system, seq, (ctrl,), seq.total_time,
                                 config))
                coh = _run_jobs(jobs, config.workers)
        return CoherenceTrace("phi_rfc_rad", spec.values, coh, meta)

    # time scan: coherence at integer multiples of the DD period
    seq, fields, _ = _point_setup(config, species, spec.anchor, config.f_coeff)
    n_periods = np.unique(np.clip(np.round(
        spec.values / seq.period).astype(int), 1, config.repetitions))
    times = n_periods * seq.period
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if len(system.nuclei) <= MAX_EXACT_SPINS:
            coh = simulate_coherence(system, seq, fields, times=times,
                                     n_grid=config.n_grid)
        else:
            coh = np.array([_sim_point(system, seq, fields, t, config)
                            for t in times])
    meta["anchor_rad_s"] = spec.anchor
    return CoherenceTrace("time_s", times, coh, meta)


def _run_jobs(jobs, workers: int) -> np.ndarray:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return np.array(list(pool.map(_scan_point_payload, jobs,
                                          chunksize=4)))
    return np.array([_scan_point_payload(j) for j in jobs])


# ---------------------------------------------------------------------------
# dip detection and per-dip fits
# ---------------------------------------------------------------------------

def extract_dips(trace: CoherenceTrace, prominence: float = 0.05,
                 merge_radius: float = 0.0) -> list[DipRecord]:
    """Local coherence minima deeper than the prominence threshold.

    Centers are refined by a parabola through the minimum and its two
    neighbours; widths are half-depth crossings.  Minima closer than
    merge_radius to a deeper minimum are treated as sidelobes of that
    dip and dropped.
    """
    x = trace.values
    l_val = trace.coherence
    dips: list[DipRecord] = []
    for i in range(1, len(x) - 1):
        if not (l_val[i] <= l_val[i - 1] and l_val[i] <= l_val[i + 1]):
            continue
        depth = 1.0 - l_val[i]
        if depth < prominence:
            continue
        if l_val[i] == l_val[i - 1]:  # flat plateau: count once at the edge
            continue
        denom = l_val[i - 1] - 2.0 * l_val[i] + l_val[i + 1]
        center = x[i]
        if denom > 0:
            center = x[i] + 0.5 * (l_val[i - 1] - l_val[i + 1]) / denom * (
                x[i + 1] - x[i])
        half = 1.0 - 0.5 * depth
        lo = hi = x[i]
        for k in range(i, 0, -1):
            if l_val[k] > half:
                lo = x[k]
                break
        for k in range(i, len(x)):
            if l_val[k] > half:
                hi = x[k]
                break
        dips.append(DipRecord(center=float(center), depth=float(depth),
                              width=float(hi - lo)))
    if merge_radius > 0 and len(dips) > 1:
        dips.sort(key=lambda d: -d.depth)
        kept: list[DipRecord] = []
        for d in dips:
            if all(abs(d.center - k.center) >= merge_radius for k in kept):
                kept.append(d)
        dips = sorted(kept, key=lambda d: d.center)
    return dips


@dataclass
class FScanFit:
    single_spin: bool
    couplings: list          # |A_x| (bare) or |a| (decoupled), rad/s
    residual: float
    slopes: list             # fitted c in L = cos(c f), rad per unit f


def fit_f_scan(trace: CoherenceTrace, total_time: float, decoupled: bool,
               residual_threshold: float = 0.05) -> FScanFit:
    """Fit the f-sweep at one dip to cos(c f) (or a two-spin product).

    The coupling follows from the slope: |A_x| = 4 c / t without
    decoupling, |a| = 8 c / t with it.
    """
    f = trace.values
    l_val = trace.coherence

    factor = 8.0 if decoupled else 4.0
    c_grid = np.linspace(0.05, 1.2 * np.pi / max(f.max(), 1e-12), 600)
    cost1 = np.array([np.sum((np.cos(c * f) - l_val) ** 2) for c in c_grid])
    c0 = c_grid[int(np.argmin(cost1))]
    res1 = optimize.least_squares(lambda p: np.cos(p[0] * f) - l_val, [c0],
                                  bounds=([0.0], [np.inf]))
    if not res1.success:
        raise FitDiverged("single-spin f-scan fit failed")
    rms1 = float(np.sqrt(np.mean(res1.fun ** 2)))
    if rms1 < residual_threshold:
        c = float(res1.x[0])
        return FScanFit(True, [factor * c / total_time], rms1, [c])

    best = None
    for ca in c_grid[::10]:
        for cb in c_grid[::10]:
            if cb < ca:
                continue
            cost = float(np.sum((np.cos(ca * f) * np.cos(cb * f) - l_val) ** 2))
            if best is None or cost < best[0]:
                best = (cost, ca, cb)
    res2 = optimize.least_squares(
        lambda p: np.cos(p[0] * f) * np.cos(p[1] * f) - l_val,
        [best[1], best[2]], bounds=([0.0, 0.0], [np.inf, np.inf]))
    rms2 = float(np.sqrt(np.mean(res2.fun ** 2)))
    cs = sorted(float(v) for v in res2.x)
    return FScanFit(False, [factor * c / total_time for c in cs], rms2, cs)


def confirm_single_spin(system: SpinSystem, dip: DipRecord,
                        config: ProtocolConfig, m_s: int,
                        f_values: Optional[np.ndarray] = None):
    """Sweep f at the dip and classify single- vs multi-spin response."""
    if f_values is None:
        f_values = np.linspace(config.f_scan_max / config.f_scan_points,
                               config.f_scan_max, config.f_scan_points)
    f_values = np.asarray(f_values, dtype=float)
    if f_values.size < 2:
        raise ValueError("f sweep needs at least two points")
    spec = ScanSpec("f_coefficient", f_values, m_s, config, anchor=dip.center)
    trace = run_scan(system, spec)
    species = system.nuclei[0].species
    seq, _, _ = _point_setup(config, species, dip.center, config.f_coeff)
    fit = fit_f_scan(trace, seq.total_time, config.delta > 0,
                     config.single_spin_residual)
    dip.single_spin = fit.single_spin
    return fit, trace


def fit_parallel_perp(omega_minus: float, omega_plus: float, species: str,
                      b_z: float) -> tuple[float, float, float]:
    """Solve the two-manifold Larmor pair for (A_par, A_perp).

    omega(m_s)^2 = (gamma B - m_s A_par / 2)^2 + A_perp^2 / 4, so
    A_par = (w(-1)^2 - w(+1)^2) / (2 gamma B) exactly.  Returns
    (A_par, A_perp, condition number of the solve).
    """
    gb = gamma_of(species) * b_z
    if gb <= 0:
        raise NoSolution("need a finite Zeeman splitting")
    def solve(wm, wp):
        par = (wm ** 2 - wp ** 2) / (2.0 * gb)
        perp_sq = 4.0 * (wp ** 2 - (gb - par / 2.0) ** 2)
        return par, perp_sq

    a_par, perp_sq = solve(omega_minus, omega_plus)
    scale = max(omega_plus, omega_minus) ** 2
    if perp_sq < -1e-6 * scale:
        raise NoSolution("inconsistent dip pair: negative A_perp^2")
    a_perp = float(np.sqrt(max(perp_sq, 0.0)))
    # sensitivity of the solution to the measured centers (finite diff)
    eps = 1e-9 * max(omega_minus, omega_plus)
    jac = np.zeros((2, 2))
    for col, (dm, dp) in enumerate(((eps, 0.0), (0.0, eps))):
        par2, perp_sq2 = solve(omega_minus + dm, omega_plus + dp)
        jac[0, col] = (par2 - a_par) / eps
        perp2 = np.sqrt(max(perp_sq2, 0.0))
        jac[1, col] = (perp2 - a_perp) / eps
    sv = np.linalg.svd(jac, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    return float(a_par), a_perp, cond


def perp_from_transverse(a_par: float, a_x_mag: float, m_s: int, species: str,
                         b_z: float) -> float:
    """A_perp from the measured |A_x| at fixed A_par (exact relation)."""

    def ax_of(a_perp):
        theta = np.array([1.0, 0.0, 0.0])
        a_vec = a_par * ZHAT + a_perp * theta
        lar = effective_larmor(a_vec, b_z, m_s, species)
        w = lar.direction
        ax = a_vec - np.dot(a_vec, w) * w
        return np.linalg.norm(ax)

    lo, hi = 0.0, max(4.0 * a_x_mag, abs(a_par), 1.0)
    for _ in range(8):
        if ax_of(hi) >= a_x_mag:
            break
        hi *= 10.0
    else:
        raise NoRoot("measured |A_x| unreachable for any A_perp")
    sol = optimize.brentq(lambda p: ax_of(p) - a_x_mag, lo, hi, xtol=1e-10,
                          rtol=8.9e-16)
    return float(sol)


# ---------------------------------------------------------------------------
# direction finding
# ---------------------------------------------------------------------------

def _transverse_map(sign: Optional[int], nu_hat: Optional[np.ndarray],
                    omega_hat: np.ndarray):
    """X -> X - (X.nu)nu + sign nu x (w x X); identity without decoupling."""
    if sign is None:
        return lambda x_vec: x_vec

    def apply(x_vec):
        y_vec = np.cross(omega_hat, x_vec)
        return (x_vec - np.dot(x_vec, nu_hat) * nu_hat
                + sign * np.cross(nu_hat, y_vec))

    return apply


def _two_level_coherence(p_vec: np.ndarray, q_vec: np.ndarray,
                         t: float) -> float:
    """L for branch fields q-p / q+p on one spin-1/2 (closed form)."""
    v0 = q_vec - p_vec
    v1 = q_vec + p_vec
    n0 = np.linalg.norm(v0)
    n1 = np.linalg.norm(v1)
    c0, c1 = np.cos(n0 * t / 2), np.cos(n1 * t / 2)
    s0, s1 = np.sin(n0 * t / 2), np.sin(n1 * t / 2)
    dot = (np.dot(v0, v1) / (n0 * n1)) if n0 > 0 and n1 > 0 else 1.0
    return float(c0 * c1 + s0 * s1 * dot)


class PhaseScanModel:
    """Predicted phase response of one addressed spin at its resonance.

    Frame quantities are evaluated at exact resonance (delta_n = 0) in
    the strong-field limit; the fit scales an overall amplitude to absorb
    the other spins' flat background.
    """

    def __init__(self, config: ProtocolConfig, species: str, m_s: int,
                 coupling_mag: float, total_time: float):
        self.m_s = m_s
        self.t = total_time
        self.n_rf = config.n_rf_vec
        self.omega_hat = ZHAT
        if config.delta > 0:
            rabi = np.sqrt(2.0) * config.delta
            nu_vec = (rabi * unit(effective_axis(self.n_rf, self.omega_hat, 0.0))
                      + config.delta * self.omega_hat)
            self.tmap = _transverse_map(config.branch, unit(nu_vec),
                                        self.omega_hat)
            self.coupling_pref = config.f_coeff / 8.0
            self.control_pref = config.control_drive / 4.0
        else:
            self.tmap = _transverse_map(None, None, self.omega_hat)
            self.coupling_pref = config.f_coeff / 4.0
            self.control_pref = config.control_drive / 2.0
        self.coupling_mag = coupling_mag

    def response(self, phases: np.ndarray, phi_star: float) -> np.ndarray:
        a_vec = self.coupling_mag * unit(
            self.tmap(effective_axis(self.n_rf, self.omega_hat, phi_star)))
        p_vec = self.coupling_pref * a_vec * self.m_s
        out = np.empty(len(phases))
        for i, phi in enumerate(phases):
            b_vec = self.tmap(effective_axis(self.n_rf, self.omega_hat, phi))
            q_vec = self.control_pref * b_vec
            out[i] = _two_level_coherence(p_vec, q_vec, self.t)
        return out


@dataclass
class PhaseScanResult:
    phi_star: float
    response: CoherenceTrace
    fit_residual: float


def fit_phase_scan(trace: CoherenceTrace, model: PhaseScanModel,
                   flat_floor: float = 1e-4) -> PhaseScanResult:
    """Locate phi* (deepest dip restoration) from a phase sweep."""
    phases = trace.values
    l_val = trace.coherence
    if l_val.max() - l_val.min() < flat_floor:
        raise FlatResponse("phase response variation below the noise floor")

    def resid(params):
        phi_star, amp = params
        return amp * model.response(phases, phi_star) - l_val

    grid = np.linspace(0, np.pi, 48, endpoint=False)
    costs = [float(np.sum(resid((g, 1.0)) ** 2)) for g in grid]
    phi0 = grid[int(np.argmin(costs))]
    sol = optimize.least_squares(resid, [phi0, 1.0],
                                 bounds=([phi0 - np.pi, 0.5],
                                         [phi0 + np.pi, 1.5]))
    if not sol.success:
        raise FitDiverged("phase-scan model fit failed")
    phi_star = float(np.mod(sol.x[0], np.pi))
    rms = float(np.sqrt(np.mean(sol.fun ** 2)))
    return PhaseScanResult(phi_star, trace, rms)


def phase_scan_direction(system: SpinSystem, dip: DipRecord,
                         config: ProtocolConfig, m_s: int,
                         coupling_mag: float) -> PhaseScanResult:
    """Run the control-phase sweep at a dip and extract phi*."""
    phases = np.linspace(0.0, np.pi, config.phase_points, endpoint=False)
    spec = ScanSpec("phase", phases, m_s, config, anchor=dip.center)
    trace = run_scan(system, spec)
    species = system.nuclei[0].species
    seq, _, _ = _point_setup(config, species, dip.center, config.f_coeff)
    model = PhaseScanModel(config, species, m_s, coupling_mag, seq.total_time)
    first = fit_phase_scan(trace, model)
    if config.phase_refine_points > 1:
        span = np.pi / config.phase_points
        fine = np.sort(np.mod(np.linspace(first.phi_star - span,
                                          first.phi_star + span,
                                          config.phase_refine_points), np.pi))
        spec2 = ScanSpec("phase", fine, m_s, config, anchor=dip.center)
        trace2 = run_scan(system, spec2)
        merged = np.concatenate([trace.values, trace2.values])
        order = np.argsort(merged)
        both = CoherenceTrace(trace.param, merged[order],
                              np.concatenate([trace.coherence,
                                              trace2.coherence])[order],
                              trace.metadata)
        return fit_phase_scan(both, model)
    return first


def predict_phi_star(a_par: float, a_perp: float, theta_hat: np.ndarray,
                     m_s: int, species: str, b_z: float,
                     n_rf: np.ndarray) -> float:
    """phi at which n(phi) is parallel to A_x for a candidate hyperfine."""
    a_vec = a_par * ZHAT + a_perp * np.asarray(theta_hat, dtype=float)
    lar = effective_larmor(a_vec, b_z, m_s, species)
    w = lar.direction
    a_x = a_vec - np.dot(a_vec, w) * w
    n_x = n_rf - np.dot(n_rf, w) * w
    n_y = np.cross(w, n_rf)
    phi = np.arctan2(np.dot(a_x, n_y) / max(np.linalg.norm(n_y), 1e-30),
                     np.dot(a_x, n_x) / max(np.linalg.norm(n_x), 1e-30))
    return float(np.mod(phi, np.pi))


def directions_from_phi(phi_star: float, a_par: float, a_perp: float,
                        m_s: int, species: str, b_z: float,
                        n_rf: np.ndarray) -> list[np.ndarray]:
    """Both transverse hyperfine directions consistent with one phi*.

    Matches the predicted parallel-condition phase against the
    measurement on a dense azimuth grid with bracketed refinement.
    """

    def mismatch(alpha):
        theta = np.array([np.cos(alpha), np.sin(alpha), 0.0])
        pred = predict_phi_star(a_par, a_perp, theta, m_s, species, b_z, n_rf)
        return np.mod(pred - phi_star + np.pi / 2, np.pi) - np.pi / 2

    alphas = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    vals = np.array([mismatch(a) for a in alphas])
    roots = []
    for i in range(len(alphas)):
        j = (i + 1) % len(alphas)
        if np.sign(vals[i]) == np.sign(vals[j]):
            continue
        if abs(vals[i] - vals[j]) > np.pi / 2:   # wrap of the mod branch
            continue
        a_lo = alphas[i]
        a_hi = alphas[j] if j > i else alphas[i] + alphas[1]
        try:
            r = optimize.brentq(mismatch, a_lo, a_hi, xtol=1e-12)
        except ValueError:
            continue
        roots.append(float(np.mod(r, 2 * np.pi)))
    uniq: list[float] = []
    for r in sorted(roots):
        if not any(min(abs(r - u), 2 * np.pi - abs(r - u)) < 1e-6
                   for u in uniq):
            uniq.append(r)
    candidates = [np.array([np.cos(r), np.sin(r), 0.0]) for r in uniq[:2]]
    if len(candidates) == 1:
        candidates.append(-candidates[0])
    if not candidates:
        raise NoRoot("no transverse direction matches the measured phi*")
    return candidates


def disambiguate_sign(candidates: Sequence[np.ndarray],
                      phi_star_second: float, a_par: float, a_perp: float,
                      m_s_second: int, species: str, b_z: float,
                      n_rf: np.ndarray,
                      resolution: float) -> tuple[int, float]:
    """Pick the candidate whose predicted phi* matches the second scan.

    Returns (index, margin); raises Indistinguishable when the two
    predictions differ by less than twice the scan resolution.
    """
    dists = []
    for theta in candidates:
        pred = predict_phi_star(a_par, a_perp, theta, m_s_second, species,
                                b_z, n_rf)
        d = abs(np.mod(pred - phi_star_second + np.pi / 2, np.pi) - np.pi / 2)
        dists.append(d)
    if len(dists) < 2:
        return 0, np.inf
    margin = abs(dists[0] - dists[1])
    if margin < 2.0 * resolution:
        raise Indistinguishable(
            f"sign candidates differ by {margin:.4f} rad < "
            f"2 x resolution {resolution:.4f} rad")
    return int(np.argmin(dists)), float(margin)


# ---------------------------------------------------------------------------
# position inversion
# ---------------------------------------------------------------------------

@dataclass
class PositionCandidates:
    plus: np.ndarray
    minus: np.ndarray
    polar_cos: float
    radius: float
    degenerate_azimuth: bool = False


def invert_position(a_par: float, a_perp: float, theta_hat: np.ndarray,
                    species: str) -> PositionCandidates:
    """Invert the point-dipole map: (A_par, A_perp, direction) -> +-r.

    With u = |cos(polar angle)|, A_par/A_perp = (1-3u^2)/(3u sqrt(1-u^2))
    is monotone on (0, 1), so the ratio fixes u uniquely; the radius then
    follows from whichever hyperfine component is better conditioned.
    """
    if a_par == 0.0 and a_perp == 0.0:
        raise NoRoot("zero hyperfine vector cannot be inverted")
    if a_perp < 0:
        raise ValueError("A_perp is a magnitude")
    pref = dipole_prefactor(species, 1.0)  # k at r = 1 m

    degenerate = False
    if a_perp == 0.0:
        if a_par < 0:
            u = 1.0
        else:
            u = 0.0
            degenerate = True
    elif a_par == 0.0:
        u = 1.0 / np.sqrt(3.0)
    else:
        ratio = a_par / a_perp

        def h(u_val):
            return ((1.0 - 3.0 * u_val ** 2)
                    / (3.0 * u_val * np.sqrt(1.0 - u_val ** 2)))

        eps = 1e-15
        u = optimize.brentq(lambda v: h(v) - ratio, eps, 1.0 - eps,
                            xtol=1e-16, rtol=8.9e-16, maxiter=200)

    par_coeff = abs(1.0 - 3.0 * u ** 2)
    perp_coeff = 3.0 * u * np.sqrt(max(0.0, 1.0 - u ** 2))
    if par_coeff >= perp_coeff:
        k = abs(a_par) / par_coeff
    else:
        k = a_perp / perp_coeff
    if k <= 0:
        raise NoRoot("vanishing coupling magnitude")
    radius = (pref / k) ** (1.0 / 3.0)

    theta_hat = np.asarray(theta_hat, dtype=float)
    tnorm = np.linalg.norm(theta_hat)
    if tnorm == 0:
        if not degenerate and perp_coeff > 1e-12:
            raise ValueError("need a transverse direction when A_perp > 0")
        theta_hat = np.array([1.0, 0.0, 0.0])
    else:
        theta_hat = theta_hat / tnorm
    rho_hat = -theta_hat  # transverse hyperfine points opposite the foot
    sin_u = np.sqrt(max(0.0, 1.0 - u ** 2))
    r_plus = radius * (sin_u * rho_hat + u * ZHAT)
    return PositionCandidates(plus=r_plus, minus=-r_plus, polar_cos=u,
                              radius=radius, degenerate_azimuth=degenerate)


def snap_to_lattice(position: np.ndarray,
                    region: Optional[LatticeRegion] = None):
    """Nearest diamond site (NV frame), the residual and a success flag.

    Success means the residual is below half the nearest-neighbour
    distance, which pins a unique site.
    """
    if region is None:
        region = LatticeRegion(1e-10, 1e-8)
    a = region.lattice_constant
    cubic = CUBIC_TO_NV.T @ np.asarray(position, dtype=float)
    frac = cubic / a
    base = np.floor(frac)
    best = None
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                cell = base + np.array([di, dj, dk])
                for f in _FCC:
                    for bb in _BASIS:
                        site = (cell + f + bb) * a
                        d = float(np.linalg.norm(site - cubic))
                        if best is None or d < best[0]:
                            best = (d, site)
    residual, site = best
    a_nn = a * np.sqrt(3.0) / 4.0
    return CUBIC_TO_NV @ site, residual, bool(residual < 0.5 * a_nn)


# ---------------------------------------------------------------------------
# end-to-end reconstruction
# ---------------------------------------------------------------------------

@dataclass
class SpinReport:
    label: str
    a_par: float = np.nan
    a_perp: float = np.nan
    direction: Optional[np.ndarray] = None
    position: Optional[np.ndarray] = None
    position_mirror: Optional[np.ndarray] = None
    sign_status: str = "unresolved"
    replay_residual: float = np.nan
    status: str = "ok"
    diagnostics: dict = field(default_factory=dict)


@dataclass
class ReconstructionResult:
    spins: list
    traces: dict
    config: ProtocolConfig

    def report_csv(self) -> str:
        lines = ["label,Apar_kHz,Aperp_kHz,dirx,diry,dirz,x_nm,y_nm,z_nm,"
                 "sign_status,replay_residual"]
        for s in self.spins:
            d = s.direction if s.direction is not None else np.full(3, np.nan)
            p = s.position if s.position is not None else np.full(3, np.nan)
            lines.append(
                f"{s.label},{s.a_par / TWO_PI / 1e3:.6g},"
                f"{s.a_perp / TWO_PI / 1e3:.6g},"
                f"{d[0]:.6g},{d[1]:.6g},{d[2]:.6g},"
                f"{p[0] * 1e9:.6g},{p[1] * 1e9:.6g},{p[2] * 1e9:.6g},"
                f"{s.sign_status},{s.replay_residual:.4g}")
        return "\n".join(lines) + "\n"


def _pair_dips(dips_minus: list, dips_plus: list,
               gb: Optional[float] = None) -> list[tuple]:
    """Match dips across the two manifolds (A_par order is reversed).

    With equal counts the order pairing is exact in the strong-field
    regime; otherwise dips are matched greedily to the mirror position
    2 gamma B - omega.
    """
    dm = sorted(dips_minus, key=lambda d: d.center)
    dp = sorted(dips_plus, key=lambda d: d.center, reverse=True)
    if len(dm) == len(dp) or gb is None:
        return list(zip(dm, dp))
    pairs = []
    used = set()
    for d in dm:
        target = 2.0 * gb - d.center
        best = None
        for i, p in enumerate(dp):
            if i in used:
                continue
            miss = abs(p.center - target)
            if best is None or miss < best[0]:
                best = (miss, i)
        if best is not None and best[0] < 4.0 * max(d.width, 1.0):
            used.add(best[1])
            pairs.append((d, dp[best[1]]))
    return pairs


def reconstruct(system: SpinSystem, config: ProtocolConfig,
                scan_window: tuple[float, float],
                labels: Optional[Sequence[str]] = None) -> ReconstructionResult:
    """Full pipeline: scans of the simulated sample, fits, inversion.

    scan_window is the omega_scan range (rad/s) of the frequency scans
    for m_s = -1; the m_s = +1 window is its mirror about gamma B.
    """
    species = system.nuclei[0].species if system.nuclei else "13C"
    gb = gamma_of(species) * system.b_z
    traces: dict = {}

    # Fourier-limited sidelobe spacing of a dip: ~2 pi / t_total
    t_est = config.repetitions * TWO_PI * config.k_dd / gb
    merge_radius = 1.8 * TWO_PI / t_est

    dips = {}
    for m_s in (-1, +1):
        if m_s == -1:
            values = np.linspace(scan_window[0], scan_window[1],
                                 config.scan_points)
        else:
            values = np.linspace(2 * gb - scan_window[1],
                                 2 * gb - scan_window[0], config.scan_points)
        spec = ScanSpec("frequency", values, m_s, config)
        tr = run_scan(system, spec)
        traces[f"frequency_ms{m_s:+d}"] = tr
        dips[m_s] = extract_dips(tr, config.dip_prominence, merge_radius)

    reports: list[SpinReport] = []
    if not dips[-1] or not dips[+1]:
        return ReconstructionResult(reports, traces, config)

    pairs = _pair_dips(dips[-1], dips[+1], gb)
    phase_resolution = np.pi / config.phase_points / max(
        1, config.phase_refine_points - 1)

    spin_counter = 0
    for pair_idx, (dip_m, dip_p) in enumerate(pairs):
        a_par, _, cond = fit_parallel_perp(dip_m.center, dip_p.center,
                                           species, system.b_z)
        fit_m, ftrace = confirm_single_spin(system, dip_m, config, -1)
        traces[f"fscan_dip{pair_idx}"] = ftrace
        overlap_phi: dict[int, list] = {}
        for comp, coupling in enumerate(fit_m.couplings):
            label = (labels[spin_counter] if labels
                     and spin_counter < len(labels) else f"S{spin_counter}")
            rep = SpinReport(label=label, a_par=a_par)
            rep.diagnostics.update(
                dip_center_minus=dip_m.center, dip_center_plus=dip_p.center,
                pair_condition=cond, f_fit_residual=fit_m.residual,
                single_spin=fit_m.single_spin)
            try:
                if config.delta > 0:
                    ax_mag = coupling / a_pm_magnitude_factor(config.branch)
                else:
                    ax_mag = coupling
                rep.a_perp = perp_from_transverse(a_par, ax_mag, -1, species,
                                                  system.b_z)
                phase_fits = {}
                for m_s, dip in ((-1, dip_m), (+1, dip_p)):
                    if fit_m.single_spin:
                        res = phase_scan_direction(system, dip, config, m_s,
                                                   coupling)
                        phase_fits[m_s] = res.phi_star
                        traces[f"phase_dip{pair_idx}_ms{m_s:+d}"] = res.response
                    else:
                        if m_s not in overlap_phi:
                            overlap_phi[m_s] = _overlap_phase_scan(
                                system, dip, config, m_s, fit_m, pair_idx,
                                traces)
                        phase_fits[m_s] = overlap_phi[m_s][comp]
                    rep.diagnostics[f"phi_star_ms{m_s:+d}"] = phase_fits[m_s]
                cands = directions_from_phi(phase_fits[-1], a_par, rep.a_perp,
                                            -1, species, system.b_z,
                                            config.n_rf_vec)
                try:
                    pick, margin = disambiguate_sign(
                        cands, phase_fits[+1], a_par, rep.a_perp, +1, species,
                        system.b_z, config.n_rf_vec, phase_resolution)
                    rep.sign_status = "resolved"
                    rep.diagnostics["sign_margin"] = margin
                except Indistinguishable:
                    pick = _replay_pick(system, config, dip_m, cands, a_par,
                                        rep.a_perp, species)
                    rep.sign_status = "resolved_by_replay"
                rep.direction = cands[pick]
                inv = invert_position(a_par, rep.a_perp, rep.direction,
                                      species)
                rep.position, rep.position_mirror = _apply_sign_prior(
                    inv, config)
                if (config.lattice_region is not None
                        and rep.position is not None):
                    site, resid, ok = snap_to_lattice(rep.position,
                                                      config.lattice_region)
                    rep.diagnostics["lattice_residual_m"] = resid
                    rep.diagnostics["lattice_ok"] = ok
                    rep.diagnostics["lattice_site_nm"] = (site * 1e9).tolist()
            except Exception as exc:  # keep partial results per spin
                rep.status = f"{type(exc).__name__}: {exc}"
            reports.append(rep)
            spin_counter += 1

    _attach_replay_residuals(system, config, reports, traces)
    return ReconstructionResult(reports, traces, config)


def _apply_sign_prior(inv: PositionCandidates, config: ProtocolConfig):
    plus, minus = inv.plus, inv.minus
    if config.sign_prior == "z_positive":
        return (plus, minus) if plus[2] >= 0 else (minus, plus)
    if config.sign_prior == "z_negative":
        return (plus, minus) if plus[2] <= 0 else (minus, plus)
    return plus, minus


def _overlap_phase_scan(system, dip, config, m_s, fit_m, pair_idx, traces):
    """Two-spin product fit of the phase response at an overlapped dip."""
    phases = np.linspace(0.0, np.pi, max(config.phase_points, 16),
                         endpoint=False)
    spec = ScanSpec("phase", phases, m_s, config, anchor=dip.center)
    trace = run_scan(system, spec)
    traces[f"phase_dip{pair_idx}_ms{m_s:+d}"] = trace
    species = system.nuclei[0].species
    seq, _, _ = _point_setup(config, species, dip.center, config.f_coeff)
    models = [PhaseScanModel(config, species, m_s, c, seq.total_time)
              for c in fit_m.couplings]

    def resid(params):
        phi_a, phi_b, amp = params
        return (amp * models[0].response(phases, phi_a)
                * models[1].response(phases, phi_b) - trace.coherence)

    grid = np.linspace(0, np.pi, 24, endpoint=False)
    best = None
    for ga in grid:
        for gc in grid:
            c = float(np.sum(resid((ga, gc, 1.0)) ** 2))
            if best is None or c < best[0]:
                best = (c, ga, gc)
    sol = optimize.least_squares(resid, [best[1], best[2], 1.0],
                                 bounds=([best[1] - np.pi, best[2] - np.pi, 0.5],
                                         [best[1] + np.pi, best[2] + np.pi, 1.5]))
    return [float(np.mod(sol.x[0], np.pi)), float(np.mod(sol.x[1], np.pi))]


def _replay_pick(system, config, dip, candidates, a_par, a_perp, species):
    """Fallback sign choice: replay a time trace for both candidates."""
    period = TWO_PI * config.k_dd / dip.center
    times = np.arange(1, 25) * (config.repetitions // 24 or 1) * period
    spec = ScanSpec("time", times, -1, config, anchor=dip.center)
    measured = run_scan(system, spec)
    best = (np.inf, 0)
    for idx, theta in enumerate(candidates):
        a_vec = a_par * ZHAT + a_perp * theta
        ghost = _ghost_system(system, spec.m_s, a_vec, species)
        replayed = run_scan(ghost, spec)
        dev = float(np.max(np.abs(replayed.coherence - measured.coherence)))
        if dev < best[0]:
            best = (dev, idx)
    return best[1]


def _ghost_system(system, m_s, a_vec, species):
    """Single-spin stand-in with an explicit hyperfine override."""
    a_perp_vec = a_vec - np.dot(a_vec, ZHAT) * ZHAT
    theta = (unit(a_perp_vec) if np.linalg.norm(a_perp_vec) > 0
             else np.array([1.0, 0.0, 0.0]))
    inv = invert_position(float(np.dot(a_vec, ZHAT)),
                          float(np.linalg.norm(a_perp_vec)), theta, species)
    return SpinSystem(system.b_z, m_s, (NuclearSpin(species, inv.plus),),
                      {0: a_vec})


def _attach_replay_residuals(system, config, reports, traces):
    """Compare the measured frequency scan against the reconstruction."""
    ok = [r for r in reports if r.position is not None and r.status == "ok"]
    if not ok:
        return
    species = system.nuclei[0].species
    nuclei = tuple(NuclearSpin(species, r.position) for r in ok)
    overrides = {i: r.a_par * ZHAT + r.a_perp * r.direction
                 for i, r in enumerate(ok)}
    replay_system = SpinSystem(system.b_z, -1, nuclei, overrides)
    measured = traces.get("frequency_ms-1")
    if measured is None:
        return
    spec = ScanSpec("frequency", measured.values, -1, config)
    replayed = run_scan(replay_system, spec)
    traces["frequency_replay_ms-1"] = replayed
    dev = float(np.max(np.abs(replayed.coherence - measured.coherence)))
    for r in ok:
        r.replay_residual = dev


def to_frame_s(result: ReconstructionResult,
               reference: int = 0) -> ReconstructionResult:
    """Rotate outputs about z so the reference spin's transverse hyperfine
    direction lies in the x-z half-plane (frame for unknown n_rf)."""
    spins = [r for r in result.spins if r.direction is not None]
    if not spins:
        return result
    ref = spins[min(reference, len(spins) - 1)]
    alpha = np.arctan2(ref.direction[1], ref.direction[0])
    c, s = np.cos(-alpha), np.sin(-alpha)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = []
    for r in result.spins:
        r2 = SpinReport(**{**r.__dict__})
        if r2.direction is not None:
            r2.direction = rot @ r2.direction
        if r2.position is not None:
            r2.position = rot @ r2.position
        if r2.position_mirror is not None:
            r2.position_mirror = rot @ r2.position_mirror
        out.append(r2)
    return ReconstructionResult(out, result.traces, result.config)
