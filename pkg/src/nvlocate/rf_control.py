"""RF-field algebra: effective drive axes, detunings and rotating-frame
coupling/control vectors.

For a nucleus with precession vector omega (unit w) driven by an RF tone
of amplitude V along nhat with phase phi:

    n_z = (nhat.w) w          n_x = nhat - n_z          n_y = w x nhat
    n(phi) = n_x cos(phi) + n_y sin(phi)                (always _|_ w)
    Rabi   = (1/2) gamma V |n(phi)|
    nu     = (1/2) gamma V n(phi) + (w_rf - w_j) w

The hyperfine vector seen in the doubly rotating frame is built from the
rotation identity rot(b, l, phi) = (b - (b.l) l) cos(phi) - l x b sin(phi)
+ (b.l) l applied about w (angle w_rf t) and then about nu (angle nu t).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .constants import gamma_of
from .errors import NvLocateError, RwaViolation
from .spin_model import EffectiveLarmor, SpinSystem, ZHAT, rotate_about_axis, unit

SQRT2 = np.sqrt(2.0)
SQRT3 = np.sqrt(3.0)


class DegenerateGeometry(NvLocateError):
    """RF direction parallel to the quantization axis: no transverse drive."""


@dataclass(frozen=True)
class RfField:
    """One RF tone: B-field amplitude (T), frequency (rad/s), phase, direction."""

    amplitude: float
    omega: float
    phase: float
    direction: np.ndarray
    role: str = "decoupling"

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.role not in ("decoupling", "control"):
            raise ValueError("role must be 'decoupling' or 'control'")
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")
        object.__setattr__(self, "direction", d / n)


@dataclass(frozen=True)
class DriveGeometry:
    """Per-nucleus frame quantities under one RF tone."""

    n_x: np.ndarray
    n_y: np.ndarray
    n_z: np.ndarray
    rabi: float
    delta_shift: float       # (w_rf - w_j) - Delta
    nu_vec: np.ndarray
    omega_hat: np.ndarray
    omega_rf: float

    @property
    def nu(self) -> float:
        return float(np.linalg.norm(self.nu_vec))

    @property
    def nu_hat(self) -> np.ndarray:
        return unit(self.nu_vec)


def effective_axis(n_rf: np.ndarray, omega_hat: np.ndarray, phi: float) -> np.ndarray:
    """n(phi) = n_x cos(phi) + n_y sin(phi); perpendicular to omega_hat."""
    n_rf = np.asarray(n_rf, dtype=float)
    w = np.asarray(omega_hat, dtype=float)
    n_z = np.dot(n_rf, w) * w
    n_x = n_rf - n_z
    n_y = np.cross(w, n_rf)
    return n_x * np.cos(phi) + n_y * np.sin(phi)


def drive_geometry(field: RfField, larmor: EffectiveLarmor, delta: float,
                   species: str, *, rwa_warn: float = 20.0,
                   rwa_fail: float = 5.0) -> DriveGeometry:
    """Frame quantities for one nucleus under one tone.

    Raises RwaViolation when the tone frequency is not large against the
    drive amplitude gamma*V (ratio below rwa_fail); warns below rwa_warn.
    """
    gamma = gamma_of(species)
    drive = gamma * field.amplitude
    if drive > 0 and field.omega > 0:
        ratio = field.omega / drive
        if ratio < rwa_fail:
            raise RwaViolation(f"omega_rf/gamma V = {ratio:.2f} < {rwa_fail}")
        if ratio < rwa_warn:
            warnings.warn(f"omega_rf/gamma V = {ratio:.1f}: rotating-wave "
                          "treatment is marginal", stacklevel=2)
    w = larmor.direction
    n_rf = field.direction
    n_z = np.dot(n_rf, w) * w
    n_x = n_rf - n_z
    n_y = np.cross(w, n_rf)
    transverse = np.sqrt(max(0.0, 1.0 - np.dot(n_rf, w) ** 2))
    rabi = 0.5 * drive * transverse
    detuning = field.omega - larmor.magnitude
    nu_vec = (0.5 * drive * effective_axis(n_rf, w, field.phase)
              + detuning * w)
    if field.amplitude == 0.0 and field.omega == 0.0:
        nu_vec = -larmor.vector
    return DriveGeometry(n_x=n_x, n_y=n_y, n_z=n_z, rabi=rabi,
                         delta_shift=detuning - delta, nu_vec=nu_vec,
                         omega_hat=w, omega_rf=field.omega)


def hyperfine_components(a_vec: np.ndarray, omega_hat: np.ndarray):
    """Split A into (A_x, A_y, A_z): transverse, rotated-transverse, parallel."""
    a_vec = np.asarray(a_vec, dtype=float)
    w = np.asarray(omega_hat, dtype=float)
    a_z = np.dot(a_vec, w) * w
    a_x = a_vec - a_z
    a_y = np.cross(w, a_vec)
    return a_x, a_y, a_z


def tilde_hyperfine(a_vec: np.ndarray, geometry: DriveGeometry, t: float) -> np.ndarray:
    """Doubly rotated hyperfine vector; |result| = |A| for all t."""
    a_x, a_y, a_z = hyperfine_components(a_vec, geometry.omega_hat)
    nu_hat = geometry.nu_hat
    nu_t = geometry.nu * t
    rx = rotate_about_axis(a_x, nu_hat, nu_t)
    ry = rotate_about_axis(a_y, nu_hat, nu_t)
    rz = rotate_about_axis(a_z, nu_hat, nu_t)
    wt = geometry.omega_rf * t
    return rx * np.cos(wt) + ry * np.sin(wt) + rz


def a_pm(a_vec: np.ndarray, geometry: DriveGeometry, sign: int) -> np.ndarray:
    """Effective coupling vector at the shifted resonance w_rf +/- nu.

    a(+-) = A_x - (A_x.nu_hat) nu_hat +- nu_hat x A_y; for delta_shift = 0
    its magnitude is sqrt((2/3)(2 -+ sqrt3)) |A_x|.
    """
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    a_x, a_y, _ = hyperfine_components(a_vec, geometry.omega_hat)
    nu_hat = geometry.nu_hat
    return a_x - np.dot(a_x, nu_hat) * nu_hat + sign * np.cross(nu_hat, a_y)


def a_pm_magnitude_factor(sign: int) -> float:
    """|a(+-)| / |A_x| at exact decoupling resonance."""
    return float(np.sqrt(2.0 / 3.0 * (2.0 - sign * SQRT3)))


def b_pm(n_rf: np.ndarray, geometry: DriveGeometry, phi_rfc: float,
         sign: int) -> np.ndarray:
    """Effective single-spin control vector at w_rfc = w_rfd +/- nu."""
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    w = geometry.omega_hat
    n_phi = effective_axis(n_rf, w, phi_rfc)
    n_phi_90 = effective_axis(n_rf, w, phi_rfc + np.pi / 2.0)
    nu_hat = geometry.nu_hat
    return (n_phi - np.dot(n_phi, nu_hat) * nu_hat
            + sign * np.cross(nu_hat, n_phi_90))


def b_z(n_rf: np.ndarray, geometry: DriveGeometry, phi_rfc: float) -> np.ndarray:
    """Control vector at w_rfc = nu."""
    nu_hat = geometry.nu_hat
    n_par = geometry.n_z
    return ((n_par - np.dot(n_par, nu_hat) * nu_hat) * np.cos(phi_rfc)
            - np.cross(nu_hat, n_par) * np.sin(phi_rfc))


def decoupling_setup(omega_scan: float, delta: float, species: str,
                     n_rf: np.ndarray, branch: int = -1,
                     phase: float = 0.0) -> tuple[RfField, float]:
    """Decoupling tone and matching DD frequency for one scan point.

    Tone: w_rfd = w_scan + Delta with amplitude solving
    (1/2) gamma V sqrt(1 - |nhat.z|^2) = sqrt2 Delta.  The pulse sequence
    must satisfy k_DD w_DD = w_scan + (1 +- sqrt3) Delta (branch sign).
    """
    if branch not in (+1, -1):
        raise ValueError("branch must be +1 or -1")
    if delta < 0:
        raise ValueError("delta must be non-negative")
    n_rf = unit(np.asarray(n_rf, dtype=float))
    transverse = np.sqrt(max(0.0, 1.0 - np.dot(n_rf, ZHAT) ** 2))
    if delta == 0.0:
        field = RfField(0.0, omega_scan, phase, n_rf, role="decoupling")
        return field, omega_scan
    if transverse < 1e-9:
        raise DegenerateGeometry("RF direction parallel to the NV axis")
    gamma = gamma_of(species)
    amplitude = 2.0 * SQRT2 * delta / (gamma * transverse)
    field = RfField(amplitude, omega_scan + delta, phase, n_rf, role="decoupling")
    dd_target = omega_scan + (1.0 + branch * SQRT3) * delta
    return field, dd_target


@dataclass(frozen=True)
class ConditionReport:
    condition: str
    spin: Optional[int]
    ratio: float
    status: str


def _status(ratio: float, margin_pass: float, margin_warn: float) -> str:
    if ratio >= margin_pass:
        return "pass"
    if ratio >= margin_warn:
        return "warn"
    return "fail"


def validate_regime(system: SpinSystem, k_dd: int, f_kdd: float,
                    decoupling: Optional[RfField] = None,
                    delta: float = 0.0, *, margin_pass: float = 10.0,
                    margin_warn: float = 5.0,
                    k_cutoff: Optional[int] = None) -> list[ConditionReport]:
    """Evaluate the addressing/decoupling validity inequalities.

    Each report carries the smallest ratio found for one condition and
    spin, flagged pass/warn/fail at the configured margins.  Reports
    only; nothing raises.
    """
    if k_cutoff is None:
        k_cutoff = 3 * k_dd
    reports: list[ConditionReport] = []
    n_spins = len(system.nuclei)
    if n_spins == 0:
        return reports
    a_vecs = [system.hyperfine(j) for j in range(n_spins)]
    larmors = [system.larmor(j) for j in range(n_spins)]
    a_mag = np.array([np.linalg.norm(a) for a in a_vecs])
    omegas = np.array([l.magnitude for l in larmors])
    gammas = np.array([gamma_of(s.species) for s in system.nuclei])
    zeeman = gammas * system.b_z

    def ratio_of(num, den):
        return float(num / den) if den > 0 else np.inf

    for j in range(n_spins):
        reports.append(ConditionReport(
            "strong_field", j,
            ratio_of(zeeman[j], k_dd * a_mag[j]),
            _status(ratio_of(zeeman[j], k_dd * a_mag[j]), margin_pass, margin_warn)))

    for j in range(n_spins):
        a_x, _, _ = hyperfine_components(a_vecs[j], larmors[j].direction)
        ax_j = np.linalg.norm(a_x)
        others = np.abs(omegas - omegas[j])
        others = others[others > 0]
        if others.size == 0 or ax_j == 0:
            ratio = np.inf
        else:
            ratio = float(np.min(others) / (abs(f_kdd) * ax_j))
        reports.append(ConditionReport(
            "addressing_separation", j, ratio,
            _status(ratio, margin_pass, margin_warn)))

    if decoupling is not None and delta > 0:
        for j in range(n_spins):
            ratio = ratio_of(zeeman[j], delta)
            reports.append(ConditionReport(
                "zeeman_vs_delta", j, ratio,
                _status(ratio, margin_pass, margin_warn)))
        for j in range(n_spins):
            ratio = ratio_of(SQRT3 * delta, abs(f_kdd) * a_mag[j])
            reports.append(ConditionReport(
                "spinning_vs_coupling", j, ratio,
                _status(ratio, margin_pass, margin_warn)))
        for j in range(n_spins):
            worst = np.inf
            if a_mag[j] > 0:
                for k in range(1, k_cutoff + 1):
                    gap = abs(zeeman[j] * k / k_dd - SQRT3 * delta)
                    worst = min(worst, gap / a_mag[j])
            reports.append(ConditionReport(
                "harmonic_clearance", j, float(worst),
                _status(float(worst), margin_pass, margin_warn)))
        nus = np.array([
            drive_geometry(decoupling, larmors[j], delta,
                           system.nuclei[j].species, rwa_fail=0.0,
                           rwa_warn=0.0).nu
            for j in range(n_spins)])
        for j in range(n_spins):
            gaps = np.abs(nus - nus[j])
            gaps = gaps[gaps > 0]
            if gaps.size == 0 or a_mag[j] == 0:
                ratio = np.inf
            else:
                ratio = float(np.min(gaps) / (abs(f_kdd) * a_mag[j]))
            reports.append(ConditionReport(
                "nu_separation", j, ratio,
                _status(ratio, margin_pass, margin_warn)))
    return reports


def regime_report_csv(reports: Sequence[ConditionReport]) -> str:
    lines = ["condition,spin,ratio,status"]
    for r in reports:
        spin = "" if r.spin is None else str(r.spin)
        ratio = "inf" if np.isinf(r.ratio) else f"{r.ratio:.6g}"
        lines.append(f"{r.condition},{spin},{ratio},{r.status}")
    return "\n".join(lines) + "\n"
