"""Static spin-model ingredients.

Hyperfine vectors of distant nuclei take the point-dipole form

    A(r) = (mu0/4pi) * gamma_e * gamma_j * hbar / r^3 * (z - 3 (z.rhat) rhat)

with z the NV symmetry axis (the frame's +z), r the nuclear position with
the NV at the origin, and the result in rad/s.  The effective nuclear
precession vector is

    omega_j = gamma_j * B_z * z - (m_s/2) * A_j.

Internuclear couplings carry the full dipole-dipole prefactor
(mu0/4pi) gamma_j gamma_k hbar / r_jk^3 and, in the strong-field secular
limit, the familiar (1 - 3 cos^2 theta)/2 angular factor on
(3 Iz Iz - I.I).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .constants import CONSTANTS, GAMMA_E, HBAR, MU0_OVER_4PI, gamma_of
from .errors import CoincidentSpins, ZeroRadius

ZHAT = np.array([0.0, 0.0, 1.0])

# Below this radius the contact term (not modeled) would matter.
DIPOLE_RADIUS_FLOOR = 0.3e-9  # m


def unit(v: np.ndarray) -> np.ndarray:
    """v / |v|; raises on zero vector."""
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero vector has no direction")
    return np.asarray(v, dtype=float) / n


def rotate_about_axis(b: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotate vector b about unit axis l by angle phi.

    Uses (b - (b.l) l) cos(phi) - l x b sin(phi) + (b.l) l, the same
    identity that generates every rotating-frame field in this package.
    """
    l = np.asarray(axis, dtype=float)
    b = np.asarray(b, dtype=float)
    bl = np.dot(b, l)
    return (b - bl * l) * np.cos(angle) - np.cross(l, b) * np.sin(angle) + bl * l


def rotation_aligning(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Proper rotation matrix R with R @ unit(a) == unit(b)."""
    a = unit(a)
    b = unit(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if np.linalg.norm(v) < 1e-15:
        if c > 0:
            return np.eye(3)
        # 180 degrees: rotate about any axis perpendicular to a
        ref = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        axis = unit(np.cross(a, ref))
        K = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
        return np.eye(3) + 2.0 * (K @ K)
    K = np.array([[0, -v[2], v[1]],
                  [v[2], 0, -v[0]],
                  [-v[1], v[0], 0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


@dataclass(frozen=True)
class NuclearSpin:
    """Spin-1/2 nucleus at position r (m) in the NV frame (NV at origin)."""

    species: str
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.position.shape != (3,):
            raise ValueError("position must be a 3-vector")
        if np.linalg.norm(self.position) == 0.0:
            raise ValueError("nucleus cannot sit on the NV site")
        gamma_of(self.species)  # raises for unknown species

    @property
    def gamma(self) -> float:
        return gamma_of(self.species)


@dataclass(frozen=True)
class SpinSystem:
    """Static field, electron manifold choice and the nuclear ensemble.

    hyperfine_overrides maps nucleus index -> explicit A vector (rad/s),
    replacing the point-dipole value computed from the position.
    """

    b_z: float
    m_s: int
    nuclei: tuple
    hyperfine_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m_s not in (+1, -1):
            raise ValueError("m_s must be +1 or -1")
        if self.b_z < 0:
            raise ValueError("B_z must be non-negative")
        object.__setattr__(self, "nuclei", tuple(self.nuclei))

    def hyperfine(self, j: int) -> np.ndarray:
        if j in self.hyperfine_overrides:
            return np.asarray(self.hyperfine_overrides[j], dtype=float)
        spin = self.nuclei[j]
        return hyperfine_at(spin.position, spin.species)

    def larmor(self, j: int) -> "EffectiveLarmor":
        spin = self.nuclei[j]
        return effective_larmor(self.hyperfine(j), self.b_z, self.m_s, spin.species)

    def with_m_s(self, m_s: int) -> "SpinSystem":
        return SpinSystem(self.b_z, m_s, self.nuclei, dict(self.hyperfine_overrides))

    def subsystem(self, indices: Sequence[int]) -> "SpinSystem":
        nuclei = tuple(self.nuclei[i] for i in indices)
        overrides = {n: self.hyperfine_overrides[i]
                     for n, i in enumerate(indices) if i in self.hyperfine_overrides}
        return SpinSystem(self.b_z, self.m_s, nuclei, overrides)


@dataclass(frozen=True)
class EffectiveLarmor:
    """Precession vector of one nucleus, rad/s."""

    vector: np.ndarray

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.vector))

    @property
    def direction(self) -> np.ndarray:
        return unit(self.vector)


def dipole_prefactor(species: str, r: float, constants=CONSTANTS) -> float:
    """(mu0/4pi) gamma_e gamma_j hbar / r^3, rad/s."""
    return (constants.mu0_over_4pi * constants.gamma_e
            * constants.gamma(species) * constants.hbar / r ** 3)


def hyperfine_at(r: np.ndarray, species: str, *,
                 radius_floor: float = DIPOLE_RADIUS_FLOOR) -> np.ndarray:
    """Point-dipole hyperfine vector A(r) in rad/s.

    Even in r, axially symmetric about z; raises ZeroRadius below the
    configurable validity floor.
    """
    r = np.asarray(r, dtype=float)
    dist = float(np.linalg.norm(r))
    if dist <= radius_floor:
        raise ZeroRadius(f"|r| = {dist:.3e} m below dipole floor {radius_floor:.1e} m")
    rhat = r / dist
    k = dipole_prefactor(species, dist)
    return k * (ZHAT - 3.0 * rhat[2] * rhat)


def effective_larmor(a_vec: np.ndarray, b_z: float, m_s: int,
                     species: str) -> EffectiveLarmor:
    """omega_j = gamma_j B_z z - (m_s/2) A_j."""
    if b_z < 0:
        raise ValueError("B_z must be non-negative")
    a_vec = np.asarray(a_vec, dtype=float)
    vec = gamma_of(species) * b_z * ZHAT - 0.5 * m_s * a_vec
    return EffectiveLarmor(vec)


def internuclear_dipolar(j: NuclearSpin, k: NuclearSpin):
    """Full dipole-dipole coefficient and pair direction.

    Returns (coefficient rad/s, rhat) such that the coupling operator is
    coefficient * [I_j . I_k - 3 (I_j . rhat)(rhat . I_k)].
    """
    r_vec = j.position - k.position
    dist = float(np.linalg.norm(r_vec))
    if dist == 0.0:
        raise CoincidentSpins("pair separation is zero")
    coeff = MU0_OVER_4PI * j.gamma * k.gamma * HBAR / dist ** 3
    return coeff, r_vec / dist


def secular_internuclear(j: NuclearSpin, k: NuclearSpin,
                         quantization_axis: np.ndarray = ZHAT) -> float:
    """Strong-field secular coefficient on (3 Iz Iz - I.I), rad/s.

    coefficient = (mu0/8pi) gamma_j gamma_k hbar / r^3 (1 - 3 (rhat.z)^2).
    """
    coeff, rhat = internuclear_dipolar(j, k)
    cos_t = float(np.dot(rhat, unit(quantization_axis)))
    return 0.5 * coeff * (1.0 - 3.0 * cos_t ** 2)
