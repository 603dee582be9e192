import numpy as np
import pytest

from nvlocate.constants import (CONSTANTS, GAMMA_E, HBAR, MU0_OVER_4PI,
                                TWO_PI, gamma_of)
from nvlocate.errors import CoincidentSpins, ZeroRadius
from nvlocate.spin_model import (NuclearSpin, SpinSystem, ZHAT,
                                 effective_larmor, hyperfine_at,
                                 internuclear_dipolar, rotate_about_axis,
                                 rotation_aligning, secular_internuclear,
                                 unit)

MAGIC = np.arccos(1.0 / np.sqrt(3.0))


def dipole_k(species, r):
    return MU0_OVER_4PI * GAMMA_E * gamma_of(species) * HBAR / r ** 3


class TestConstants:
    def test_all_positive(self):
        assert CONSTANTS.mu0_over_4pi > 0
        assert CONSTANTS.hbar > 0
        assert CONSTANTS.gamma_e > 0
        for g in CONSTANTS.gamma_nuclear.values():
            assert g > 0

    def test_zero_field_splitting(self):
        assert CONSTANTS.zero_field_splitting == pytest.approx(
            TWO_PI * 2.87e9)


class TestHyperfine:
    def test_on_axis_value(self):
        # oracle: k = mu0/4pi * ge * gC * hbar / r^3; on axis A = -2k z
        r = np.array([0.0, 0.0, 1.0e-9])
        a = hyperfine_at(r, "13C")
        k = dipole_k("13C", 1.0e-9)
        assert np.allclose(a, -2.0 * k * ZHAT, rtol=1e-12)
        # |A| close to 2pi x 39.8 kHz
        assert abs(np.linalg.norm(a) / TWO_PI - 39.8e3) / 39.8e3 < 0.01

    def test_magic_angle_kills_parallel(self):
        r = 1e-9 * np.array([np.sin(MAGIC), 0.0, np.cos(MAGIC)])
        a = hyperfine_at(r, "13C")
        assert abs(a[2]) < 1e-9 * np.linalg.norm(a)

    def test_equatorial(self):
        r = np.array([1.3e-9, 0.0, 0.0])
        a = hyperfine_at(r, "13C")
        k = dipole_k("13C", 1.3e-9)
        assert np.allclose(a, k * ZHAT, rtol=1e-12)

    def test_even_in_r(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            r = rng.normal(size=3) * 1e-9
            if np.linalg.norm(r) < 0.4e-9:
                continue
            assert np.allclose(hyperfine_at(r, "1H"),
                               hyperfine_at(-r, "1H"), rtol=0, atol=1e-18)

    def test_axial_symmetry(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            r = rng.normal(size=3) * 1e-9
            if np.linalg.norm(r) < 0.4e-9:
                continue
            alpha = rng.uniform(0, 2 * np.pi)
            rot = rotation_z(alpha)
            a1 = hyperfine_at(rot @ r, "13C")
            a0 = hyperfine_at(r, "13C")
            assert a1[2] == pytest.approx(a0[2], rel=1e-12)
            assert np.allclose(a1[:2], (rot @ a0)[:2], rtol=1e-10, atol=1e-12)

    def test_radius_floor(self):
        with pytest.raises(ZeroRadius):
            hyperfine_at(np.array([0.0, 0.0, 0.2e-9]), "13C")


def rotation_z(alpha):
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestEffectiveLarmor:
    def test_bare_zeeman(self):
        lar = effective_larmor(np.zeros(3), 0.01401, -1, "13C")
        assert np.allclose(lar.vector, gamma_of("13C") * 0.01401 * ZHAT)

    def test_paper_field_value(self):
        # 140.1 G on 13C sits at 2pi x 150 kHz
        lar = effective_larmor(np.zeros(3), 140.1e-4, -1, "13C")
        assert lar.magnitude / TWO_PI == pytest.approx(150e3, rel=2e-3)

    def test_parallel_shift(self):
        a = TWO_PI * 10e3 * ZHAT
        lar = effective_larmor(a, 140.1e-4, -1, "13C")
        bare = gamma_of("13C") * 140.1e-4
        assert lar.magnitude == pytest.approx(bare + TWO_PI * 5e3, rel=1e-12)

    def test_magnitude_rotation_invariance(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=3) * 1e4
        m0 = effective_larmor(a, 0.05, +1, "1H").magnitude
        rot = rotation_z(1.234)
        m1 = effective_larmor(rot @ a, 0.05, +1, "1H").magnitude
        assert m0 == pytest.approx(m1, rel=1e-12)

    def test_unit_vector(self):
        lar = effective_larmor(np.array([1e4, -2e4, 3e3]), 0.02, +1, "13C")
        assert np.linalg.norm(lar.direction) == pytest.approx(1.0, abs=1e-12)


class TestInternuclear:
    def test_nn_pair_value(self):
        # oracle: mu0/4pi gC^2 hbar / a_nn^3 = 2pi x 2.08 kHz
        a_nn = 1.54e-10
        sA = NuclearSpin("13C", np.array([0.0, 0.0, 1.0e-9]))
        sB = NuclearSpin("13C", np.array([0.0, 0.0, 1.0e-9 + a_nn]))
        coeff, rhat = internuclear_dipolar(sA, sB)
        expected = MU0_OVER_4PI * gamma_of("13C") ** 2 * HBAR / a_nn ** 3
        assert coeff == pytest.approx(expected, rel=1e-12)
        assert coeff / TWO_PI == pytest.approx(2080.3, rel=1e-3)
        assert abs(coeff / TWO_PI - 2.06e3) / 2.06e3 < 0.02
        assert np.allclose(np.abs(rhat), [0, 0, 1])

    def test_inverse_cube(self):
        s0 = NuclearSpin("1H", np.array([0.0, 0.0, 1.0e-9]))
        s1 = NuclearSpin("1H", np.array([0.3e-9, 0.0, 1.0e-9]))
        s2 = NuclearSpin("1H", np.array([0.6e-9, 0.0, 1.0e-9]))
        c1, _ = internuclear_dipolar(s0, s1)
        c2, _ = internuclear_dipolar(s0, s2)
        assert c1 / c2 == pytest.approx(8.0, rel=1e-12)

    def test_coincident(self):
        s = NuclearSpin("13C", np.array([0.0, 0.0, 1.0e-9]))
        with pytest.raises(CoincidentSpins):
            internuclear_dipolar(s, s)


class TestSecular:
    def test_axis_along_z(self):
        a_nn = 1.54e-10
        s0 = NuclearSpin("13C", np.array([0.5e-9, 0.0, 1.0e-9]))
        s1 = NuclearSpin("13C", np.array([0.5e-9, 0.0, 1.0e-9 + a_nn]))
        coeff = secular_internuclear(s0, s1)
        full, _ = internuclear_dipolar(s0, s1)
        assert coeff == pytest.approx(-full, rel=1e-12)  # 0.5*(1-3) = -1

    def test_magic_angle_zero(self):
        a_nn = 1.54e-10
        d = a_nn * np.array([np.sin(MAGIC), 0.0, np.cos(MAGIC)])
        s0 = NuclearSpin("13C", np.array([0.5e-9, 0.0, 1.0e-9]))
        s1 = NuclearSpin("13C", s0.position + d)
        coeff = secular_internuclear(s0, s1)
        full, _ = internuclear_dipolar(s0, s1)
        assert abs(coeff) < 1e-10 * full

    def test_perpendicular_pair(self):
        a_nn = 1.54e-10
        s0 = NuclearSpin("13C", np.array([0.5e-9, 0.0, 1.0e-9]))
        s1 = NuclearSpin("13C", s0.position + np.array([a_nn, 0.0, 0.0]))
        coeff = secular_internuclear(s0, s1)
        assert coeff / TWO_PI == pytest.approx(1040.2, rel=1e-3)

    def test_matches_projected_tensor(self):
        """Secular form equals the total-Iz-conserving projection of the
        full dipolar tensor (brute-force 4x4 check on random pairs)."""
        from nvlocate.dynamics import spin_operators
        rng = np.random.default_rng(11)
        ops = spin_operators(2)
        iz_tot = ops[0][2] + ops[1][2]
        m_vals = np.diag(iz_tot).real
        for _ in range(12):
            p0 = rng.normal(size=3) * 1e-9 + np.array([0, 0, 3e-9])
            p1 = p0 + unit(rng.normal(size=3)) * 2e-10
            s0 = NuclearSpin("13C", p0)
            s1 = NuclearSpin("13C", p1)
            coeff, rhat = internuclear_dipolar(s0, s1)
            dot = sum(ops[0][c] @ ops[1][c] for c in range(3))
            proj_a = sum(rhat[c] * ops[0][c] for c in range(3))
            proj_b = sum(rhat[c] * ops[1][c] for c in range(3))
            full = coeff * (dot - 3.0 * proj_a @ proj_b)
            conserving = np.abs(m_vals[:, None] - m_vals[None, :]) < 1e-12
            projected = np.where(conserving, full, 0.0)
            sec = secular_internuclear(s0, s1)
            expected = sec * (3.0 * ops[0][2] @ ops[1][2] - dot)
            assert np.allclose(projected, expected, atol=1e-9 * abs(coeff))


class TestRotationIdentity:
    def test_norm_preserving_and_identity_at_zero(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            b = rng.normal(size=3)
            axis = unit(rng.normal(size=3))
            phi = rng.uniform(-8, 8)
            rb = rotate_about_axis(b, axis, phi)
            assert np.linalg.norm(rb) == pytest.approx(np.linalg.norm(b),
                                                       rel=1e-12)
            assert np.allclose(rotate_about_axis(b, axis, 0.0), b)

    def test_matches_matrix_rotation(self):
        from scipy.spatial.transform import Rotation
        rng = np.random.default_rng(6)
        for _ in range(20):
            b = rng.normal(size=3)
            axis = unit(rng.normal(size=3))
            phi = rng.uniform(-4, 4)
            expected = Rotation.from_rotvec(-phi * axis).apply(b)
            assert np.allclose(rotate_about_axis(b, axis, phi), expected,
                               atol=1e-12)


class TestSpinSystem:
    def test_override(self):
        s = NuclearSpin("13C", np.array([0, 0, 1e-9]))
        a_custom = np.array([1e3, 2e3, 3e3])
        sys1 = SpinSystem(0.01, -1, (s,), {0: a_custom})
        assert np.allclose(sys1.hyperfine(0), a_custom)

    def test_m_s_validation(self):
        s = NuclearSpin("13C", np.array([0, 0, 1e-9]))
        with pytest.raises(ValueError):
            SpinSystem(0.01, 0, (s,))

    def test_subsystem_keeps_overrides(self):
        s0 = NuclearSpin("13C", np.array([0, 0, 1e-9]))
        s1 = NuclearSpin("13C", np.array([0, 1e-9, 0]))
        sys2 = SpinSystem(0.01, -1, (s0, s1), {1: np.array([1.0, 0, 0])})
        sub = sys2.subsystem([1])
        assert np.allclose(sub.hyperfine(0), [1.0, 0, 0])
