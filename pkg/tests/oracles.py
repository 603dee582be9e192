"""Independent brute-force oracles used by the test suite.

These deliberately avoid the package's propagation machinery: the
density-matrix oracle evolves the full electron+nuclei state with
explicit pi-pulse unitaries and midpoint-sampled piecewise-constant
steps, and the Fourier oracle integrates F(t) by adaptive quadrature.
"""

import numpy as np
from scipy import integrate
from scipy.linalg import expm

from nvlocate import dynamics
from nvlocate.constants import TWO_PI
from nvlocate.pulse_seq import modulation


def quadrature_fourier_coeff(seq, k: int) -> float:
    """f_k by adaptive quadrature of F(t) cos(k w t) over one period."""
    w = TWO_PI / seq.period
    t_pts = np.sort(seq.times_in_period)
    edges = np.concatenate([[0.0], t_pts, [seq.period]])
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        sign = modulation(seq, mid)
        val, _ = integrate.quad(lambda t: np.cos(k * w * t), a, b,
                                limit=200)
        total += sign * val
    return 2.0 / seq.period * total


def density_matrix_coherence(system, seq, fields, t,
                             steps_per_cycle: int = 400,
                             static_steps: int = 1) -> float:
    """L(t) from the full (2 * 2^N)-dim density matrix with explicit pulses."""
    branches = dynamics.build_branches(system)
    dim = branches.dim
    p0 = np.diag([1.0, 0.0])
    p1 = np.diag([0.0, 1.0])
    x_gate = np.array([[0.0, 1.0], [1.0, 0.0]])
    h_static = np.kron(p0, branches.h0) + np.kron(p1, branches.h1)
    tones = dynamics.tones_from_fields(system, fields)
    drives = [(np.kron(np.eye(2), tn.matrix), tn.omega, tn.phase)
              for tn in tones]
    if drives:
        fastest = max(d[1] for d in drives)
        dt_max = TWO_PI / fastest / steps_per_cycle
    else:
        dt_max = t / static_steps if t > 0 else 1.0
    pulses = seq.absolute_times()
    pulses = pulses[pulses < t]
    psi_x = np.array([1.0, 1.0]) / np.sqrt(2.0)
    rho_e = np.outer(psi_x, psi_x)
    rho = np.kron(rho_e, np.eye(dim) / dim).astype(complex)
    flip = np.kron(x_gate, np.eye(dim))
    bounds = np.concatenate([[0.0], pulses, [t]])
    for i in range(len(bounds) - 1):
        t_a, t_b = bounds[i], bounds[i + 1]
        if t_b > t_a:
            if drives:
                n_steps = max(1, int(np.ceil((t_b - t_a) / dt_max)))
                dt = (t_b - t_a) / n_steps
                for k in range(n_steps):
                    tm = t_a + (k + 0.5) * dt
                    h = h_static.copy()
                    for w_op, om, ph in drives:
                        h = h + np.cos(om * tm - ph) * w_op
                    u = expm(-1j * h * dt)
                    rho = u @ rho @ u.conj().T
            else:
                u = expm(-1j * h_static * (t_b - t_a))
                rho = u @ rho @ u.conj().T
        if i < len(bounds) - 2:
            rho = flip @ rho @ flip.conj().T
    proj = np.kron(rho_e, np.eye(dim))
    return float(2.0 * np.trace(proj @ rho).real - 1.0)


def kabsch_rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """Optimal proper-rotation superposition RMSD (no reflections)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    h = bc.T @ ac
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    resid = ac - bc @ rot.T
    return float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))
