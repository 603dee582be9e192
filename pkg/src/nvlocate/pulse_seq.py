"""Periodic pi-pulse sequences and their modulation-function harmonics.

The modulation function F(t) starts at +1 and flips sign at every pulse;
for a pattern symmetric within the period (even F) it expands as
F(t) = sum_k f_k cos(k w_DD t).  With flip times t_1 < ... < t_M in one
period the coefficients come out in closed form:

    f_k = (2 / (k pi)) * sum_i (-1)^(i-1) * sin(k * w_DD * t_i).

CPMG places pulses at tau/4 and 3 tau/4, giving f_k = 4 sin(k pi/2)/(k pi).
The tunable sequences here use two composites of five pulses per period,
symmetric about tau/4 and 3 tau/4; the two intra-composite offsets are
solved numerically to hit a target f_(k_DD) while zeroing a chosen odd
harmonic (every even harmonic vanishes by symmetry).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import NotEven, Unachievable

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PulseSequence:
    """Pulse times within one period (s), repeated `repetitions` times.

    Phases are metadata only: pulses are ideal and instantaneous.
    """

    period: float
    times_in_period: np.ndarray
    repetitions: int
    phases: tuple = ()
    composite_size: int = 1
    label: str = ""

    def __post_init__(self):
        t = np.asarray(self.times_in_period, dtype=float)
        if self.period <= 0:
            raise ValueError("period must be positive")
        if t.size and (np.any(t < 0) or np.any(t >= self.period)):
            raise ValueError("pulse times must lie in [0, period)")
        if t.size and np.any(np.diff(t) <= 0):
            raise ValueError("pulse times must be strictly increasing")
        if self.repetitions < 0:
            raise ValueError("repetitions must be non-negative")
        object.__setattr__(self, "times_in_period", t)

    @property
    def omega_dd(self) -> float:
        return TWO_PI / self.period

    @property
    def pulses_per_period(self) -> int:
        return int(self.times_in_period.size)

    @property
    def total_pulses(self) -> int:
        return self.pulses_per_period * self.repetitions

    @property
    def total_time(self) -> float:
        return self.period * self.repetitions

    def absolute_times(self) -> np.ndarray:
        """All pulse times over the full repeated sequence."""
        if self.repetitions == 0 or self.pulses_per_period == 0:
            return np.zeros(0)
        offsets = np.arange(self.repetitions) * self.period
        return (offsets[:, None] + self.times_in_period[None, :]).ravel()

    def is_even(self, tol: float = 1e-9) -> bool:
        """True when the pattern is symmetric under t -> period - t."""
        t = self.times_in_period
        if t.size == 0:
            return True
        mirrored = np.sort((self.period - t) % self.period)
        return bool(np.allclose(np.sort(t), mirrored, atol=tol * self.period))

    def to_csv(self) -> str:
        lines = ["pulse_index,time_in_period_s"]
        for i, t in enumerate(self.times_in_period):
            lines.append(f"{i},{t:.17g}")
        return "\n".join(lines) + "\n"


def sequence_from_csv(text: str, period: float, repetitions: int) -> PulseSequence:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "pulse_index,time_in_period_s":
        raise ValueError("bad sequence CSV header")
    times = [float(ln.split(",")[1]) for ln in lines[1:]]
    return PulseSequence(period, np.array(times), repetitions)


def modulation(seq: PulseSequence, t: float) -> int:
    """F(t): +1 iff an even number of pulses occurred in [0, t]."""
    if t < 0:
        raise ValueError("t must be non-negative")
    n_full, rem = divmod(t, seq.period)
    count = int(n_full) * seq.pulses_per_period
    count += int(np.searchsorted(seq.times_in_period, rem, side="right"))
    return +1 if count % 2 == 0 else -1


def fourier_coeff(seq: PulseSequence, k: int) -> float:
    """Cosine-series coefficient f_k of F(t), closed form from flip times."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not seq.is_even():
        raise NotEven("pulse pattern is not symmetric in the period")
    t = seq.times_in_period
    if t.size == 0:
        return 0.0
    signs = (-1.0) ** np.arange(t.size)
    return float(2.0 / (k * np.pi) * np.sum(signs * np.sin(k * seq.omega_dd * t)))


def cpmg_coefficient(k: int) -> float:
    """4 sin(k pi / 2) / (k pi)."""
    return 4.0 / (k * np.pi) * np.sin(k * np.pi / 2.0)


def make_cpmg(period: float, repetitions: int) -> PulseSequence:
    """Equally spaced pair per period: pulses at tau/4 and 3 tau/4."""
    times = np.array([period / 4.0, 3.0 * period / 4.0])
    return PulseSequence(period, times, repetitions, phases=("x", "x"),
                         label="cpmg")


def make_xy8(period: float, repetitions: int) -> PulseSequence:
    """Same pulse times as CPMG; alternating phase labels (metadata only)."""
    times = np.array([period / 4.0, 3.0 * period / 4.0])
    return PulseSequence(period, times, repetitions, phases=("x", "y"),
                         label="xy8")


def _composite_g(k: float, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Harmonic factor of the 5-pulse composite pair: f_k = f_k^CPMG * g(k)."""
    return 2.0 * np.cos(k * x2) - 2.0 * np.cos(k * x1) + 1.0


def _axy_times(period: float, x1: float, x2: float) -> np.ndarray:
    scale = period / TWO_PI
    offsets = np.array([-x2, -x1, 0.0, x1, x2]) * scale
    return np.concatenate([period / 4.0 + offsets, 3.0 * period / 4.0 + offsets])


@lru_cache(maxsize=4096)
def solve_axy_offsets(f_target: float, k_dd: int,
                      zero_harmonic: Optional[int] = None) -> tuple[float, float]:
    """Intra-composite phase offsets (x1, x2) hitting the target harmonic.

    Solves g(k_dd) = target / cpmg(k_dd) together with g(zero) = 0, on a
    deterministic coarse grid followed by a local root polish.
    """
    if k_dd < 1 or k_dd % 2 == 0:
        raise ValueError("k_dd must be odd and positive")
    if zero_harmonic is None:
        zero_harmonic = 3 if k_dd != 3 else 1
    if zero_harmonic == k_dd:
        raise ValueError("cannot zero the targeted harmonic")
    g_target = f_target / cpmg_coefficient(k_dd)

    def residual(x):
        x1, x2 = x
        return [_composite_g(k_dd, x1, x2) - g_target,
                _composite_g(zero_harmonic, x1, x2)]

    # dense deterministic grid; resolution follows the fastest harmonic
    n = max(301, 6 * k_dd + 1)
    eps = 1e-4
    grid = np.linspace(eps, np.pi / 2.0 - eps, n)
    g1, g2 = np.meshgrid(grid, grid, indexing="ij")
    r = ((_composite_g(k_dd, g1, g2) - g_target) ** 2
         + _composite_g(zero_harmonic, g1, g2) ** 2)
    # keep a valid ordering x1 < x2
    r = np.where(g1 < g2, r, np.inf)
    i0 = np.unravel_index(np.argmin(r), r.shape)
    x0 = np.array([g1[i0], g2[i0]])

    sol = optimize.root(residual, x0, method="hybr", tol=1e-14)
    x1, x2 = sol.x
    ok = (sol.success and 0.0 < x1 < x2 < np.pi / 2.0
          and max(abs(np.asarray(residual((x1, x2))))) < 1e-8)
    if not ok:
        # grid fallback: polish the best few candidates
        flat = np.argsort(r, axis=None)[:20]
        for idx in flat:
            i, j = np.unravel_index(idx, r.shape)
            sol = optimize.root(residual, [g1[i, j], g2[i, j]], method="hybr",
                                tol=1e-14)
            x1, x2 = sol.x
            if (sol.success and 0.0 < x1 < x2 < np.pi / 2.0
                    and max(abs(np.asarray(residual((x1, x2))))) < 1e-8):
                ok = True
                break
    if not ok:
        raise Unachievable(
            f"no composite offsets reach f_{k_dd} = {f_target:+.5f} "
            f"with f_{zero_harmonic} = 0")
    return float(x1), float(x2)


def make_axy(period: float, f_target: float, k_dd: int, repetitions: int,
             zero_harmonic: Optional[int] = None) -> PulseSequence:
    """Two 5-pulse composites per period with tunable f_(k_dd).

    Every even harmonic vanishes by construction; one odd harmonic
    (3 by default, 1 when k_dd = 3) is zeroed by the solver.
    """
    x1, x2 = solve_axy_offsets(f_target, k_dd, zero_harmonic)
    times = _axy_times(period, x1, x2)
    phases = ("x",) * 5 + ("y",) * 5
    return PulseSequence(period, times, repetitions, phases=phases,
                         composite_size=5, label=f"axy_k{k_dd}")


def harmonic_table(seq: PulseSequence, k_max: int = 8) -> list[tuple[int, float]]:
    return [(k, fourier_coeff(seq, k)) for k in range(1, k_max + 1)]
