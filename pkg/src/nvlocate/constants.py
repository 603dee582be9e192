"""Physical constants and the nuclear species registry.

All gyromagnetic ratios are stored as positive magnitudes in rad s^-1 T^-1;
sign conventions live in the formulas that consume them, not here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

# CODATA-2018 values.
MU0_OVER_4PI = 1.0e-7            # T m / A
HBAR = 1.054571817e-34           # J s
GAMMA_E = 1.76085963023e11       # rad / s / T, electron (magnitude)
ZERO_FIELD_SPLITTING = TWO_PI * 2.87e9   # rad / s

# Nuclear gyromagnetic ratios, rad / s / T (magnitudes).
GAMMA_NUCLEAR = {
    "13C": 6.728284e7,
    "1H": 2.6752218744e8,
}

# Elements whose dominant isotope is spin-inactive; skipped when loading
# molecule files at natural abundance.
SPINLESS_ELEMENTS = {"C", "O", "S", "Si"}

# Element symbol -> spin-1/2 species detected at natural abundance.
ELEMENT_TO_SPECIES = {"H": "1H"}

DIAMOND_LATTICE_CONSTANT = 3.567e-10   # m, conventional cubic cell
CARBON_NN_DISTANCE = 1.54e-10          # m, nearest-neighbour C-C distance


@dataclass(frozen=True)
class PhysicalConstants:
    """Constant set used by the spin model; all entries strictly positive."""

    mu0_over_4pi: float = MU0_OVER_4PI
    hbar: float = HBAR
    gamma_e: float = GAMMA_E
    zero_field_splitting: float = ZERO_FIELD_SPLITTING
    gamma_nuclear: dict = field(default_factory=lambda: dict(GAMMA_NUCLEAR))

    def gamma(self, species: str) -> float:
        try:
            return self.gamma_nuclear[species]
        except KeyError:
            raise KeyError(f"no gyromagnetic ratio registered for {species!r}")


CONSTANTS = PhysicalConstants()


def gamma_of(species: str) -> float:
    """Gyromagnetic ratio magnitude of a registered species, rad/s/T."""
    return CONSTANTS.gamma(species)
