"""Nuclear-spin sample generation.

Two sources: random 13C occupation of the diamond lattice around an NV
(frame: NV at the origin, +z along the crystallographic [1,1,1]) and
molecules read from XYZ files placed above a surface NV.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .constants import (DIAMOND_LATTICE_CONSTANT, ELEMENT_TO_SPECIES,
                        SPINLESS_ELEMENTS)
from .errors import EmptyRegion, MoleculeParseError, UnknownElement
from .spin_model import NuclearSpin, rotation_aligning, unit

# Conventional diamond cell: FCC translations plus the two-point basis.
# The second sublattice sits at -a/4 (1,1,1) from the first, putting the
# NV's vacancy site on the -[1,1,1] side of the nitrogen at the origin.
_FCC = np.array([[0.0, 0.0, 0.0], [0.0, 0.5, 0.5],
                 [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
_BASIS = np.array([[0.0, 0.0, 0.0], [0.75, 0.75, 0.75]])

# Rotation taking cubic axes to the NV frame (maps [1,1,1]/sqrt3 -> +z).
CUBIC_TO_NV = rotation_aligning(np.array([1.0, 1.0, 1.0]), np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True)
class LatticeRegion:
    """Spherical shell of diamond lattice sites around the NV."""

    r_min: float
    r_max: float
    lattice_constant: float = DIAMOND_LATTICE_CONSTANT

    def __post_init__(self):
        if not (0.0 <= self.r_min < self.r_max):
            raise ValueError("need 0 <= r_min < r_max")


def lattice_sites(region: LatticeRegion) -> np.ndarray:
    """Cubic-frame coordinates (m) of all diamond sites in the shell.

    The NV nitrogen sits at the origin and its vacancy at the bonded
    neighbour along [1,1,1]; both sites are excluded.  Site order is
    deterministic (sorted by integer cell index and basis index).
    """
    a = region.lattice_constant
    n_max = int(np.ceil(region.r_max / a)) + 1
    rng_idx = np.arange(-n_max, n_max + 1)
    ii, jj, kk = np.meshgrid(rng_idx, rng_idx, rng_idx, indexing="ij")
    cells = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1).astype(float)
    # fractional positions: cell + fcc + basis
    frac = (cells[:, None, None, :] + _FCC[None, :, None, :]
            + _BASIS[None, None, :, :]).reshape(-1, 3)
    pos = frac * a
    r = np.linalg.norm(pos, axis=1)
    vacancy = _BASIS[1] * a
    on_nv = (r < 0.25 * a) | (np.linalg.norm(pos - vacancy, axis=1) < 0.25 * a)
    keep = (r >= region.r_min) & (r <= region.r_max) & ~on_nv & (r > 0)
    pos = pos[keep]
    # sort for a reproducible draw order
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0]))
    return pos[order]


def gen_diamond_sample(region: LatticeRegion, abundance: float,
                       seed: int) -> list[NuclearSpin]:
    """Independent Bernoulli occupation of each shell site with 13C.

    Deterministic for a fixed seed; positions returned in the NV frame
    (+z = [1,1,1]).
    """
    if not 0.0 <= abundance <= 1.0:
        raise ValueError("abundance must be in [0, 1]")
    sites = lattice_sites(region)
    if len(sites) == 0:
        raise EmptyRegion(f"no lattice sites with {region.r_min} <= r <= {region.r_max}")
    rng = np.random.Generator(np.random.PCG64(seed))
    occupied = rng.random(len(sites)) < abundance
    nv_frame = sites[occupied] @ CUBIC_TO_NV.T
    return [NuclearSpin("13C", p) for p in nv_frame]


def site_count(region: LatticeRegion) -> int:
    return len(lattice_sites(region))


@dataclass(frozen=True)
class MoleculeSpec:
    """Placement of a rigid molecule in the NV frame.

    rotation/translation act on the file coordinates; cubic_axes=True
    means the file frame uses crystal cubic axes with the NV axis along
    [1,1,1] (the extra cubic->NV rotation is applied last).
    """

    rotation: np.ndarray = None
    translation: np.ndarray = None
    nv_depth: float = 0.0
    cubic_axes: bool = False

    def __post_init__(self):
        rot = np.eye(3) if self.rotation is None else np.asarray(self.rotation, float)
        tr = np.zeros(3) if self.translation is None else np.asarray(self.translation, float)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-10) or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be a proper rigid rotation")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        p = xyz @ self.rotation.T + self.translation
        if self.cubic_axes:
            p = p @ CUBIC_TO_NV.T
        if self.nv_depth:
            p = p + self.nv_depth * np.array([0.0, 0.0, 1.0])
        return p


def parse_xyz(text: str) -> list[tuple[str, np.ndarray]]:
    """Parse XYZ-format text: count line, comment line, 'El x y z' in angstrom."""
    lines = text.splitlines()
    if not lines:
        raise MoleculeParseError("empty file")
    try:
        count = int(lines[0].split()[0])
    except (IndexError, ValueError):
        raise MoleculeParseError("first line must hold the atom count")
    if len(lines) < 2 + count:
        raise MoleculeParseError(f"expected {count} atom lines, file too short")
    atoms = []
    for ln in lines[2:2 + count]:
        parts = ln.split()
        if len(parts) < 4:
            raise MoleculeParseError(f"bad atom line: {ln!r}")
        try:
            xyz = np.array([float(parts[1]), float(parts[2]), float(parts[3])])
        except ValueError:
            raise MoleculeParseError(f"non-numeric coordinate in: {ln!r}")
        if not np.all(np.isfinite(xyz)):
            raise MoleculeParseError(f"non-finite coordinate in: {ln!r}")
        atoms.append((parts[0], xyz * 1e-10))  # angstrom -> m
    return atoms


def load_molecule(source, spec: MoleculeSpec = MoleculeSpec()) -> list[NuclearSpin]:
    """Read an XYZ file and return the spin-active nuclei in the NV frame.

    Spinless elements (12C, 16O, ...) are skipped; an unregistered symbol
    raises UnknownElement.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r") as fh:
            text = fh.read()
    atoms = parse_xyz(text)
    spins = []
    for element, xyz in atoms:
        if element in SPINLESS_ELEMENTS:
            continue
        species = ELEMENT_TO_SPECIES.get(element)
        if species is None:
            raise UnknownElement(f"element {element!r} not registered")
        spins.append(NuclearSpin(species, spec.apply(xyz)))
    return spins


def mirror_molecule(spins: Sequence[NuclearSpin],
                    plane_normal: np.ndarray = (1.0, 0.0, 0.0),
                    plane_point: np.ndarray = (0.0, 0.0, 0.0)) -> list[NuclearSpin]:
    """Reflect every position through the stated plane (chirality tests)."""
    if len(spins) == 0:
        raise ValueError("empty spin list")
    n = unit(np.asarray(plane_normal, float))
    p0 = np.asarray(plane_point, float)
    out = []
    for s in spins:
        d = np.dot(s.position - p0, n)
        out.append(NuclearSpin(s.species, s.position - 2.0 * d * n))
    return out


def superposition_rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """RMSD of point sets after optimal proper-rotation + translation.

    Proper rotations only, so mirror images keep a nonzero residual.
    """
    from scipy.spatial.transform import Rotation

    a = np.asarray(a, float)
    b = np.asarray(b, float)
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    rot, _ = Rotation.align_vectors(ac, bc)
    resid = ac - rot.apply(bc)
    return float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))


def sample_to_csv(spins: Iterable[NuclearSpin]) -> str:
    """CSV export: species,x_nm,y_nm,z_nm."""
    lines = ["species,x_nm,y_nm,z_nm"]
    for s in spins:
        x, y, z = s.position * 1e9
        lines.append(f"{s.species},{x:.12g},{y:.12g},{z:.12g}")
    return "\n".join(lines) + "\n"


def sample_from_csv(text: str) -> list[NuclearSpin]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != "species,x_nm,y_nm,z_nm":
        raise MoleculeParseError("bad sample CSV header")
    spins = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise MoleculeParseError(f"bad sample row: {ln!r}")
        pos = np.array([float(p) for p in parts[1:]]) * 1e-9
        spins.append(NuclearSpin(parts[0], pos))
    return spins
