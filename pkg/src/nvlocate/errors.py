"""Exception types raised across the package."""


class NvLocateError(Exception):
    """Base class for all package errors."""


class ZeroRadius(NvLocateError):
    """Position below the point-dipole validity floor."""


class CoincidentSpins(NvLocateError):
    """Two nuclei at zero separation."""


class EmptyRegion(NvLocateError):
    """Lattice shell contains no sites."""


class MoleculeParseError(NvLocateError):
    """Malformed molecule coordinate file."""


class UnknownElement(NvLocateError):
    """Element symbol not in the species registry."""


class NotEven(NvLocateError):
    """Pulse pattern is not symmetric, F(t) has no pure-cosine series."""


class Unachievable(NvLocateError):
    """Requested harmonic amplitude outside the composite-pulse family."""


class RwaViolation(NvLocateError):
    """RF frequency not large against the drive amplitude."""


class DimensionTooLarge(NvLocateError):
    """Cluster Hilbert space exceeds the configured cap."""


class IntegratorFailure(NvLocateError):
    """Propagator construction failed or lost unitarity."""


class NoResonantSpin(NvLocateError):
    """No nucleus within the addressing linewidth of the sequence."""


class FitDiverged(NvLocateError):
    """Least-squares fit did not converge."""


class NoSolution(NvLocateError):
    """Inconsistent inputs to an algebraic solve."""


class FlatResponse(NvLocateError):
    """Phase scan shows no usable depth variation."""


class Indistinguishable(NvLocateError):
    """Sign candidates predict responses closer than the resolution."""


class NoRoot(NvLocateError):
    """Bracketed root-find found no admissible solution."""


class AmbiguousBranch(NvLocateError):
    """More than one (angle, radius) pair fits the coupling ratio."""


class DivisionInstability(NvLocateError):
    """Correlation denominator too close to zero."""


class ConfigError(NvLocateError):
    """Bad or missing run-configuration key."""
