"""NV-center coherence simulator and 3D nuclear-spin reconstruction toolkit.

Internal units (everywhere unless a name says otherwise):

- Length: meter
- Time: second
- Magnetic field: tesla
- Frequencies / couplings: angular frequency, rad/s

User-facing I/O (CLI, CSV) uses ordinary frequency (Hz/kHz), gauss or
tesla for fields and nm for lengths; the 2*pi conversion happens only at
that boundary.
"""

from . import constants, spin_model, sample_gen, pulse_seq, rf_control
from . import dynamics, cluster_expansion, protocol

__version__ = "0.1.0"

__all__ = [
    "constants",
    "spin_model",
    "sample_gen",
    "pulse_seq",
    "rf_control",
    "dynamics",
    "cluster_expansion",
    "protocol",
]
