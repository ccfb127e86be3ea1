"""Data assimilation experiments for 2-D incompressible Navier-Stokes."""

from nudgekit.spectral import (
    GridSpec,
    PhysicalField,
    SpectralVelocityField,
    SpectralVorticityField,
)

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "PhysicalField",
    "SpectralVelocityField",
    "SpectralVorticityField",
    "__version__",
]
