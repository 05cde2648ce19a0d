"""Pseudo-spectral laboratory for the 2D stochastic Boussinesq system.

Base dynamics with degenerate four-mode temperature forcing, the extended
Lagrangian/tangent/projective/Jacobian processes, Lyapunov-exponent
estimation, closed-form bracket fields with finite-difference oracles,
Malliavin Gram probes with the regularized control, and the shear/cellular
steering constructions verified against their closed forms.
"""

__version__ = "0.1.0"

from .spectral import (  # noqa: F401
    GridSpec,
    PhysicalParams,
    ScalarField,
    SpectralState,
    VelocityField,
    biot_savart,
    trig_mode,
    weighted_norm_sq,
)
