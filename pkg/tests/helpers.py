"""Shared random-field builders for the test suite."""

import numpy as np

from nudgekit import spectral


def random_vorticity(spec, rng, amplitude=1.0, peak=4.0):
    """Band-limited random vorticity with exact Hermitian symmetry.

    Built by shaping white noise in physical space through a smooth
    spectral envelope exp(-(|m|/peak)^2), so all symmetries come from
    the real-to-complex transform itself.
    """
    values = rng.standard_normal((spec.n, spec.n))
    c = spectral.values_to_coeffs(values)
    t = spectral.tables(spec)
    env = np.exp(-t.ksq / (peak * spec.k0) ** 2)
    c = c * env * t.dealias_mask
    c[0, 0] = 0.0
    w = spectral.SpectralVorticityField(spec, c)
    nrm = spectral.sobolev_norm(w, 0.0)
    if nrm > 0:
        w = spectral.SpectralVorticityField(spec, c * (amplitude / nrm))
    return w


def random_velocity(spec, rng, amplitude=1.0, peak=4.0):
    """Divergence-free, mean-free random velocity with |u|_0 = amplitude."""
    w = random_vorticity(spec, rng, amplitude=1.0, peak=peak)
    u = spectral.velocity_from_vorticity(w)
    nrm = spectral.sobolev_norm(u, 0.0)
    if nrm > 0:
        u = spectral.SpectralVelocityField(spec, u.coeffs * (amplitude / nrm))
    return u
