"""Spectral fields on the 2-D periodic square.

State is held as complex Fourier coefficients over the full wavenumber
square (numpy FFT layout), normalized so that

    values(x) = sum_k coeffs[k] * exp(i k.x),   k = (2*pi/L) * m

with integer mode vectors m.  Real fields keep Hermitian symmetry
coeffs[-m] == conj(coeffs[m]).  An internal half-spectrum layout
(rfft2, last axis truncated to n//2+1) is used by the time stepper;
helpers here convert between the two.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

TAU = 2.0 * math.pi

_SNAPSHOT_MAGIC = b"NKF1"
_KIND_VORTICITY = 0
_KIND_VELOCITY = 1


@dataclass(frozen=True)
class GridSpec:
    """Uniform n x n grid on [0, L)^2 with a spectral dealias rule."""

    n: int
    length: float = TAU
    dealias_fraction: float = 2.0 / 3.0
    dealias_shape: str = "square"

    def __post_init__(self):
        if self.n < 8 or self.n % 2 != 0:
            raise ValueError(f"grid size must be even and >= 8, got {self.n}")
        if not self.length > 0:
            raise ValueError(f"domain length must be positive, got {self.length}")
        if not 0.0 < self.dealias_fraction <= 1.0:
            raise ValueError(
                f"dealias fraction must lie in (0, 1], got {self.dealias_fraction}"
            )
        if self.dealias_shape not in ("square", "circular"):
            raise ValueError(f"unknown dealias shape {self.dealias_shape!r}")

    @property
    def k0(self) -> float:
        """Smallest positive wavenumber 2*pi/L."""
        return TAU / self.length

    @property
    def poincare_lambda1(self) -> float:
        """Smallest eigenvalue of the Stokes operator, (2*pi/L)^2."""
        return self.k0 ** 2


class GridTables:
    """Precomputed wavenumber arrays for one GridSpec.

    Full layout: shape (n, n), axis 0 is x-modes in fftfreq order, axis 1
    is y-modes.  Half layout: shape (n, n//2 + 1), y-modes 0..n/2 only.
    """

    def __init__(self, spec: GridSpec):
        n = spec.n
        k0 = spec.k0
        m = np.fft.fftfreq(n, d=1.0 / n)  # 0, 1, ..., n/2-1, -n/2, ..., -1
        mh = np.arange(n // 2 + 1, dtype=float)

        self.spec = spec
        self.kx = (k0 * m)[:, None]          # (n, 1)
        self.ky = (k0 * m)[None, :]          # (1, n)
        self.ksq = self.kx ** 2 + self.ky ** 2
        with np.errstate(divide="ignore"):
            inv = 1.0 / self.ksq
        inv[0, 0] = 0.0
        self.inv_ksq = inv

        self.hkx = self.kx                   # (n, 1), same x-modes
        self.hky = (k0 * mh)[None, :]        # (1, n//2+1)
        self.hksq = self.hkx ** 2 + self.hky ** 2
        with np.errstate(divide="ignore"):
            hinv = 1.0 / self.hksq
        hinv[0, 0] = 0.0
        self.hinv_ksq = hinv

        # Norm sums over the half layout count interior columns twice.
        w = np.full(n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        self.half_weights = w[None, :]

        cut = spec.dealias_fraction * (n // 2)
        absm = np.abs(m)
        if spec.dealias_shape == "square":
            self.dealias_mask = (np.maximum(absm[:, None], absm[None, :]) <= cut)
            self.half_dealias_mask = (np.maximum(absm[:, None], mh[None, :]) <= cut)
        else:
            rsq = absm[:, None] ** 2 + absm[None, :] ** 2
            hrsq = absm[:, None] ** 2 + mh[None, :] ** 2
            self.dealias_mask = rsq <= cut ** 2
            self.half_dealias_mask = hrsq <= cut ** 2

        # Index maps for reconstructing the redundant half of the spectrum.
        self._rows_flip = (-np.arange(n)) % n
        self._cols_tail = np.arange(n // 2 - 1, 0, -1)


@lru_cache(maxsize=128)
def tables(spec: GridSpec) -> GridTables:
    return GridTables(spec)


# ---------------------------------------------------------------------------
# field containers


def _as_coeffs(arr, shape) -> np.ndarray:
    a = np.asarray(arr, dtype=np.complex128)
    if a.shape != shape:
        raise ValueError(f"expected coefficient array of shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class SpectralVorticityField:
    """Scalar vorticity in spectral form, coeffs shape (n, n)."""

    spec: GridSpec
    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "coeffs", _as_coeffs(self.coeffs, (self.spec.n, self.spec.n))
        )


@dataclass(frozen=True)
class SpectralVelocityField:
    """Velocity 2-vector in spectral form, coeffs shape (2, n, n)."""

    spec: GridSpec
    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "coeffs", _as_coeffs(self.coeffs, (2, self.spec.n, self.spec.n))
        )


@dataclass(frozen=True)
class PhysicalField:
    """Grid values, shape (n, n) for scalars or (2, n, n) for velocities."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        n = self.spec.n
        if v.shape not in ((n, n), (2, n, n)):
            raise ValueError(f"bad physical field shape {v.shape} for n={n}")
        object.__setattr__(self, "values", v)

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == 3


# ---------------------------------------------------------------------------
# transforms


def coeffs_to_values(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Full-spectrum coefficients -> real grid values (last two axes)."""
    half = np.ascontiguousarray(coeffs[..., : n // 2 + 1])
    return np.fft.irfft2(half, s=(n, n)) * (n * n)


def values_to_coeffs(values: np.ndarray) -> np.ndarray:
    """Real grid values -> full-spectrum coefficients, exactly Hermitian."""
    n = values.shape[-1]
    half = np.fft.rfft2(values) / (n * n)
    return half_to_full(half, n)


def half_to_full(half: np.ndarray, n: int) -> np.ndarray:
    """Expand rfft2-layout coefficients to the full square by symmetry."""
    shape = half.shape[:-2] + (n, n)
    full = np.zeros(shape, dtype=np.complex128)
    full[..., :, : n // 2 + 1] = half
    t = tables_for_n(n)
    full[..., :, n // 2 + 1 :] = np.conj(
        half[..., t._rows_flip, :][..., :, t._cols_tail]
    )
    return full


def full_to_half(coeffs: np.ndarray, n: int) -> np.ndarray:
    return np.ascontiguousarray(coeffs[..., :, : n // 2 + 1])


@lru_cache(maxsize=128)
def tables_for_n(n: int) -> GridTables:
    return tables(GridSpec(n=n))


def transform(field):
    """Map a field to the other representation (physical <-> spectral).

    Physical scalars become vorticity coefficients, physical 2-vectors
    become velocity coefficients.
    """
    if isinstance(field, PhysicalField):
        c = values_to_coeffs(field.values)
        if field.is_vector:
            return SpectralVelocityField(field.spec, c)
        return SpectralVorticityField(field.spec, c)
    if isinstance(field, (SpectralVorticityField, SpectralVelocityField)):
        return PhysicalField(field.spec, coeffs_to_values(field.coeffs, field.spec.n))
    raise TypeError(f"cannot transform object of type {type(field).__name__}")


# ---------------------------------------------------------------------------
# operators


def hermitian_defect(coeffs: np.ndarray) -> float:
    """Max |c[-m] - conj(c[m])|, zero for coefficients of a real field."""
    n = coeffs.shape[-1]
    flipped = coeffs[..., (-np.arange(n)) % n, :][..., :, (-np.arange(n)) % n]
    return float(np.max(np.abs(flipped - np.conj(coeffs))))


def leray_project(u: SpectralVelocityField) -> SpectralVelocityField:
    """Remove the gradient part and the mean: mode-wise (I - k k^T/|k|^2)."""
    t = tables(u.spec)
    c = u.coeffs
    div = t.kx * c[0] + t.ky * c[1]  # i omitted, common factor
    out = np.empty_like(c)
    out[0] = c[0] - t.kx * div * t.inv_ksq
    out[1] = c[1] - t.ky * div * t.inv_ksq
    out[:, 0, 0] = 0.0
    return SpectralVelocityField(u.spec, out)


def divergence_defect(u: SpectralVelocityField) -> float:
    """Max over modes of |k.u_k| / (|k| |u_k|), zero modes skipped."""
    t = tables(u.spec)
    num = np.abs(t.kx * u.coeffs[0] + t.ky * u.coeffs[1])
    den = np.sqrt(t.ksq) * np.sqrt(
        np.abs(u.coeffs[0]) ** 2 + np.abs(u.coeffs[1]) ** 2
    )
    mask = den > 0
    if not mask.any():
        return 0.0
    return float(np.max(num[mask] / den[mask]))


def sobolev_norm(field, alpha: float) -> float:
    """V_alpha norm: (L^2 * sum_{k!=0} |k|^(2 alpha) |c_k|^2)^(1/2).

    Velocity fields sum both components; the k = 0 mode is excluded
    (fields are mean-free in context).
    """
    if isinstance(field, SpectralVelocityField):
        mag = np.abs(field.coeffs[0]) ** 2 + np.abs(field.coeffs[1]) ** 2
    elif isinstance(field, SpectralVorticityField):
        mag = np.abs(field.coeffs) ** 2
    else:
        raise TypeError("sobolev_norm expects a spectral field")
    t = tables(field.spec)
    ksq = t.ksq.copy()
    ksq[0, 0] = 1.0  # excluded below, avoid 0**negative
    w = ksq ** alpha
    w[0, 0] = 0.0
    s = float(np.sum(w * mag))
    return field.spec.length * math.sqrt(s)


def velocity_from_vorticity(w: SpectralVorticityField) -> SpectralVelocityField:
    """Biot-Savart: u_k = i (k_y, -k_x) w_k / |k|^2, zero mean flow."""
    t = tables(w.spec)
    psi = w.coeffs * t.inv_ksq  # stream-like scalar w_k/|k|^2
    u = np.empty((2, w.spec.n, w.spec.n), dtype=np.complex128)
    u[0] = 1j * t.ky * psi
    u[1] = -1j * t.kx * psi
    return SpectralVelocityField(w.spec, u)


def vorticity_from_velocity(u: SpectralVelocityField) -> SpectralVorticityField:
    """Scalar curl: w_k = i (k_x u_y - k_y u_x)."""
    t = tables(u.spec)
    w = 1j * (t.kx * u.coeffs[1] - t.ky * u.coeffs[0])
    return SpectralVorticityField(u.spec, w)


def dealias(field):
    """Zero coefficients outside the retained band (2/3 rule by default)."""
    t = tables(field.spec)
    out = field.coeffs * t.dealias_mask
    return type(field)(field.spec, out)


def retained_mode_count(spec: GridSpec) -> int:
    """Number of nonzero wavenumbers kept by the dealias rule."""
    t = tables(spec)
    return int(t.dealias_mask.sum()) - 1  # k = 0 carries no dynamics


def energy_spectrum(u: SpectralVelocityField):
    """Shell-summed kinetic energy E(j) over integer shells j = round(|m|)."""
    t = tables(u.spec)
    mag = np.abs(u.coeffs[0]) ** 2 + np.abs(u.coeffs[1]) ** 2
    shells = np.rint(np.sqrt(t.ksq) / u.spec.k0).astype(int)
    nsh = shells.max() + 1
    spec_e = np.zeros(nsh)
    np.add.at(spec_e, shells.ravel(), (0.5 * u.spec.length ** 2 * mag).ravel())
    return np.arange(nsh), spec_e


def random_vorticity_with_spectrum(
    spec: GridSpec, rng, peak: float = 4.0, amplitude: float = 1.0
) -> SpectralVorticityField:
    """Random-phase vorticity with velocity spectrum E(k) ~ k exp(-(k/peak)^2).

    Dealiased, zero-mean, normalized so the velocity's L2 norm equals
    amplitude.  Deterministic for a given generator state.
    """
    t = tables(spec)
    noise = values_to_coeffs(rng.standard_normal((spec.n, spec.n)))
    env = np.sqrt(t.ksq) * np.exp(-t.ksq / (2.0 * (peak * spec.k0) ** 2))
    c = noise * env * t.dealias_mask
    c[0, 0] = 0.0
    w = SpectralVorticityField(spec, c)
    scale = sobolev_norm(w, -1.0)  # velocity L2 norm
    if scale > 0.0:
        w = SpectralVorticityField(spec, c * (amplitude / scale))
    return w


# ---------------------------------------------------------------------------
# snapshot files

_HEADER = struct.Struct("<4sIdB")  # magic, n, L, kind


def write_snapshot(path, field) -> None:
    """Write a spectral field: NKF1 header then raw little-endian complex128."""
    if isinstance(field, SpectralVorticityField):
        kind = _KIND_VORTICITY
    elif isinstance(field, SpectralVelocityField):
        kind = _KIND_VELOCITY
    else:
        raise TypeError("snapshots hold spectral fields only")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_SNAPSHOT_MAGIC, field.spec.n, field.spec.length, kind))
        fh.write(np.ascontiguousarray(field.coeffs, dtype="<c16").tobytes())


def read_snapshot(path, spec: GridSpec | None = None):
    """Read a snapshot; `spec` may override dealias settings (n, L must match)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated snapshot header")
        magic, n, length, kind = _HEADER.unpack(head)
        if magic != _SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        raw = fh.read()
    if spec is None:
        spec = GridSpec(n=n, length=length)
    elif spec.n != n or spec.length != length:
        raise ValueError(f"{path}: snapshot is n={n}, L={length}, spec disagrees")
    shape = (n, n) if kind == _KIND_VORTICITY else (2, n, n)
    want = int(np.prod(shape)) * 16
    if len(raw) != want:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, expected {want}")
    c = np.frombuffer(raw, dtype="<c16").astype(np.complex128).reshape(shape)
    if kind == _KIND_VORTICITY:
        return SpectralVorticityField(spec, c)
    if kind == _KIND_VELOCITY:
        return SpectralVelocityField(spec, c)
    raise ValueError(f"{path}: unknown field kind {kind}")
