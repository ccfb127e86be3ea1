"""Velocity observations by local averaging, and their smoothed reconstruction.

Measurements are ball averages of the velocity at a square array of
centers.  Reconstruction is piecewise constant on the cells of that
array; composing with the Leray projection and a spectral low-pass
gives the band-limited observation operator fed to the assimilation
schemes (a smoothed type-I interpolant).  All maps here are linear.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from nudgekit import spectral
from nudgekit.spectral import (
    GridSpec,
    PhysicalField,
    SpectralVelocityField,
    SpectralVorticityField,
)


@dataclass(frozen=True)
class ObservationGeometry:
    """Square array of averaging balls on a periodic grid.

    Centers sit at the midpoints of a points_per_side^2 tiling of the
    domain, snapped to grid indices by round-to-nearest.  radius_sq is
    the squared ball radius in grid units; None scales the reference
    value 24 (at n = 512) by (n/512)^2.
    """

    grid: GridSpec
    points_per_side: int = 9
    radius_sq: int | None = None

    def __post_init__(self):
        if self.points_per_side < 1:
            raise ValueError("points_per_side must be at least 1")
        if self.grid.n < self.points_per_side:
            raise ValueError(
                f"grid n = {self.grid.n} cannot host "
                f"{self.points_per_side}^2 observation cells"
            )
        if self.radius_sq is not None and self.radius_sq < 0:
            raise ValueError("radius_sq must be nonnegative")

    @property
    def count(self) -> int:
        return self.points_per_side ** 2

    @property
    def radius_sq_resolved(self) -> int:
        if self.radius_sq is not None:
            return self.radius_sq
        return round(24.0 * (self.grid.n / 512.0) ** 2)

    @cached_property
    def centers_x(self) -> np.ndarray:
        """Physical center coordinates, shape (count, 2), axis-0 major."""
        P = self.points_per_side
        mid = (2.0 * np.arange(P) + 1.0) * self.grid.length / (2.0 * P)
        c1, c2 = np.meshgrid(mid, mid, indexing="ij")
        return np.column_stack([c1.ravel(), c2.ravel()])

    @cached_property
    def centers_index(self) -> np.ndarray:
        """Grid indices p_i = floor(x_i n/L + 0.5), shape (count, 2)."""
        g = self.grid
        idx = np.floor(self.centers_x * g.n / g.length + 0.5).astype(np.int64)
        return idx % g.n

    @cached_property
    def ball_offsets(self) -> np.ndarray:
        """Integer offsets with |d|^2 <= radius_sq, shape (ball_size, 2)."""
        rsq = self.radius_sq_resolved
        r = int(np.sqrt(rsq))
        d = np.arange(-r, r + 1)
        d1, d2 = np.meshgrid(d, d, indexing="ij")
        keep = d1 ** 2 + d2 ** 2 <= rsq
        return np.column_stack([d1[keep], d2[keep]])

    @property
    def ball_size(self) -> int:
        return len(self.ball_offsets)

    @property
    def coverage(self) -> float:
        """Fraction of grid points inside some ball (balls may overlap)."""
        return self.count * self.ball_size / self.grid.n ** 2

    @cached_property
    def ball_rows(self) -> np.ndarray:
        return (self.centers_index[:, :1] + self.ball_offsets[None, :, 0]) % self.grid.n

    @cached_property
    def ball_cols(self) -> np.ndarray:
        return (self.centers_index[:, 1:] + self.ball_offsets[None, :, 1]) % self.grid.n

    @cached_property
    def cell_map(self) -> np.ndarray:
        """Cell index of every grid point, shape (n, n); half-open cells."""
        axis = np.arange(self.grid.n, dtype=np.int64) * self.points_per_side // self.grid.n
        return axis[:, None] * self.points_per_side + axis[None, :]


@dataclass(frozen=True)
class ObservationVector:
    """One batch of averaged velocities, shape (count, 2)."""

    geometry: ObservationGeometry
    values: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        want = (self.geometry.count, 2)
        if self.values.shape != want:
            raise ValueError(
                f"observation values have shape {self.values.shape}, expected {want}"
            )


@dataclass(frozen=True)
class InterpolantConfig:
    """Reconstruction settings: low-pass cutoff and bound bookkeeping.

    lambda_cut keeps modes with 0 < |k|^2 <= lambda_cut.  h is the cell
    side, the resolution the observation array can represent.
    """

    geometry: ObservationGeometry
    lambda_cut: float = 81.0

    def __post_init__(self):
        if not self.lambda_cut > 0:
            raise ValueError(f"lambda_cut must be positive, got {self.lambda_cut}")

    @property
    def h(self) -> float:
        return self.geometry.grid.length / self.geometry.points_per_side


# ---------------------------------------------------------------------------
# observation and reconstruction


def observe(
    u: PhysicalField, geometry: ObservationGeometry, averaging: str = "ball"
) -> ObservationVector:
    """Average the velocity over each ball (or cell, consistency mode)."""
    if not u.is_vector:
        raise ValueError("observe expects a velocity field")
    if u.spec != geometry.grid:
        raise ValueError("field grid does not match observation geometry")
    if averaging == "ball":
        vals = u.values[:, geometry.ball_rows, geometry.ball_cols].mean(axis=2).T
    elif averaging == "square":
        k = geometry.count
        flat = geometry.cell_map.ravel()
        counts = np.bincount(flat, minlength=k).astype(float)
        vals = np.empty((k, 2))
        for c in range(2):
            vals[:, c] = np.bincount(flat, weights=u.values[c].ravel(), minlength=k)
        vals /= counts[:, None]
    else:
        raise ValueError(f"unknown averaging mode {averaging!r}")
    return ObservationVector(geometry, vals)


def interpolate(obs: ObservationVector) -> PhysicalField:
    """Piecewise-constant field: every point takes its cell's average."""
    geom = obs.geometry
    vals = obs.values[geom.cell_map]  # (n, n, 2)
    return PhysicalField(geom.grid, np.ascontiguousarray(np.moveaxis(vals, 2, 0)))


def spectral_filter(field, lambda_cut: float):
    """Keep modes with 0 < |k|^2 <= lambda_cut; zero the rest and the mean."""
    if not lambda_cut > 0:
        raise ValueError(f"lambda_cut must be positive, got {lambda_cut}")
    t = spectral.tables(field.spec)
    mask = (t.ksq > 0) & (t.ksq <= lambda_cut)
    return type(field)(field.spec, field.coeffs * mask)


def filtered_interpolant(u, config: InterpolantConfig) -> SpectralVelocityField:
    """Band-limited, divergence-free reconstruction from the local averages.

    The composition spectral_filter(leray(transform(interpolate(observe(u))))).
    Accepts a physical or spectral velocity field.
    """
    if isinstance(u, SpectralVelocityField):
        u = spectral.transform(u)
    obs = observe(u, config.geometry)
    rec = spectral.transform(interpolate(obs))
    return spectral_filter(spectral.leray_project(rec), config.lambda_cut)


# ---------------------------------------------------------------------------
# half-spectrum fast path for the assimilation loop


class HalfSpectrumObserver:
    """Observation operator in vorticity form on the solver's half spectrum.

    curl(P_lambda P_H I_h u) = P_lambda curl(I_h u): the projection is
    absorbed by the curl, so the pipeline is two inverse transforms,
    the ball means, the cell field, two forward transforms, a curl and
    a band mask.  The mask is intersected with the dealias band so the
    output is always a legal solver state.
    """

    def __init__(self, config: InterpolantConfig):
        self.config = config
        g = config.geometry.grid
        t = spectral.tables(g)
        self._n = g.n
        self._bs1 = 1j * t.hky * t.hinv_ksq
        self._bs2 = -1j * t.hkx * t.hinv_ksq
        self._gx = 1j * t.hkx
        self._gy = 1j * t.hky
        band = (t.hksq > 0) & (t.hksq <= config.lambda_cut)
        self._mask = band & t.half_dealias_mask
        self._inv_n2 = 1.0 / float(g.n) ** 2

    def velocity_values(self, wh: np.ndarray) -> np.ndarray:
        """Physical velocity (2, n, n) of a half-spectrum vorticity state."""
        s = (self._n, self._n)
        return np.stack(
            [
                np.fft.irfft2(self._bs1 * wh, s=s),
                np.fft.irfft2(self._bs2 * wh, s=s),
            ]
        ) * float(self._n) ** 2

    def ball_means(self, wh: np.ndarray) -> np.ndarray:
        """Observed averages (count, 2) of a half-spectrum vorticity state."""
        geom = self.config.geometry
        uvals = self.velocity_values(wh)
        return uvals[:, geom.ball_rows, geom.ball_cols].mean(axis=2).T

    def values_to_vorticity(self, uvals: np.ndarray, averaging="ball") -> np.ndarray:
        """Observe a physical velocity, reconstruct, return curl (half)."""
        geom = self.config.geometry
        if averaging != "ball":
            raise ValueError("fast path supports ball averaging only")
        means = uvals[:, geom.ball_rows, geom.ball_cols].mean(axis=2)  # (2, count)
        return self.vector_to_vorticity(means.T)

    def vector_to_vorticity(self, values: np.ndarray) -> np.ndarray:
        """Observed averages (count, 2) -> reconstruction's curl (half)."""
        geom = self.config.geometry
        cells = values[geom.cell_map]  # (n, n, 2)
        f1 = np.fft.rfft2(cells[:, :, 0]) * self._inv_n2
        f2 = np.fft.rfft2(cells[:, :, 1]) * self._inv_n2
        curl = self._gx * f2 - self._gy * f1
        curl *= self._mask
        return curl

    def smoothed_vorticity(self, wh: np.ndarray) -> np.ndarray:
        """J applied to the velocity of state wh, returned in vorticity form."""
        return self.values_to_vorticity(self.velocity_values(wh))


# ---------------------------------------------------------------------------
# empirical interpolation constant


@dataclass(frozen=True)
class Type1Estimate:
    """max |U - P_H I_h U| / (h ||U||) over the sample set."""

    worst_ratio: float
    used: int
    skipped: int
    ratios: tuple

    @property
    def c1(self) -> float:
        return self.worst_ratio ** 2


def estimate_type1_constant(
    sample_count: int,
    config: InterpolantConfig,
    seed: int = 0,
    peak: float = 4.0,
    samples=None,
) -> Type1Estimate:
    """Empirical relative-error constant of the projected reconstruction.

    Ratios are measured on random smooth divergence-free fields unless
    an explicit sample list is given; zero-norm samples are skipped and
    counted.
    """
    if samples is None:
        if sample_count < 1:
            raise ValueError("sample_count must be at least 1")
        rng = np.random.default_rng(seed)
        grid = config.geometry.grid
        samples = [
            spectral.velocity_from_vorticity(
                spectral.random_vorticity_with_spectrum(grid, rng, peak=peak)
            )
            for _ in range(sample_count)
        ]
    h = config.h
    ratios = []
    skipped = 0
    for U in samples:
        denom = spectral.sobolev_norm(U, 1.0)
        if denom == 0.0:
            skipped += 1
            continue
        rec = spectral.leray_project(
            spectral.transform(interpolate(observe(spectral.transform(U),
                                                   config.geometry)))
        )
        diff = SpectralVelocityField(U.spec, U.coeffs - rec.coeffs)
        ratios.append(spectral.sobolev_norm(diff, 0.0) / (h * denom))
    if not ratios:
        raise ValueError(f"all {len(samples)} samples degenerate, no ratio defined")
    return Type1Estimate(max(ratios), len(ratios), skipped, tuple(ratios))


def assembled_constants(
    est: Type1Estimate, config: InterpolantConfig, margin: float = 1.2
):
    """(c1, c2, c3) for the reconstruction bounds, from the estimate.

    c1 carries a safety margin on the sampled worst ratio; c2 and c3
    are the weak and smooth operator bounds
        c2 = (1/lambda + c1 h^2)^(1/2) + lambda_1^(-1/2)
        c3 = (1 + lambda c1 h^2)^(1/2) + 1.
    """
    lam = config.lambda_cut
    lam1 = config.geometry.grid.poincare_lambda1
    c1 = (margin * est.worst_ratio) ** 2
    c2 = math.sqrt(1.0 / lam + c1 * config.h ** 2) + lam1 ** -0.5
    c3 = math.sqrt(1.0 + lam * c1 * config.h ** 2) + 1.0
    return c1, c2, c3


# ---------------------------------------------------------------------------
# serialization

_OBS_MAGIC = b"NKO1"
_OBS_HEAD = struct.Struct("<4sHIdid")


def write_observation_csv(path, obs: ObservationVector):
    geom = obs.geometry
    with open(path, "w") as fh:
        fh.write("i,cx,cy,ux,uy,t\n")
        for i in range(geom.count):
            cx, cy = geom.centers_x[i]
            ux, uy = obs.values[i]
            fh.write(
                f"{i},{cx:.17g},{cy:.17g},{ux:.17g},{uy:.17g},"
                f"{obs.timestamp:.17g}\n"
            )


def read_observation_csv(path, geometry: ObservationGeometry) -> ObservationVector:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[0] != geometry.count:
        raise ValueError(
            f"{path}: {rows.shape[0]} rows for {geometry.count} centers"
        )
    return ObservationVector(geometry, rows[:, 3:5].copy(), float(rows[0, 5]))


def write_observation_binary(path, obs: ObservationVector):
    geom = obs.geometry
    head = _OBS_HEAD.pack(
        _OBS_MAGIC,
        geom.points_per_side,
        geom.grid.n,
        geom.grid.length,
        geom.radius_sq_resolved,
        obs.timestamp,
    )
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(obs.values, dtype="<f8").tobytes())


def read_observation_binary(path, geometry: ObservationGeometry) -> ObservationVector:
    with open(path, "rb") as fh:
        head = fh.read(_OBS_HEAD.size)
        if len(head) != _OBS_HEAD.size:
            raise ValueError(f"{path}: truncated observation header")
        magic, pps, n, length, rsq, t = _OBS_HEAD.unpack(head)
        if magic != _OBS_MAGIC:
            raise ValueError(f"{path}: bad observation magic {magic!r}")
        if (pps, n) != (geometry.points_per_side, geometry.grid.n) or rsq != (
            geometry.radius_sq_resolved
        ):
            raise ValueError(f"{path}: geometry does not match file header")
        raw = fh.read()
    want = geometry.count * 2 * 8
    if len(raw) != want:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, expected {want}")
    values = np.frombuffer(raw, dtype="<f8").astype(float).reshape(geometry.count, 2)
    return ObservationVector(geometry, values, t)
