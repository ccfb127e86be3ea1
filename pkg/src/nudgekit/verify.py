"""Runtime self-checks: every analytic bound and exactness property the
package relies on, evaluated on freshly drawn random fields.

Each invariant reports a worst observed ratio normalized so that values
at most 1 pass.  Bounds with an empirically calibrated constant estimate
it on one batch of samples (with a safety margin) and test it on a second,
independent batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .assimilation import (
    AssimilationScheme,
    ReferenceRun,
    run_discrete,
    run_nudging,
)
from .config import RunConfig
from .observation import (
    HalfSpectrumObserver,
    assembled_constants,
    estimate_type1_constant,
    filtered_interpolant,
    spectral_filter,
)
from .solver import Solver
from .spectral import (
    SpectralVelocityField,
    random_vorticity_with_spectrum,
    sobolev_norm,
    velocity_from_vorticity,
    vorticity_from_velocity,
)

__all__ = ["InvariantReport", "REGISTRY", "run_all_invariants"]


@dataclass(frozen=True)
class InvariantReport:
    name: str
    samples: int
    worst: float
    passed: bool


def _velocity_samples(cfg: RunConfig, count: int, seed: int):
    rng = np.random.default_rng(seed)
    grid = cfg.params.grid
    peak = cfg.ensemble.spectrum_peak
    return [
        velocity_from_vorticity(
            random_vorticity_with_spectrum(grid, rng, peak=peak)
        )
        for _ in range(count)
    ]


def _report(name: str, samples: int, worst: float) -> InvariantReport:
    return InvariantReport(name, samples, worst, bool(worst <= 1.0))


def check_poincare(cfg: RunConfig) -> InvariantReport:
    """|u| <= lambda_1^{-1/2} ||u|| for mean-free fields."""
    lam1 = cfg.params.grid.poincare_lambda1
    worst = 0.0
    fields = _velocity_samples(cfg, cfg.verify_samples, seed=101)
    for u in fields:
        h1 = sobolev_norm(u, 1.0)
        if h1 == 0.0:
            continue
        worst = max(worst, sobolev_norm(u, 0.0) * np.sqrt(lam1) / h1)
    return _report("poincare", len(fields), worst)


def check_low_mode_projection(cfg: RunConfig) -> InvariantReport:
    """|u - P_lam u| <= lam^{-1/2} ||u||."""
    lam = cfg.assim.interpolant.lambda_cut
    worst = 0.0
    fields = _velocity_samples(cfg, cfg.verify_samples, seed=102)
    for u in fields:
        h1 = sobolev_norm(u, 1.0)
        if h1 == 0.0:
            continue
        low = spectral_filter(u, lam)
        tail = SpectralVelocityField(u.spec, u.coeffs - low.coeffs)
        worst = max(worst, sobolev_norm(tail, 0.0) * np.sqrt(lam) / h1)
    return _report("low_mode_projection", len(fields), worst)


def check_low_mode_smoothing(cfg: RunConfig) -> InvariantReport:
    """||P_lam u|| <= lam^{1/2} |u|."""
    lam = cfg.assim.interpolant.lambda_cut
    worst = 0.0
    fields = _velocity_samples(cfg, cfg.verify_samples, seed=103)
    for u in fields:
        l2 = sobolev_norm(u, 0.0)
        if l2 == 0.0:
            continue
        low = spectral_filter(u, lam)
        worst = max(worst, sobolev_norm(low, 1.0) / (np.sqrt(lam) * l2))
    return _report("low_mode_smoothing", len(fields), worst)


_CAL_CACHE: dict[int, tuple] = {}


def _calibrated(cfg: RunConfig):
    """Constants from one batch plus a held-out batch, shared between checks."""
    key = id(cfg)
    if key not in _CAL_CACHE:
        if len(_CAL_CACHE) > 8:
            _CAL_CACHE.clear()
        interp = cfg.assim.interpolant
        n = cfg.verify_samples
        est = estimate_type1_constant(
            n, interp, seed=104, peak=cfg.ensemble.spectrum_peak
        )
        c1, c2, c3 = assembled_constants(est, interp)
        fresh = _velocity_samples(cfg, n, seed=105)
        _CAL_CACHE[key] = (interp, c1, c2, c3, fresh)
    return _CAL_CACHE[key]


def check_interpolant_accuracy(cfg: RunConfig) -> InvariantReport:
    """|u - P_H I_h u| <= c1^{1/2} h ||u|| on held-out samples."""
    interp, c1, _, _, fresh = _calibrated(cfg)
    held = estimate_type1_constant(0, interp, samples=fresh)
    worst = held.worst_ratio**2 / c1
    return _report("interpolant_accuracy", held.used, worst)


def check_filtered_interpolant_accuracy(cfg: RunConfig) -> InvariantReport:
    """|u - Ju|^2 <= (1/lam + c1 h^2) ||u||^2 on held-out samples."""
    interp, c1, _, _, fresh = _calibrated(cfg)
    lam = interp.lambda_cut
    bound_sq = 1.0 / lam + c1 * interp.h**2
    worst = 0.0
    used = 0
    for u in fresh:
        h1 = sobolev_norm(u, 1.0)
        if h1 == 0.0:
            continue
        used += 1
        ju = filtered_interpolant(u, interp)
        diff = SpectralVelocityField(u.spec, u.coeffs - ju.coeffs)
        worst = max(worst, sobolev_norm(diff, 0.0) ** 2 / (bound_sq * h1**2))
    return _report("filtered_interpolant_accuracy", used, worst)


def check_filtered_interpolant_l2_bound(cfg: RunConfig) -> InvariantReport:
    """|Ju| <= c2 ||u||."""
    interp, _, c2, _, fresh = _calibrated(cfg)
    worst = 0.0
    used = 0
    for u in fresh:
        h1 = sobolev_norm(u, 1.0)
        if h1 == 0.0:
            continue
        used += 1
        ju = filtered_interpolant(u, interp)
        worst = max(worst, sobolev_norm(ju, 0.0) / (c2 * h1))
    return _report("filtered_interpolant_l2_bound", used, worst)


def check_filtered_interpolant_h1_bound(cfg: RunConfig) -> InvariantReport:
    """||Ju|| <= c3 ||u||."""
    interp, _, _, c3, fresh = _calibrated(cfg)
    worst = 0.0
    used = 0
    for u in fresh:
        h1 = sobolev_norm(u, 1.0)
        if h1 == 0.0:
            continue
        used += 1
        ju = filtered_interpolant(u, interp)
        worst = max(worst, sobolev_norm(ju, 1.0) / (c3 * h1))
    return _report("filtered_interpolant_h1_bound", used, worst)


def _energy_residual(cfg: RunConfig, wh, dt: float) -> float:
    """One-step energy budget closed with Simpson quadrature of the power."""
    params = replace(cfg.params, dt=dt)
    solver = Solver(params)
    half = Solver(replace(params, dt=dt / 2.0))
    t = solver.tables

    def energy(state) -> float:
        return 0.5 * solver.norm_half(state, 0.0) ** 2

    def rhs(state) -> float:
        drain = -params.nu * solver.norm_half(state, 1.0) ** 2
        hinv = t.hinv_ksq
        power = (
            params.grid.length**2
            * np.sum(t.half_weights * np.real(solver._fw * np.conj(state)) * hinv)
        )
        return drain + power

    w_mid = half.step_half(wh.copy())
    w_one = solver.step_half(wh.copy())
    simpson = dt / 6.0 * (rhs(wh) + 4.0 * rhs(w_mid) + rhs(w_one))
    return abs(energy(w_one) - energy(wh) - simpson)


def check_energy_balance_order(cfg: RunConfig) -> InvariantReport:
    """The one-step energy-budget defect shrinks at 4th order in dt."""
    grid = cfg.params.grid
    rng = np.random.default_rng(106)
    w0 = random_vorticity_with_spectrum(grid, rng, peak=cfg.ensemble.spectrum_peak)
    solver = Solver(cfg.params)
    wh = solver.state_from_field(w0)
    dt = cfg.params.dt
    r1 = _energy_residual(cfg, wh, dt)
    r2 = _energy_residual(cfg, wh, dt / 2.0)
    if r2 == 0.0:
        return _report("energy_balance_order", 1, 0.0)
    order = float(np.log2(r1 / r2))
    return _report("energy_balance_order", 1, 3.5 / max(order, 1e-12))


def _fixed_point_worst(cfg: RunConfig, scheme: AssimilationScheme) -> float:
    grid = cfg.params.grid
    rng = np.random.default_rng(107)
    w0 = random_vorticity_with_spectrum(
        grid, rng, peak=cfg.ensemble.spectrum_peak, amplitude=cfg.ensemble.amplitude
    )
    reference = ReferenceRun(cfg.params, w0)
    T = 10 * cfg.params.dt
    if scheme.kind == "nudging":
        traj, _ = run_nudging(
            reference, scheme.mu, T, cfg.assim, initial_state=w0
        )
    else:
        traj, _ = run_discrete(reference, scheme, T, cfg.assim, initial_state=w0)
    return float(np.max(traj.err_l2)) / 1e-10


def check_fixed_point_direct(cfg: RunConfig) -> InvariantReport:
    dt = cfg.params.dt
    scheme = AssimilationScheme(kind="direct", delta=2 * dt)
    return _report("fixed_point_direct", 1, _fixed_point_worst(cfg, scheme))


def check_fixed_point_relaxed(cfg: RunConfig) -> InvariantReport:
    dt = cfg.params.dt
    scheme = AssimilationScheme(kind="relaxed", delta=2 * dt, kappa=0.5)
    return _report("fixed_point_relaxed", 1, _fixed_point_worst(cfg, scheme))


def check_fixed_point_nudging(cfg: RunConfig) -> InvariantReport:
    scheme = AssimilationScheme(kind="nudging", mu=1.0)
    return _report("fixed_point_nudging", 1, _fixed_point_worst(cfg, scheme))


def check_observer_matches_field_path(cfg: RunConfig) -> InvariantReport:
    """The in-solver observation path agrees with the field composition."""
    observer = HalfSpectrumObserver(cfg.assim.interpolant)
    solver = Solver(cfg.params)
    worst = 0.0
    fields = _velocity_samples(cfg, min(cfg.verify_samples, 10), seed=108)
    for u in fields:
        ju = filtered_interpolant(u, cfg.assim.interpolant)
        wh = solver.state_from_field(vorticity_from_velocity(u))
        jw_half = observer.smoothed_vorticity(wh)
        jw = solver.field_from_state(jw_half)
        ju_w = vorticity_from_velocity(ju)
        scale = max(sobolev_norm(ju_w, 0.0), 1e-30)
        diff = sobolev_norm(
            type(ju_w)(ju_w.spec, ju_w.coeffs - jw.coeffs), 0.0
        )
        worst = max(worst, diff / (1e-10 * scale))
    return _report("observer_matches_field_path", len(fields), worst)


REGISTRY = (
    check_poincare,
    check_low_mode_projection,
    check_low_mode_smoothing,
    check_interpolant_accuracy,
    check_filtered_interpolant_accuracy,
    check_filtered_interpolant_l2_bound,
    check_filtered_interpolant_h1_bound,
    check_energy_balance_order,
    check_fixed_point_direct,
    check_fixed_point_relaxed,
    check_fixed_point_nudging,
    check_observer_matches_field_path,
)


def run_all_invariants(cfg: RunConfig) -> list[InvariantReport]:
    return [check(cfg) for check in REGISTRY]
