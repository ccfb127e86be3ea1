import numpy as np
import pytest

from nudgekit import assimilation, observation, solver, spectral
from nudgekit.assimilation import (
    AssimilationConfig,
    AssimilationScheme,
    ObservationStream,
    ReferenceRun,
    StreamProtocolError,
    compare_discrete_vs_nudging,
    insertion_update,
    run_discrete,
    run_family,
    run_nudging,
)
from nudgekit.observation import InterpolantConfig, ObservationGeometry
from nudgekit.solver import ForcingSpec, SolverParams
from nudgekit.spectral import GridSpec, PhysicalField, SpectralVelocityField


def setup_case(n=32, nu=0.02, dt=1.0 / 32.0, seed=70, spin=32, stride=4,
               forcing=None):
    params = SolverParams(
        grid=GridSpec(n=n),
        nu=nu,
        dt=dt,
        forcing=forcing or ForcingSpec(kind="kolmogorov", amplitude=0.1,
                                       wavenumber=2),
    )
    rng = np.random.default_rng(seed)
    w0 = spectral.random_vorticity_with_spectrum(params.grid, rng, peak=3.0,
                                                 amplitude=2.0)
    w0 = solver.advance(w0, params, spin)
    cfg = AssimilationConfig(
        interpolant=InterpolantConfig(
            geometry=ObservationGeometry(grid=params.grid), lambda_cut=36.0
        ),
        sample_stride=stride,
    )
    return params, w0, cfg


# ---------------------------------------------------------------------------
# scheme objects


def test_scheme_direct_forces_kappa_one():
    s = AssimilationScheme(kind="direct", delta=0.25)
    assert s.kappa == 1.0
    with pytest.raises(ValueError, match="fixes kappa"):
        AssimilationScheme(kind="direct", delta=0.25, kappa=0.5)


def test_scheme_relaxed_clamps_kappa():
    s = AssimilationScheme(kind="relaxed", delta=0.5, mu=0.5)
    assert s.kappa == 0.25
    s = AssimilationScheme(kind="relaxed", delta=0.5, mu=4.0)
    assert s.kappa == 1.0
    # explicit kappa wins and may overrelax
    s = AssimilationScheme(kind="relaxed", delta=0.5, kappa=2.5)
    assert s.kappa == 2.5
    with pytest.raises(ValueError, match="kappa or mu"):
        AssimilationScheme(kind="relaxed", delta=0.5)
    with pytest.raises(ValueError, match="positive"):
        AssimilationScheme(kind="relaxed", delta=0.5, kappa=-1.0)


def test_scheme_nudging_validation():
    s = AssimilationScheme(kind="nudging", mu=2.0)
    assert s.delta is None and s.kappa is None
    with pytest.raises(ValueError, match="mu"):
        AssimilationScheme(kind="nudging")
    with pytest.raises(ValueError, match="no delta"):
        AssimilationScheme(kind="nudging", mu=1.0, delta=0.5)
    with pytest.raises(ValueError, match="unknown scheme"):
        AssimilationScheme(kind="ensemble", mu=1.0)


# ---------------------------------------------------------------------------
# stream protocol


def test_stream_happy_path():
    st = ObservationStream(period_steps=4)
    st.push(4, "a")
    st.push(8, "b")
    assert st.take(4) == "a"
    assert st.take(8) == "b"
    assert len(st) == 0


def test_stream_rejects_out_of_order_push():
    st = ObservationStream(period_steps=4)
    st.push(4, "a")
    with pytest.raises(StreamProtocolError, match="expected 8"):
        st.push(4, "again")
    with pytest.raises(StreamProtocolError, match="expected 8"):
        st.push(12, "skip")


def test_stream_rejects_double_or_skipped_take():
    st = ObservationStream(period_steps=2)
    st.push(2, "a")
    st.push(4, "b")
    assert st.take(2) == "a"
    with pytest.raises(StreamProtocolError, match="holds"):
        st.take(2)  # the queue now holds step 4
    st = ObservationStream(period_steps=2)
    st.push(2, "a")
    with pytest.raises(StreamProtocolError, match="asked for step 4"):
        st.take(4)
    st = ObservationStream(period_steps=2)
    with pytest.raises(StreamProtocolError, match="empty"):
        st.take(2)


# ---------------------------------------------------------------------------
# insertion update (field level)


def test_insertion_fixed_point_exact():
    params, w0, cfg = setup_case()
    U = spectral.velocity_from_vorticity(w0)
    ju = observation.filtered_interpolant(U, cfg.interpolant)
    for kappa in (0.25, 1.0, 2.0):
        out = insertion_update(U, ju, kappa, cfg.interpolant)
        assert np.array_equal(out.coeffs, U.coeffs)


def test_insertion_small_kappa_keeps_prediction():
    params, w0, cfg = setup_case()
    rng = np.random.default_rng(71)
    u = spectral.velocity_from_vorticity(
        spectral.random_vorticity_with_spectrum(params.grid, rng)
    )
    ju = observation.filtered_interpolant(
        spectral.velocity_from_vorticity(w0), cfg.interpolant
    )
    out = insertion_update(u, ju, 1e-14, cfg.interpolant)
    assert np.max(np.abs(out.coeffs - u.coeffs)) < 1e-12
    with pytest.raises(ValueError, match="kappa"):
        insertion_update(u, ju, 0.0, cfg.interpolant)


def test_insertion_toy_shell_projection():
    # J = projection onto the |k|^2 = 1 shell; kappa = 1/2 must average
    # observed and predicted coefficients on the shell, touch nothing else.
    spec = GridSpec(n=16)
    cfg = InterpolantConfig(
        geometry=ObservationGeometry(grid=spec), lambda_cut=1.0
    )
    rng = np.random.default_rng(72)
    u = spectral.velocity_from_vorticity(
        spectral.random_vorticity_with_spectrum(spec, rng)
    )
    Uref = spectral.velocity_from_vorticity(
        spectral.random_vorticity_with_spectrum(spec, rng)
    )
    shell = lambda f: observation.spectral_filter(f, 1.0)
    out = insertion_update(u, shell(Uref), 0.5, cfg, smoother=shell)
    t = spectral.tables(spec)
    on = t.ksq == 1.0
    want_on = 0.5 * (u.coeffs[:, on] + Uref.coeffs[:, on])
    assert np.max(np.abs(out.coeffs[:, on] - want_on)) < 1e-15
    assert np.array_equal(out.coeffs[:, ~on], u.coeffs[:, ~on])


def test_insertion_affine_in_kappa():
    params, w0, cfg = setup_case()
    rng = np.random.default_rng(73)
    u = spectral.velocity_from_vorticity(
        spectral.random_vorticity_with_spectrum(params.grid, rng)
    )
    ju = observation.filtered_interpolant(
        spectral.velocity_from_vorticity(w0), cfg.interpolant
    )
    o1 = insertion_update(u, ju, 0.25, cfg.interpolant)
    o2 = insertion_update(u, ju, 0.75, cfg.interpolant)
    mid = insertion_update(u, ju, 0.5, cfg.interpolant)
    assert np.max(np.abs(0.5 * (o1.coeffs + o2.coeffs) - mid.coeffs)) < 1e-13


# ---------------------------------------------------------------------------
# discrete runs


def test_discrete_fixed_point_over_100_steps():
    params, w0, cfg = setup_case(stride=10)
    ref = ReferenceRun(params, w0)
    for scheme in (
        AssimilationScheme(kind="direct", delta=4 * params.dt),
        AssimilationScheme(kind="relaxed", delta=4 * params.dt, kappa=0.3),
    ):
        traj, final = run_discrete(ref, scheme, 100 * params.dt, cfg,
                                   initial_state=w0)
        assert not traj.diverged
        assert np.max(traj.err_l2) <= 1e-10
        assert np.max(traj.err_h1) <= 1e-10


def test_nudging_fixed_point_over_100_steps():
    params, w0, cfg = setup_case(stride=10)
    ref = ReferenceRun(params, w0)
    traj, final = run_nudging(ref, 1.0, 100 * params.dt, cfg, initial_state=w0)
    assert np.max(traj.err_l2) <= 1e-10
    assert np.max(traj.err_h1) <= 1e-10


def test_relaxed_with_large_mu_delta_equals_direct():
    params, w0, cfg = setup_case()
    delta = 4 * params.dt
    ref_a = ReferenceRun(params, w0)
    t_direct, f_direct = run_discrete(
        ref_a, AssimilationScheme(kind="direct", delta=delta), 1.0, cfg
    )
    ref_b = ReferenceRun(params, w0)
    t_relax, f_relax = run_discrete(
        ref_b,
        AssimilationScheme(kind="relaxed", delta=delta, mu=10.0),
        1.0,
        cfg,
    )
    assert np.array_equal(f_direct.coeffs, f_relax.coeffs)
    assert np.array_equal(t_direct.err_l2, t_relax.err_l2)


def test_discrete_matches_field_level_composition():
    # Straight-line reimplementation from the public field-level ops.
    params, w0, cfg = setup_case(n=32, dt=1.0 / 32.0)
    m, kappa = 4, 0.6
    delta = m * params.dt
    scheme = AssimilationScheme(kind="relaxed", delta=delta, kappa=kappa)

    U = spectral.dealias(w0)
    ju0 = observation.filtered_interpolant(
        spectral.velocity_from_vorticity(U), cfg.interpolant
    )
    u = spectral.vorticity_from_velocity(ju0)
    for n_obs in (1, 2, 3):
        U = solver.advance(U, params, m)
        u = solver.advance(u, params, m)
        u_vel = spectral.velocity_from_vorticity(u)
        obs_ju = observation.filtered_interpolant(
            spectral.velocity_from_vorticity(U), cfg.interpolant
        )
        u_vel = insertion_update(u_vel, obs_ju, kappa, cfg.interpolant)
        u = spectral.vorticity_from_velocity(u_vel)

        ref = ReferenceRun(params, w0)
        traj, final = run_discrete(ref, scheme, n_obs * delta, cfg)
        scale = spectral.sobolev_norm(u, 0.0)
        diff = spectral.sobolev_norm(
            spectral.SpectralVorticityField(params.grid,
                                            final.coeffs - u.coeffs), 0.0
        )
        assert diff / scale < 1e-10


def test_nudging_mu_zero_is_free_run():
    params, w0, cfg = setup_case()
    ref = ReferenceRun(params, w0)
    traj, final = run_nudging(ref, 0.0, 1.0, cfg)
    # manual free run from JU(t0)
    obs = observation.HalfSpectrumObserver(cfg.interpolant)
    s = solver.Solver(params)
    v = obs.smoothed_vorticity(s.state_from_field(spectral.dealias(w0)))
    v = s.advance_half(v, int(round(1.0 / params.dt)))
    assert np.array_equal(spectral.half_to_full(v, 32), final.coeffs)
    assert not traj.diverged
    assert traj.err_l2[-1] > 0


def test_nudging_holds_laminar_steady_state():
    # Reference pinned to the forced laminar profile; nudging keeps the
    # assimilator there (the feedback term vanishes).
    n, nu, a, kf = 32, 0.1, 0.1, 2
    params = SolverParams(
        grid=GridSpec(n=n), nu=nu, dt=1.0 / 32.0,
        forcing=ForcingSpec(kind="kolmogorov", amplitude=a, wavenumber=kf),
    )
    x = np.arange(n) * params.grid.length / n
    w_vals = -(a / (nu * kf)) * np.cos(kf * x)[None, :] * np.ones(n)[:, None]
    w_s = spectral.transform(PhysicalField(params.grid, w_vals))
    drift = solver.advance(w_s, params, 10)
    assert spectral.sobolev_norm(
        spectral.SpectralVorticityField(params.grid,
                                        drift.coeffs - w_s.coeffs), 0.0
    ) < 1e-12
    cfg = AssimilationConfig(
        interpolant=InterpolantConfig(
            geometry=ObservationGeometry(grid=params.grid), lambda_cut=36.0
        ),
        sample_stride=10,
    )
    ref = ReferenceRun(params, w_s)
    traj, final = run_nudging(ref, 1.0, 100 * params.dt, cfg,
                              initial_state=w_s)
    assert np.max(traj.err_l2) <= 1e-10


def test_nudging_increment_matches_insertion_heuristic():
    # One nudged step should add roughly dt * mu * J(U - v) when the
    # states are smooth; checked against the free-run increment.
    params, w0, cfg = setup_case(n=64, dt=1.0 / 128.0, spin=64)
    rng = np.random.default_rng(74)
    v0 = spectral.random_vorticity_with_spectrum(params.grid, rng, peak=3.0,
                                                 amplitude=1.5)
    v0 = solver.advance(v0, params, 64)
    s = solver.Solver(params)
    obs = observation.HalfSpectrumObserver(cfg.interpolant)
    Uh = s.state_from_field(spectral.dealias(w0))
    vh = s.state_from_field(v0)
    mu = 1.0

    jdiff = obs.smoothed_vorticity(Uh) - obs.smoothed_vorticity(vh)
    predicted = params.dt * mu * s.norm_half(jdiff, 0.0)

    Uh2, stages = s.step_half(Uh, capture_stages=True)
    jstages = [obs.smoothed_vorticity(st) for st in stages]
    hook = lambda i, vs: mu * (jstages[i] - obs.smoothed_vorticity(vs))
    v_nudged = s.step_half(vh, hook=hook)
    v_free = s.step_half(vh)
    actual = s.norm_half(v_nudged - v_free, 0.0)
    assert abs(actual - predicted) / predicted < 0.1


def test_raw_vector_stream_matches_smoothed_stream():
    params, w0, cfg = setup_case()
    schemes = [
        AssimilationScheme(kind="relaxed", delta=4 * params.dt, kappa=0.5),
        AssimilationScheme(kind="nudging", mu=1.0),
    ]
    out_a = run_family(ReferenceRun(params, w0), schemes, 1.0, cfg)
    raw_cfg = AssimilationConfig(
        interpolant=cfg.interpolant,
        sample_stride=cfg.sample_stride,
        ship_raw_vectors=True,
    )
    out_b = run_family(ReferenceRun(params, w0), schemes, 1.0, raw_cfg)
    for (ta, fa), (tb, fb) in zip(out_a, out_b):
        assert np.array_equal(fa.coeffs, fb.coeffs)
        assert np.array_equal(ta.err_l2, tb.err_l2)


def test_family_rerun_is_deterministic():
    params, w0, cfg = setup_case()
    schemes = [AssimilationScheme(kind="direct", delta=4 * params.dt)]
    t1, f1 = run_family(ReferenceRun(params, w0), schemes, 1.0, cfg)[0]
    t2, f2 = run_family(ReferenceRun(params, w0), schemes, 1.0, cfg)[0]
    assert np.array_equal(f1.coeffs, f2.coeffs)
    assert np.array_equal(t1.err_l2, t2.err_l2)


def test_divergent_consumer_is_flagged_not_fatal():
    params, w0, cfg = setup_case()
    schemes = [
        AssimilationScheme(kind="relaxed", delta=params.dt, kappa=50.0),
        AssimilationScheme(kind="direct", delta=4 * params.dt),
    ]
    out = run_family(ReferenceRun(params, w0), schemes, 2.0, cfg)
    bad, good = out[0][0], out[1][0]
    assert bad.diverged and bad.diverged_time is not None
    assert not good.diverged
    assert np.all(np.isfinite(good.err_l2))


def test_sampling_grid_includes_endpoints():
    params, w0, cfg = setup_case(stride=7)
    ref = ReferenceRun(params, w0)
    scheme = AssimilationScheme(kind="direct", delta=4 * params.dt)
    traj, _ = run_discrete(ref, scheme, 20 * params.dt, cfg)
    assert traj.t[0] == 0.0
    assert traj.t[-1] == pytest.approx(20 * params.dt)


def test_delta_must_be_step_multiple():
    params, w0, cfg = setup_case()
    ref = ReferenceRun(params, w0)
    scheme = AssimilationScheme(kind="direct", delta=1.5 * params.dt)
    with pytest.raises(ValueError, match="multiple"):
        run_discrete(ref, scheme, 1.0, cfg)


# ---------------------------------------------------------------------------
# insertion vs nudging gap


def test_compare_gap_shrinks_with_delta():
    params, w0, cfg = setup_case(n=32, dt=1.0 / 32.0, stride=2)
    ref = ReferenceRun(params, w0)
    deltas = [8 * params.dt, 4 * params.dt, 2 * params.dt, params.dt]
    records = compare_discrete_vs_nudging(ref, deltas, 1.0, 2.0, cfg)
    sups = [r.sup_h1 for r in records]
    assert all(np.isfinite(sups))
    assert all(a >= b for a, b in zip(sups, sups[1:]))
    assert records[0].delta == deltas[0]
    assert records[-1].kappa == pytest.approx(min(1.0, params.dt))


def test_compare_sup_grows_with_horizon():
    params, w0, cfg = setup_case(n=32, dt=1.0 / 32.0, stride=4)
    deltas = [4 * params.dt]
    r1 = compare_discrete_vs_nudging(ReferenceRun(params, w0), deltas, 1.0,
                                     1.0, cfg)
    r2 = compare_discrete_vs_nudging(ReferenceRun(params, w0), deltas, 1.0,
                                     2.0, cfg)
    assert r2[0].sup_h1 >= r1[0].sup_h1 * (1 - 1e-12)


def test_compare_requires_deltas():
    params, w0, cfg = setup_case()
    with pytest.raises(ValueError, match="no deltas"):
        compare_discrete_vs_nudging(ReferenceRun(params, w0), [], 1.0, 1.0, cfg)


# ---------------------------------------------------------------------------
# trajectory files


def test_trajectory_csv_and_sidecar(tmp_path):
    params, w0, cfg = setup_case()
    ref = ReferenceRun(params, w0)
    scheme = AssimilationScheme(kind="relaxed", delta=4 * params.dt, kappa=0.5)
    traj, _ = run_discrete(ref, scheme, 1.0, cfg, seed=9)
    path = tmp_path / "run.csv"
    assimilation.write_trajectory(path, traj, params, cfg)
    t, e0, e1 = assimilation.read_trajectory_csv(path)
    assert np.array_equal(t, traj.t)
    assert np.array_equal(e0, traj.err_l2)
    assert np.array_equal(e1, traj.err_h1)
    meta = dict(
        line.strip().split(" = ")
        for line in (tmp_path / "run.meta").read_text().splitlines()
    )
    assert meta["scheme"] == "relaxed"
    assert float(meta["kappa"]) == 0.5
    assert meta["mu"] == "none"
    assert float(meta["nu"]) == params.nu
    assert meta["n"] == "32"
    assert float(meta["lambda"]) == cfg.interpolant.lambda_cut
    assert meta["diverged"] == "False"
    assert meta["seed"] == "9"
