import math

import numpy as np
import pytest

from nudgekit import spectral
from nudgekit.spectral import (
    GridSpec,
    PhysicalField,
    SpectralVelocityField,
    SpectralVorticityField,
)

import helpers

TAU = 2.0 * math.pi


def brute_force_norm(coeffs_list, spec, alpha):
    """Direct mode-by-mode summation, independent of the array code path."""
    n = spec.n
    k0 = spec.k0
    total = 0.0
    for m1 in range(-(n // 2), n // 2):
        for m2 in range(-(n // 2), n // 2):
            if m1 == 0 and m2 == 0:
                continue
            ksq = (k0 * m1) ** 2 + (k0 * m2) ** 2
            mag = sum(abs(c[m1 % n, m2 % n]) ** 2 for c in coeffs_list)
            total += ksq ** alpha * mag
    return spec.length * math.sqrt(total)


# ---------------------------------------------------------------------------
# grid spec validation


def test_grid_spec_rejects_bad_sizes():
    with pytest.raises(ValueError):
        GridSpec(n=6)
    with pytest.raises(ValueError):
        GridSpec(n=33)
    with pytest.raises(ValueError):
        GridSpec(n=32, length=-1.0)
    with pytest.raises(ValueError):
        GridSpec(n=32, dealias_fraction=0.0)


def test_poincare_lambda1_default_domain():
    assert GridSpec(n=32).poincare_lambda1 == pytest.approx(1.0)
    assert GridSpec(n=32, length=TAU / 2).poincare_lambda1 == pytest.approx(4.0)


# ---------------------------------------------------------------------------
# transforms


def test_transform_constant_field():
    spec = GridSpec(n=16)
    f = PhysicalField(spec, np.full((16, 16), 3.5))
    c = spectral.transform(f)
    assert c.coeffs[0, 0] == pytest.approx(3.5)
    rest = c.coeffs.copy()
    rest[0, 0] = 0.0
    assert np.max(np.abs(rest)) < 1e-14


def test_transform_cosine_single_mode():
    spec = GridSpec(n=32)
    x = np.arange(32) * spec.length / 32
    f = PhysicalField(spec, np.cos(x)[:, None] * np.ones(32)[None, :])
    c = spectral.transform(f).coeffs
    assert c[1, 0] == pytest.approx(0.5, abs=1e-14)
    assert c[-1, 0] == pytest.approx(0.5, abs=1e-14)
    c[1, 0] = 0.0
    c[-1, 0] = 0.0
    assert np.max(np.abs(c)) < 1e-14


def test_transform_round_trip_random():
    spec = GridSpec(n=48)
    rng = np.random.default_rng(7)
    v = rng.standard_normal((48, 48))
    f = PhysicalField(spec, v)
    back = spectral.transform(spectral.transform(f))
    assert np.max(np.abs(back.values - v)) < 1e-12


def test_transform_of_real_field_is_hermitian():
    spec = GridSpec(n=24)
    rng = np.random.default_rng(8)
    c = spectral.transform(PhysicalField(spec, rng.standard_normal((24, 24))))
    assert spectral.hermitian_defect(c.coeffs) < 1e-14


def test_transform_vector_round_trip():
    spec = GridSpec(n=32)
    rng = np.random.default_rng(9)
    v = rng.standard_normal((2, 32, 32))
    back = spectral.transform(spectral.transform(PhysicalField(spec, v)))
    assert np.max(np.abs(back.values - v)) < 1e-12


def test_half_full_round_trip():
    spec = GridSpec(n=32)
    rng = np.random.default_rng(10)
    c = spectral.values_to_coeffs(rng.standard_normal((32, 32)))
    h = spectral.full_to_half(c, 32)
    assert np.array_equal(spectral.half_to_full(h, 32), c)


# ---------------------------------------------------------------------------
# Sobolev norms


def test_norm_zero_field():
    spec = GridSpec(n=16)
    w = SpectralVorticityField(spec, np.zeros((16, 16), dtype=complex))
    for alpha in (-1.0, 0.0, 1.0, 2.0):
        assert spectral.sobolev_norm(w, alpha) == 0.0


def test_norm_single_cosine_velocity_hand_value():
    # u = 2 a cos(x) y-hat has coefficients a at m = +-(1, 0); every
    # V_alpha norm equals 2 pi a sqrt(2) on the default domain.
    spec = GridSpec(n=32)
    a = 0.7
    x = np.arange(32) * spec.length / 32
    vals = np.zeros((2, 32, 32))
    vals[1] = 2 * a * np.cos(x)[:, None]
    u = spectral.transform(PhysicalField(spec, vals))
    for alpha in (0.0, 1.0, 2.0):
        assert spectral.sobolev_norm(u, alpha) == pytest.approx(
            TAU * a * math.sqrt(2), rel=1e-12
        )


def test_norm_ratio_single_mode():
    # A pure |m| = 2 mode gains a factor |k| = 2 per derivative.
    spec = GridSpec(n=32)
    c = np.zeros((32, 32), dtype=complex)
    c[0, 2] = 1.0 + 0.5j
    c[0, -2] = np.conj(c[0, 2])
    w = SpectralVorticityField(spec, c)
    r = spectral.sobolev_norm(w, 1.0) / spectral.sobolev_norm(w, 0.0)
    assert r == pytest.approx(2.0, rel=1e-13)


def test_norm_matches_brute_force():
    spec = GridSpec(n=16)
    rng = np.random.default_rng(11)
    w = helpers.random_vorticity(spec, rng)
    u = helpers.random_velocity(spec, rng)
    for alpha in (-1.0, 0.0, 1.0, 2.0):
        assert spectral.sobolev_norm(w, alpha) == pytest.approx(
            brute_force_norm([w.coeffs], spec, alpha), rel=1e-12
        )
        assert spectral.sobolev_norm(u, alpha) == pytest.approx(
            brute_force_norm([u.coeffs[0], u.coeffs[1]], spec, alpha), rel=1e-12
        )


def test_norm_matches_quadrature():
    # Parseval: the alpha = 0 norm equals the grid L2 norm of the values.
    spec = GridSpec(n=64)
    rng = np.random.default_rng(12)
    u = helpers.random_velocity(spec, rng, amplitude=2.3)
    vals = spectral.transform(u).values
    quad = math.sqrt(spec.length ** 2 * np.mean(vals[0] ** 2 + vals[1] ** 2))
    assert spectral.sobolev_norm(u, 0.0) == pytest.approx(quad, rel=1e-12)


def test_poincare_chain_on_random_fields():
    spec = GridSpec(n=32)
    rng = np.random.default_rng(13)
    lam1 = spec.poincare_lambda1
    for _ in range(100):
        u = helpers.random_velocity(spec, rng, peak=6.0)
        nrm = {a: spectral.sobolev_norm(u, a) for a in (0.0, 1.0, 2.0)}
        assert lam1 * nrm[0.0] ** 2 <= nrm[1.0] ** 2 * (1 + 1e-12)
        assert lam1 * nrm[1.0] ** 2 <= nrm[2.0] ** 2 * (1 + 1e-12)


# ---------------------------------------------------------------------------
# vorticity <-> velocity


def test_biot_savart_hand_mode():
    # w = 2 cos(x): unit velocity coefficients at m = +-(1, 0), and the
    # flow is 2 sin(x) in y.
    spec = GridSpec(n=32)
    x = np.arange(32) * spec.length / 32
    w = spectral.transform(
        PhysicalField(spec, 2 * np.cos(x)[:, None] * np.ones(32)[None, :])
    )
    u = spectral.velocity_from_vorticity(w)
    assert abs(u.coeffs[1, 1, 0]) == pytest.approx(1.0, rel=1e-12)
    assert abs(u.coeffs[1, -1, 0]) == pytest.approx(1.0, rel=1e-12)
    vals = spectral.transform(u).values
    expected = 2 * np.sin(x)[:, None] * np.ones(32)[None, :]
    assert np.max(np.abs(vals[0])) < 1e-13
    assert np.max(np.abs(vals[1] - expected)) < 1e-12


def test_biot_savart_round_trip():
    spec = GridSpec(n=48)
    rng = np.random.default_rng(14)
    w = helpers.random_vorticity(spec, rng)
    back = spectral.vorticity_from_velocity(spectral.velocity_from_vorticity(w))
    assert np.max(np.abs(back.coeffs - w.coeffs)) < 1e-12


def test_biot_savart_norm_shift():
    # |u|_alpha = |w|_(alpha-1): Biot-Savart trades one derivative.
    spec = GridSpec(n=32)
    rng = np.random.default_rng(15)
    w = helpers.random_vorticity(spec, rng)
    u = spectral.velocity_from_vorticity(w)
    for alpha in (0.0, 1.0, 2.0):
        assert spectral.sobolev_norm(u, alpha) == pytest.approx(
            spectral.sobolev_norm(w, alpha - 1.0), rel=1e-12
        )


def test_biot_savart_velocity_is_divergence_free():
    spec = GridSpec(n=32)
    rng = np.random.default_rng(16)
    u = spectral.velocity_from_vorticity(helpers.random_vorticity(spec, rng))
    assert spectral.divergence_defect(u) < 1e-12


def test_zero_vorticity_zero_velocity():
    spec = GridSpec(n=16)
    w = SpectralVorticityField(spec, np.zeros((16, 16), dtype=complex))
    u = spectral.velocity_from_vorticity(w)
    assert np.all(u.coeffs == 0)


# ---------------------------------------------------------------------------
# Leray projection


def test_leray_kills_gradients():
    # u_k parallel to k for a scalar p: projection of grad p vanishes.
    spec = GridSpec(n=32)
    rng = np.random.default_rng(17)
    p = helpers.random_vorticity(spec, rng)  # any smooth scalar
    t = spectral.tables(spec)
    grad = np.stack([1j * t.kx * p.coeffs, 1j * t.ky * p.coeffs])
    proj = spectral.leray_project(SpectralVelocityField(spec, grad))
    assert np.max(np.abs(proj.coeffs)) < 1e-12


def test_leray_single_mode_hand_value():
    # At k = (1, 0) with u_k = (1, 1): the x part is removed.
    spec = GridSpec(n=16)
    c = np.zeros((2, 16, 16), dtype=complex)
    c[:, 1, 0] = 1.0
    c[:, -1, 0] = 1.0
    out = spectral.leray_project(SpectralVelocityField(spec, c)).coeffs
    assert out[0, 1, 0] == pytest.approx(0.0, abs=1e-14)
    assert out[1, 1, 0] == pytest.approx(1.0, rel=1e-14)


def test_leray_idempotent_and_preserves_divfree():
    spec = GridSpec(n=32)
    rng = np.random.default_rng(18)
    raw = np.stack(
        [
            helpers.random_vorticity(spec, rng).coeffs,
            helpers.random_vorticity(spec, rng).coeffs,
        ]
    )
    u = SpectralVelocityField(spec, raw)
    once = spectral.leray_project(u)
    twice = spectral.leray_project(once)
    assert np.max(np.abs(twice.coeffs - once.coeffs)) < 1e-13
    assert spectral.divergence_defect(once) < 1e-12
    # an already divergence-free field passes through unchanged
    udf = helpers.random_velocity(spec, rng)
    assert np.max(np.abs(spectral.leray_project(udf).coeffs - udf.coeffs)) < 1e-13


def test_leray_is_an_orthogonal_contraction():
    spec = GridSpec(n=32)
    rng = np.random.default_rng(19)
    for _ in range(20):
        raw = np.stack(
            [
                helpers.random_vorticity(spec, rng).coeffs,
                helpers.random_vorticity(spec, rng).coeffs,
            ]
        )
        u = SpectralVelocityField(spec, raw)
        pu = spectral.leray_project(u)
        assert spectral.sobolev_norm(pu, 0.0) <= spectral.sobolev_norm(u, 0.0) * (
            1 + 1e-12
        )


# ---------------------------------------------------------------------------
# dealiasing


def test_dealias_preserves_low_modes():
    spec = GridSpec(n=32)
    c = np.zeros((32, 32), dtype=complex)
    c[3, 2] = 1.0
    c[-3, -2] = 1.0
    w = SpectralVorticityField(spec, c)
    assert np.array_equal(spectral.dealias(w).coeffs, c)


def test_dealias_zeroes_high_modes_and_is_idempotent():
    spec = GridSpec(n=32)  # cut at 2/3 * 16 = 10.67
    c = np.zeros((32, 32), dtype=complex)
    c[12, 0] = 1.0
    c[-12, 0] = 1.0
    c[2, 1] = 1.0
    c[-2, -1] = 1.0
    w = SpectralVorticityField(spec, c)
    d = spectral.dealias(w)
    assert d.coeffs[12, 0] == 0.0
    assert d.coeffs[2, 1] == 1.0
    assert np.array_equal(spectral.dealias(d).coeffs, d.coeffs)


def test_dealias_mode_count_production_grid():
    # Square 2/3 rule at n = 512 keeps |m_i| <= 170: (2*170+1)^2 - 1 modes.
    assert spectral.retained_mode_count(GridSpec(n=512)) == 341 ** 2 - 1


def test_dealias_circular_rule_count():
    spec = GridSpec(n=32, dealias_shape="circular")
    # |m| <= 2/3 * 16: integer lattice points inside the disk, minus origin
    cut = (2.0 / 3.0) * 16
    count = sum(
        1
        for m1 in range(-16, 16)
        for m2 in range(-16, 16)
        if (m1, m2) != (0, 0) and m1 * m1 + m2 * m2 <= cut * cut
    )
    assert spectral.retained_mode_count(spec) == count


# ---------------------------------------------------------------------------
# snapshots


def test_snapshot_round_trip_vorticity(tmp_path):
    spec = GridSpec(n=32)
    rng = np.random.default_rng(20)
    w = helpers.random_vorticity(spec, rng)
    path = tmp_path / "w.nkf"
    spectral.write_snapshot(path, w)
    back = spectral.read_snapshot(path)
    assert isinstance(back, SpectralVorticityField)
    assert np.array_equal(back.coeffs, w.coeffs)
    assert back.spec.n == 32


def test_snapshot_round_trip_velocity(tmp_path):
    spec = GridSpec(n=16, length=1.5)
    rng = np.random.default_rng(21)
    u = helpers.random_velocity(GridSpec(n=16), rng)
    u = SpectralVelocityField(spec, u.coeffs)
    path = tmp_path / "u.nkf"
    spectral.write_snapshot(path, u)
    back = spectral.read_snapshot(path)
    assert isinstance(back, SpectralVelocityField)
    assert np.array_equal(back.coeffs, u.coeffs)
    assert back.spec.length == 1.5


def test_snapshot_rejects_garbage(tmp_path):
    path = tmp_path / "bad.nkf"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(ValueError, match="magic"):
        spectral.read_snapshot(path)
    path.write_bytes(b"NK")
    with pytest.raises(ValueError, match="truncated"):
        spectral.read_snapshot(path)


def test_snapshot_rejects_truncated_payload(tmp_path):
    spec = GridSpec(n=16)
    w = SpectralVorticityField(spec, np.zeros((16, 16), dtype=complex))
    path = tmp_path / "w.nkf"
    spectral.write_snapshot(path, w)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError, match="payload"):
        spectral.read_snapshot(path)
