"""Flat `key = value` run configuration with dotted section names.

One text file describes a whole run: grid, solver, observation operator,
assimilation scheme, sweep and ensemble recipes, and output plumbing.  The
format is deliberately line-oriented so experiment configs diff cleanly.
Unknown keys are errors; every run echoes its input config verbatim and
writes the fully resolved key set next to its outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .assimilation import AssimilationConfig, AssimilationScheme
from .experiments import EnsembleSpec, SweepSpec
from .observation import InterpolantConfig, ObservationGeometry
from .solver import ForcingSpec, NormMonitor, SolverParams
from .spectral import GridSpec

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config_text",
    "build_run_config",
    "load_config_file",
    "resolved_text",
    "resolve_output_dir",
]

_INITIAL_CHOICES = ("random", "zero", "taylor-green")


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration input."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs, validated and ready to run."""

    params: SolverParams
    monitor: NormMonitor | None
    assim: AssimilationConfig
    scheme: AssimilationScheme
    start_at_reference: bool
    sweep: SweepSpec
    sweep_delta_cap: float
    ensemble: EnsembleSpec
    output_dir: str
    seed: int
    sample_stride: int
    horizon: float
    initial_condition: str
    initial_amplitude: float
    converge_deltas: tuple[float, ...]
    converge_mu: float
    verify_samples: int
    raw_text: str


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


class _Reader:
    """Typed, tracked access to the raw key/value pairs."""

    def __init__(self, pairs: dict[str, str]):
        self.pairs = dict(pairs)
        self.used: set[str] = set()

    def _raw(self, key: str) -> str | None:
        if key in self.pairs:
            self.used.add(key)
            return self.pairs[key]
        return None

    def str_(self, key: str, default: str, choices: tuple[str, ...] | None = None) -> str:
        raw = self._raw(key)
        value = default if raw is None else raw
        if choices is not None and value not in choices:
            raise ConfigError(
                f"{key}: expected one of {', '.join(choices)}, got {value!r}"
            )
        return value

    def int_(self, key: str, default: int) -> int:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None

    def float_(self, key: str, default: float) -> float:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None

    def bool_(self, key: str, default: bool) -> bool:
        raw = self._raw(key)
        if raw is None:
            return default
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")

    def opt_float(self, key: str, default: float | None) -> float | None:
        raw = self._raw(key)
        if raw is None:
            return default
        if raw == "none":
            return None
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number or none, got {raw!r}") from None

    def opt_int(self, key: str, default: int | None, none_word: str = "auto") -> int | None:
        raw = self._raw(key)
        if raw is None:
            return default
        if raw == none_word:
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(
                f"{key}: expected an integer or {none_word}, got {raw!r}"
            ) from None

    def int_range(self, key: str, default: tuple[int, int]) -> tuple[int, int]:
        raw = self._raw(key)
        if raw is None:
            return default
        parts = raw.split("..")
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected 'lo..hi', got {raw!r}")
        try:
            return int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigError(f"{key}: expected 'lo..hi', got {raw!r}") from None

    def float_list(self, key: str, default: tuple[float, ...]) -> tuple[float, ...]:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return tuple(float(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers, got {raw!r}") from None

    def reject_unknown(self) -> None:
        unknown = sorted(set(self.pairs) - self.used)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


_DEFAULT_CONVERGE = (0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125)


def build_run_config(
    pairs: dict[str, str],
    raw_text: str = "",
    overrides: dict[str, str] | None = None,
) -> RunConfig:
    """Build and validate a RunConfig; unknown keys and bad values raise."""
    merged = dict(pairs)
    if overrides:
        merged.update(overrides)
    r = _Reader(merged)
    try:
        grid = GridSpec(
            n=r.int_("grid.n", 128),
            dealias_fraction=r.float_("grid.dealias_fraction", 2.0 / 3.0),
            dealias_shape=r.str_(
                "grid.dealias_shape", "square", choices=("square", "circular")
            ),
        )
        forcing = ForcingSpec(
            kind=r.str_("solver.forcing.kind", "kolmogorov", choices=("none", "kolmogorov")),
            amplitude=r.float_("solver.forcing.amplitude", 0.1),
            wavenumber=r.int_("solver.forcing.wavenumber", 4),
        )
        params = SolverParams(
            grid=grid,
            nu=r.float_("solver.nu", 5e-3),
            dt=r.float_("solver.dt", 1.0 / 128.0),
            forcing=forcing,
        )
        max_l2 = r.opt_float("solver.max_l2", None)
        max_h1 = r.opt_float("solver.max_h1", None)
        max_h2 = r.opt_float("solver.max_h2", None)
        check_every = r.int_("solver.check_every", 64)
        monitor = None
        if any(b is not None for b in (max_l2, max_h1, max_h2)):
            monitor = NormMonitor(
                max_l2=max_l2, max_h1=max_h1, max_h2=max_h2, check_every=check_every
            )
        geometry = ObservationGeometry(
            grid=grid,
            points_per_side=r.int_("observation.points_per_side", 9),
            radius_sq=r.opt_int("observation.radius_sq", None, none_word="auto"),
        )
        interpolant = InterpolantConfig(
            geometry=geometry,
            lambda_cut=r.float_("observation.lambda_cut", 81.0),
        )
        sample_stride = r.int_("sample_stride", 16)
        if sample_stride < 1:
            raise ConfigError("sample_stride must be at least 1")
        assim = AssimilationConfig(interpolant=interpolant, sample_stride=sample_stride)
        scheme = AssimilationScheme(
            kind=r.str_("scheme.kind", "nudging", choices=("nudging", "direct", "relaxed")),
            delta=r.opt_float("scheme.delta", None),
            kappa=r.opt_float("scheme.kappa", None),
            mu=r.opt_float("scheme.mu", 1.0),
        )
        sweep = SweepSpec(
            delta_exponents=r.int_range("sweep.delta_exponents", (0, 17)),
            base_m=r.int_("sweep.base_m", 228),
            ratio=r.float_("sweep.ratio", 0.75),
            kappa_ratio_root=r.int_("sweep.kappa_ratio_root", 3),
            kappa_floor=r.float_("sweep.kappa_floor", 0.0056),
            kappa_ceiling_factor=r.float_("sweep.kappa_ceiling_factor", 5.0),
            extended_floor=r.opt_float("sweep.extended_floor", None),
        )
        sweep_delta_cap = r.float_("sweep.delta_cap", 0.5)
        if sweep_delta_cap <= 0.0:
            raise ConfigError("sweep.delta_cap must be positive")
        seed = r.int_("seed", 0)
        ensemble = EnsembleSpec(
            size=r.int_("ensemble.size", 8),
            spinup_time=r.float_("ensemble.spinup_time", 200.0),
            seed=seed,
            spectrum_peak=r.float_("ensemble.spectrum_peak", 4.0),
            amplitude=r.float_("ensemble.amplitude", 1.0),
        )
        horizon = r.float_("horizon", 10.0)
        if horizon <= 0.0:
            raise ConfigError("horizon must be positive")
        cfg = RunConfig(
            params=params,
            monitor=monitor,
            assim=assim,
            scheme=scheme,
            start_at_reference=r.bool_("scheme.start_at_reference", False),
            sweep=sweep,
            sweep_delta_cap=sweep_delta_cap,
            ensemble=ensemble,
            output_dir=r.str_("output_dir", "run"),
            seed=seed,
            sample_stride=sample_stride,
            horizon=horizon,
            initial_condition=r.str_(
                "initial_condition", "random", choices=_INITIAL_CHOICES
            ),
            initial_amplitude=r.float_("initial_amplitude", 1.0),
            converge_deltas=r.float_list("converge.deltas", _DEFAULT_CONVERGE),
            converge_mu=r.float_("converge.mu", 1.0),
            verify_samples=r.int_("verify.samples", 100),
            raw_text=raw_text,
        )
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err
    r.reject_unknown()
    if not cfg.converge_deltas:
        raise ConfigError("converge.deltas must list at least one value")
    if cfg.verify_samples < 1:
        raise ConfigError("verify.samples must be at least 1")
    return cfg


def load_config_file(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        raw_text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    return build_run_config(parse_config_text(raw_text), raw_text, overrides)


def _fmt_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg: RunConfig) -> str:
    """Canonical serialization of every key; parses back to the same config."""
    grid = cfg.params.grid
    geo = cfg.assim.interpolant.geometry
    radius = "auto" if geo.radius_sq is None else geo.radius_sq
    lo, hi = cfg.sweep.delta_exponents
    mon = cfg.monitor
    items = [
        ("grid.n", grid.n),
        ("grid.dealias_fraction", grid.dealias_fraction),
        ("grid.dealias_shape", grid.dealias_shape),
        ("solver.nu", cfg.params.nu),
        ("solver.dt", cfg.params.dt),
        ("solver.forcing.kind", cfg.params.forcing.kind),
        ("solver.forcing.amplitude", cfg.params.forcing.amplitude),
        ("solver.forcing.wavenumber", cfg.params.forcing.wavenumber),
        ("solver.max_l2", None if mon is None else mon.max_l2),
        ("solver.max_h1", None if mon is None else mon.max_h1),
        ("solver.max_h2", None if mon is None else mon.max_h2),
        ("solver.check_every", 64 if mon is None else mon.check_every),
        ("observation.points_per_side", geo.points_per_side),
        ("observation.radius_sq", radius),
        ("observation.lambda_cut", cfg.assim.interpolant.lambda_cut),
        ("scheme.kind", cfg.scheme.kind),
        ("scheme.delta", cfg.scheme.delta),
        ("scheme.kappa", cfg.scheme.kappa),
        ("scheme.mu", cfg.scheme.mu),
        ("scheme.start_at_reference", cfg.start_at_reference),
        ("sweep.delta_exponents", f"{lo}..{hi}"),
        ("sweep.base_m", cfg.sweep.base_m),
        ("sweep.ratio", cfg.sweep.ratio),
        ("sweep.kappa_ratio_root", cfg.sweep.kappa_ratio_root),
        ("sweep.kappa_floor", cfg.sweep.kappa_floor),
        ("sweep.kappa_ceiling_factor", cfg.sweep.kappa_ceiling_factor),
        ("sweep.extended_floor", cfg.sweep.extended_floor),
        ("sweep.delta_cap", cfg.sweep_delta_cap),
        ("ensemble.size", cfg.ensemble.size),
        ("ensemble.spinup_time", cfg.ensemble.spinup_time),
        ("ensemble.spectrum_peak", cfg.ensemble.spectrum_peak),
        ("ensemble.amplitude", cfg.ensemble.amplitude),
        ("converge.deltas", ",".join(repr(d) for d in cfg.converge_deltas)),
        ("converge.mu", cfg.converge_mu),
        ("verify.samples", cfg.verify_samples),
        ("output_dir", cfg.output_dir),
        ("seed", cfg.seed),
        ("sample_stride", cfg.sample_stride),
        ("horizon", cfg.horizon),
        ("initial_condition", cfg.initial_condition),
        ("initial_amplitude", cfg.initial_amplitude),
    ]
    return "".join(f"{key} = {_fmt_value(value)}\n" for key, value in items)


def resolve_output_dir(output_dir: str) -> Path:
    """Run directory under the results root (NUDGEKIT_RESULTS or ./results)."""
    p = Path(output_dir)
    if p.is_absolute():
        return p
    root = os.environ.get("NUDGEKIT_RESULTS", "results")
    return Path(root) / p
