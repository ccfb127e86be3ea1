"""Command-line entry point: solve | assimilate | sweep | converge | verify.

Every command reads one flat config file, echoes it verbatim into its
output directory along with the fully resolved key set, and exits with a
stable code: 0 success, 1 configuration error, 2 numerical divergence,
3 invariant failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .assimilation import (
    StreamProtocolError,
    ReferenceRun,
    compare_discrete_vs_nudging,
    run_discrete,
    run_nudging,
    write_trajectory,
)
from .config import (
    ConfigError,
    RunConfig,
    build_run_config,
    load_config_file,
    resolve_output_dir,
    resolved_text,
)
from .experiments import (
    EnsembleSpec,
    build_plan,
    fit_kappa_min,
    fit_linear_mu,
    generate_ensemble,
    run_sweep,
)
from .solver import (
    MonitorViolation,
    Solver,
    SolverDivergenceError,
    write_checkpoint,
)
from .spectral import SpectralVorticityField, random_vorticity_with_spectrum

_G = "%.17g"


def _steps(horizon: float, dt: float) -> int:
    n = int(round(horizon / dt))
    if n < 1 or abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigError(
            f"horizon = {horizon!r} is not a positive multiple of dt = {dt!r}"
        )
    return n


def _prepare_out(cfg: RunConfig) -> Path:
    out = resolve_output_dir(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.raw_text)
    (out / "config.resolved.txt").write_text(resolved_text(cfg))
    return out


def _initial_vorticity(cfg: RunConfig) -> SpectralVorticityField:
    grid = cfg.params.grid
    n = grid.n
    if cfg.initial_condition == "zero":
        return SpectralVorticityField(grid, np.zeros((n, n), dtype=np.complex128))
    if cfg.initial_condition == "taylor-green":
        # u = A (sin x cos y, -cos x sin y): vorticity 2A sin x sin y.
        c = np.zeros((n, n), dtype=np.complex128)
        a = cfg.initial_amplitude
        c[1, 1] = -a / 2.0
        c[1, n - 1] = a / 2.0
        c[n - 1, 1] = a / 2.0
        c[n - 1, n - 1] = -a / 2.0
        return SpectralVorticityField(grid, c)
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0]))
    return random_vorticity_with_spectrum(
        grid, rng, peak=cfg.ensemble.spectrum_peak, amplitude=cfg.initial_amplitude
    )


def _spun_reference_state(cfg: RunConfig) -> SpectralVorticityField:
    spec = EnsembleSpec(
        size=1,
        spinup_time=cfg.ensemble.spinup_time,
        seed=cfg.seed,
        spectrum_peak=cfg.ensemble.spectrum_peak,
        amplitude=cfg.ensemble.amplitude,
    )
    return generate_ensemble(spec, cfg.params)[0]


def cmd_solve(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _prepare_out(cfg)
    solver = Solver(cfg.params)
    wh = solver.state_from_field(_initial_vorticity(cfg))
    n_steps = _steps(cfg.horizon, cfg.params.dt)
    dt = cfg.params.dt
    stride = cfg.sample_stride

    def row(t: float, state) -> str:
        n0 = solver.norm_half(state, 0.0)
        n1 = solver.norm_half(state, 1.0)
        n2 = solver.norm_half(state, 2.0)
        e = 0.5 * n0 * n0
        ens = 0.5 * n1 * n1
        return ",".join(_G % v for v in (t, e, ens, n1, n2))

    rows = ["t,e,ens,h1,h2", row(0.0, wh)]

    def callback(i: int, state) -> None:
        done = i + 1
        if done % stride == 0 or done == n_steps:
            rows.append(row(done * dt, state))

    try:
        wh = solver.advance_half(
            wh, n_steps, callback=callback, monitor=cfg.monitor
        )
    finally:
        (out / "diagnostics.csv").write_text("\n".join(rows) + "\n")
    write_checkpoint(
        out / "final.nkf", solver.field_from_state(wh), cfg.params, cfg.horizon
    )
    print(f"solve: {n_steps} steps to t = {cfg.horizon:g}, wrote {out}")
    return 0


def cmd_assimilate(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _prepare_out(cfg)
    w0 = _spun_reference_state(cfg)
    reference = ReferenceRun(cfg.params, w0)
    initial_state = w0 if cfg.start_at_reference else None
    scheme = cfg.scheme
    try:
        if scheme.kind == "nudging":
            traj, _ = run_nudging(
                reference,
                scheme.mu,
                cfg.horizon,
                cfg.assim,
                seed=cfg.seed,
                initial_state=initial_state,
            )
        else:
            traj, _ = run_discrete(
                reference,
                scheme,
                cfg.horizon,
                cfg.assim,
                seed=cfg.seed,
                initial_state=initial_state,
            )
    except ValueError as err:
        raise ConfigError(str(err)) from err
    write_trajectory(out / "trajectory.csv", traj, cfg.params, cfg.assim)
    status = "diverged" if traj.diverged else f"terminal error {traj.terminal_error():.6g}"
    print(f"assimilate: {scheme.kind} to t = {cfg.horizon:g}, {status}, wrote {out}")
    return 0


def _emit_fits(out: Path, rows, delta_cap: float) -> None:
    by_delta: dict[float, list[tuple[float, float]]] = {}
    order: list[float] = []
    for r in rows:
        if r.delta not in by_delta:
            by_delta[r.delta] = []
            order.append(r.delta)
        if r.n_ok > 0 and math.isfinite(r.gm) and r.gm > 0.0:
            by_delta[r.delta].append((r.kappa, r.gm))
    lines = ["delta,kappa_min,boundary"]
    points: list[tuple[float, float]] = []
    for delta in order:
        curve = by_delta[delta]
        if len(curve) >= 3:
            fit = fit_kappa_min(curve)
            lines.append(f"{_G % delta},{_G % fit.kappa_min},{int(fit.boundary)}")
            if not fit.boundary:
                points.append((delta, fit.kappa_min))
        else:
            lines.append(f"{_G % delta},nan,1")
    (out / "kappa_min.csv").write_text("\n".join(lines) + "\n")
    try:
        fit = fit_linear_mu(points, delta_cap)
        text = (
            f"mu = {_G % fit.mu}\n"
            f"r_squared = {_G % fit.r_squared}\n"
            f"n_points = {fit.n_points}\n"
            f"delta_cap = {_G % fit.delta_cap}\n"
        )
    except ValueError:
        text = (
            "mu = nan\nr_squared = nan\nn_points = 0\n"
            f"delta_cap = {_G % delta_cap}\n"
        )
    (out / "mu_fit.txt").write_text(text)


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.plan:
        plan = build_plan(cfg.sweep, cfg.ensemble, cfg.params.dt)
        print(
            f"sweep plan: {len(plan.deltas)} delta values, {plan.n_cells} "
            f"(delta, kappa) cells, ensemble of {plan.ensemble_size}, "
            f"{plan.n_runs} runs total"
        )
        return 0
    out = _prepare_out(cfg)
    result = run_sweep(
        cfg.params,
        cfg.assim,
        cfg.sweep,
        cfg.ensemble,
        cfg.horizon,
        out_dir=out,
        resume=args.resume,
        workers=args.threads,
        progress=print,
    )
    _emit_fits(out, result.rows, cfg.sweep_delta_cap)
    print(f"sweep: executed {result.executed} runs, skipped {result.skipped}, wrote {out}")
    return 0


def cmd_converge(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _prepare_out(cfg)
    w0 = _spun_reference_state(cfg)
    reference = ReferenceRun(cfg.params, w0)
    try:
        records = compare_discrete_vs_nudging(
            reference,
            list(cfg.converge_deltas),
            cfg.converge_mu,
            cfg.horizon,
            cfg.assim,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err
    lines = ["delta,sup_gap_l2,sup_gap_h1"]
    for r in records:
        lines.append(f"{_G % r.delta},{_G % r.sup_l2},{_G % r.sup_h1}")
    (out / "convergence.csv").write_text("\n".join(lines) + "\n")
    usable = [
        (r.delta, r.sup_l2)
        for r in records
        if math.isfinite(r.sup_l2) and r.sup_l2 > 0.0
    ]
    if len(usable) >= 2:
        slope = float(
            np.polyfit(
                np.log([d for d, _ in usable]), np.log([g for _, g in usable]), 1
            )[0]
        )
        (out / "rate.txt").write_text(f"rate = {_G % slope}\n")
        print(f"converge: {len(records)} deltas, rate = {slope:.4g}, wrote {out}")
    else:
        (out / "rate.txt").write_text("rate =\n")
        print(f"converge: {len(records)} deltas, rate undefined, wrote {out}")
    return 0


def cmd_verify(cfg: RunConfig, args: argparse.Namespace) -> int:
    from .verify import run_all_invariants

    out = _prepare_out(cfg)
    reports = run_all_invariants(cfg)
    lines = []
    for r in reports:
        verdict = "pass" if r.passed else "FAIL"
        lines.append(
            f"{r.name:36s} samples={r.samples:5d} worst_ratio={r.worst:#.6g} {verdict}"
        )
    text = "\n".join(lines) + "\n"
    (out / "verify_report.txt").write_text(text)
    print(text, end="")
    return 0 if all(r.passed for r in reports) else 3


_COMMANDS = {
    "solve": cmd_solve,
    "assimilate": cmd_assimilate,
    "sweep": cmd_sweep,
    "converge": cmd_converge,
    "verify": cmd_verify,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nudgekit",
        description=(
            "Data-assimilation laboratory for 2D incompressible flow: "
            "spectral solver, interval observations, insertion and nudging."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "advance a free reference run, writing diagnostics",
        "assimilate": "run one reference plus one assimilating twin",
        "sweep": "run the (delta, kappa) ensemble sweep with fits",
        "converge": "compare insertion against nudging over a delta list",
        "verify": "run the analytic invariant suite",
    }
    for name in _COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", default=None, help="path to a key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument(
            "--threads",
            type=int,
            default=1,
            help="worker threads for independent sweep families",
        )
        sp.add_argument(
            "--resume",
            action=argparse.BooleanOptionalAction,
            default=True,
            help="skip runs whose outputs already exist",
        )
        if name == "sweep":
            sp.add_argument(
                "--plan",
                action="store_true",
                help="print the run count and exit without solving",
            )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        overrides = {} if args.seed is None else {"seed": str(args.seed)}
        if args.config is None:
            cfg = build_run_config({}, "", overrides)
        else:
            cfg = load_config_file(args.config, overrides)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (SolverDivergenceError, MonitorViolation) as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return 2
    except StreamProtocolError as err:
        print(f"invariant failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
