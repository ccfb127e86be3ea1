"""Ensemble sweep harness: parameter grids, initial ensembles, summary statistics.

The sweep explores relaxed insertion over a geometric grid of observation
periods delta and relaxation weights kappa.  Each (delta, kappa) cell is run
over an ensemble of independently generated reference flows, terminal errors
are aggregated (geometric mean and quartiles), and two fits condense the
result: a quadratic vertex locating the best kappa per delta, and a
through-origin line kappa_min = mu * delta over the small-delta cells.

Runs are written one CSV per (delta, kappa, member) with a metadata sidecar;
a sweep restarted on an existing output directory skips every run whose
sidecar is already present.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assimilation import (
    AssimilationConfig,
    AssimilationScheme,
    ReferenceRun,
    run_family,
    write_trajectory,
)
from .solver import Solver, SolverDivergenceError, SolverParams
from .spectral import (
    SpectralVorticityField,
    random_vorticity_with_spectrum,
    read_snapshot,
    write_snapshot,
)

logger = logging.getLogger(__name__)

__all__ = [
    "SweepSpec",
    "EnsembleSpec",
    "CellStats",
    "SweepPlan",
    "SweepResult",
    "KappaMinFit",
    "MuFit",
    "delta_grid",
    "kappa_grid",
    "sweep_grids",
    "generate_ensemble",
    "ensemble_average",
    "geometric_mean",
    "quartiles",
    "fit_kappa_min",
    "fit_linear_mu",
    "run_sweep",
    "write_summary_csv",
]


@dataclass(frozen=True)
class SweepSpec:
    """Geometric grids for the observation period and the relaxation weight.

    Periods are delta = m * dt with m = floor(base_m * ratio**p) over the
    exponent range; weights are kappa = ratio**(q/kappa_ratio_root) for all
    integers q with kappa_floor <= kappa <= kappa_ceiling_factor * delta.
    """

    delta_exponents: tuple[int, int] = (0, 17)
    base_m: int = 228
    ratio: float = 0.75
    kappa_ratio_root: int = 3
    kappa_floor: float = 0.0056
    kappa_ceiling_factor: float = 5.0
    # Optional lower kappa_floor applied only to the delta = dt grid (m = 1),
    # extending the weight range below the global floor for the fastest
    # observations.  None leaves the grid untouched.
    extended_floor: float | None = None

    def __post_init__(self) -> None:
        lo, hi = self.delta_exponents
        if lo > hi:
            raise ValueError("delta_exponents range is empty")
        if self.base_m < 1:
            raise ValueError("base_m must be a positive integer")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must lie in (0, 1)")
        if self.kappa_ratio_root < 1:
            raise ValueError("kappa_ratio_root must be a positive integer")
        if self.kappa_floor <= 0.0:
            raise ValueError("kappa_floor must be positive")
        if self.kappa_ceiling_factor <= 0.0:
            raise ValueError("kappa_ceiling_factor must be positive")
        if self.extended_floor is not None and not (
            0.0 < self.extended_floor <= self.kappa_floor
        ):
            raise ValueError("extended_floor must lie in (0, kappa_floor]")


@dataclass(frozen=True)
class EnsembleSpec:
    """Recipe for a reproducible ensemble of spun-up reference states."""

    size: int = 8
    spinup_time: float = 200.0
    seed: int = 0
    spectrum_peak: float = 4.0
    amplitude: float = 1.0

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError("ensemble size must be at least 1")
        if self.spinup_time < 0.0:
            raise ValueError("spinup_time must be nonnegative")
        if self.spectrum_peak <= 0.0:
            raise ValueError("spectrum_peak must be positive")
        if self.amplitude <= 0.0:
            raise ValueError("amplitude must be positive")


@dataclass(frozen=True)
class CellStats:
    """Terminal-error statistics for one (delta, kappa) cell of the sweep."""

    delta: float
    kappa: float
    n_ok: int
    n_diverged: int
    mean: float
    gm: float
    median: float
    q1: float
    q3: float
    min: float
    max: float


@dataclass(frozen=True)
class SweepPlan:
    """Run counts announced before any solve is launched."""

    deltas: tuple[float, ...]
    kappa_counts: tuple[int, ...]
    ensemble_size: int

    @property
    def n_cells(self) -> int:
        return sum(self.kappa_counts)

    @property
    def n_runs(self) -> int:
        return self.n_cells * self.ensemble_size


@dataclass(frozen=True)
class SweepResult:
    plan: SweepPlan
    rows: tuple[CellStats, ...]
    executed: int
    skipped: int


@dataclass(frozen=True)
class KappaMinFit:
    """Vertex of a local quadratic fit to error-versus-kappa samples."""

    kappa_min: float
    boundary: bool
    n_points: int


@dataclass(frozen=True)
class MuFit:
    """Through-origin least-squares slope of kappa_min against delta."""

    mu: float
    r_squared: float
    n_points: int
    delta_cap: float


# -- parameter grids ---------------------------------------------------------


def delta_grid(spec: SweepSpec, dt: float) -> list[tuple[int, float]]:
    """Return (m, delta) pairs, duplicates dropped keeping the first, delta descending."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    lo, hi = spec.delta_exponents
    pairs: list[tuple[int, float]] = []
    seen: set[int] = set()
    for p in range(lo, hi + 1):
        m = math.floor(spec.base_m * spec.ratio**p)
        if m < 1 or m in seen:
            continue
        seen.add(m)
        pairs.append((m, m * dt))
    if not pairs:
        raise ValueError("delta grid is empty for the given exponent range")
    return pairs


def kappa_grid(delta: float, spec: SweepSpec, floor: float | None = None) -> list[float]:
    """Return the kappa values admitted at this delta, descending.

    kappa(q) = ratio**(q / root) for consecutive integers q; the grid keeps
    kappa_floor <= kappa <= kappa_ceiling_factor * delta.  Values above 1
    (overrelaxation) are deliberately kept when the ceiling admits them.
    `floor` overrides spec.kappa_floor for this one grid.
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    root = spec.kappa_ratio_root
    log_ratio = math.log(spec.ratio)
    ceiling = spec.kappa_ceiling_factor * delta
    kappa_floor = spec.kappa_floor if floor is None else floor

    def kappa_of(q: int) -> float:
        return spec.ratio ** (q / root)

    # Log arithmetic gives the q bounds; direct comparison repairs any
    # roundoff at the boundaries (kappa decreases as q grows).
    q_lo = math.ceil(root * math.log(ceiling) / log_ratio)
    while kappa_of(q_lo - 1) <= ceiling:
        q_lo -= 1
    while kappa_of(q_lo) > ceiling:
        q_lo += 1
    q_hi = math.floor(root * math.log(kappa_floor) / log_ratio)
    while kappa_of(q_hi + 1) >= kappa_floor:
        q_hi += 1
    while kappa_of(q_hi) < kappa_floor:
        q_hi -= 1
    if q_lo > q_hi:
        raise ValueError(
            f"kappa grid is empty at delta = {delta:.17g}: "
            f"ceiling {ceiling:.17g} lies below floor {kappa_floor:.17g}"
        )
    return [kappa_of(q) for q in range(q_lo, q_hi + 1)]


def sweep_grids(spec: SweepSpec, dt: float) -> list[tuple[int, float, list[float]]]:
    """(m, delta, kappa grid) triples; the extended floor applies at m = 1."""
    out = []
    for m, delta in delta_grid(spec, dt):
        floor = spec.extended_floor if (m == 1 and spec.extended_floor) else None
        out.append((m, delta, kappa_grid(delta, spec, floor=floor)))
    return out


# -- ensembles ---------------------------------------------------------------

_MAX_SPINUP_RETRIES = 3


def generate_ensemble(
    spec: EnsembleSpec, params: SolverParams
) -> list[SpectralVorticityField]:
    """Draw and spin up `spec.size` independent reference states.

    Each member is keyed by (seed, member, attempt) through a counter-based
    generator, so the ensemble is reproducible bit for bit regardless of
    generation order.  A member whose spinup diverges is redrawn with the
    next attempt index, up to _MAX_SPINUP_RETRIES redraws.
    """
    solver = Solver(params)
    n_spin = int(round(spec.spinup_time / params.dt))
    members: list[SpectralVorticityField] = []
    for member in range(spec.size):
        state = None
        for attempt in range(_MAX_SPINUP_RETRIES + 1):
            rng = np.random.Generator(
                np.random.Philox(key=[spec.seed, member * (_MAX_SPINUP_RETRIES + 1) + attempt])
            )
            w0 = random_vorticity_with_spectrum(
                params.grid, rng, peak=spec.spectrum_peak, amplitude=spec.amplitude
            )
            try:
                wh = solver.state_from_field(w0)
                wh = solver.advance_half(wh, n_spin)
            except SolverDivergenceError as err:
                logger.warning(
                    "ensemble member %d attempt %d diverged during spinup at t = %.6g",
                    member,
                    attempt,
                    err.time,
                )
                continue
            state = solver.field_from_state(wh)
            break
        if state is None:
            raise RuntimeError(
                f"ensemble member {member} diverged in all "
                f"{_MAX_SPINUP_RETRIES + 1} spinup attempts"
            )
        members.append(state)
    return members


# -- statistics --------------------------------------------------------------


def ensemble_average(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot average an empty sample")
    return float(arr.mean())


def geometric_mean(values: Sequence[float]) -> float:
    """exp of the mean log; every sample must be strictly positive."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot average an empty sample")
    bad = np.nonzero(~(arr > 0.0))[0]
    if bad.size:
        raise ValueError(
            "geometric mean requires positive samples; "
            f"offending indexes: {bad.tolist()}"
        )
    return float(np.exp(np.mean(np.log(arr))))


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """(q1, median, q3) by linear interpolation of the order statistics."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot take quartiles of an empty sample")
    q1, q2, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    return float(q1), float(q2), float(q3)


def fit_kappa_min(
    curve: Sequence[tuple[float, float]], window: int = 5
) -> KappaMinFit:
    """Locate the kappa minimising an error curve sampled on a kappa grid.

    Fits a least-squares parabola through the `window` samples nearest (in
    index) to the sampled argmin and returns its vertex, clamped into the
    sampled range.  An argmin on either end of the grid is reported as a
    boundary hit with the endpoint itself; so is a fit with no interior
    minimum.  The vertex is invariant under rescaling of the error values.
    """
    if window < 3:
        raise ValueError("window must be at least 3")
    pts = sorted((float(k), float(e)) for k, e in curve)
    if len(pts) < 3:
        raise ValueError("need at least 3 samples to locate a minimum")
    kappas = np.array([p[0] for p in pts])
    errs = np.array([p[1] for p in pts])
    if not np.all(np.isfinite(errs)):
        raise ValueError("error samples must be finite")
    i_min = int(np.argmin(errs))
    if i_min == 0 or i_min == len(pts) - 1:
        return KappaMinFit(kappa_min=float(kappas[i_min]), boundary=True, n_points=len(pts))
    lo = max(0, i_min - window // 2)
    hi = min(len(pts), lo + window)
    lo = max(0, hi - window)
    # Scale-invariant conditioning: fit around the argmin in both axes.
    kk = kappas[lo:hi] - kappas[i_min]
    ee = errs[lo:hi] / max(errs[i_min], np.finfo(np.float64).tiny)
    a, b, _ = np.polyfit(kk, ee, 2)
    if a <= 0.0:
        return KappaMinFit(kappa_min=float(kappas[i_min]), boundary=True, n_points=hi - lo)
    vertex = float(kappas[i_min] - b / (2.0 * a))
    vertex = min(max(vertex, float(kappas[0])), float(kappas[-1]))
    return KappaMinFit(kappa_min=vertex, boundary=False, n_points=hi - lo)


def fit_linear_mu(
    points: Sequence[tuple[float, float]], delta_cap: float = 0.5
) -> MuFit:
    """Fit kappa_min = mu * delta through the origin over points with delta <= cap.

    mu = sum(delta * kappa) / sum(delta**2); the reported R**2 is the
    uncentered coefficient of the through-origin model, so a single point
    on the fitted line scores exactly 1.
    """
    kept = [(float(d), float(k)) for d, k in points if float(d) <= delta_cap]
    if not kept:
        raise ValueError(f"no points with delta <= {delta_cap:.17g}")
    d = np.array([p[0] for p in kept])
    k = np.array([p[1] for p in kept])
    denom = float(np.sum(d * d))
    if denom == 0.0:
        raise ValueError("all retained deltas are zero")
    mu = float(np.sum(d * k) / denom)
    ss_tot = float(np.sum(k * k))
    if ss_tot == 0.0:
        r2 = 1.0
    else:
        ss_res = float(np.sum((k - mu * d) ** 2))
        r2 = 1.0 - ss_res / ss_tot
    return MuFit(mu=mu, r_squared=r2, n_points=len(kept), delta_cap=delta_cap)


# -- sweep driver ------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _meta_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".meta")


def _read_meta(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_terminal(csv_path: Path) -> tuple[float, bool]:
    """Terminal L2 error and divergence flag of a previously written run."""
    meta = _read_meta(_meta_path(csv_path))
    diverged = meta.get("diverged", "False").lower() == "true"
    last = None
    with csv_path.open() as fh:
        next(fh)
        for line in fh:
            if line.strip():
                last = line
    if last is None:
        raise ValueError(f"trajectory file {csv_path} holds no samples")
    return float(last.split(",")[1]), diverged


def build_plan(spec: SweepSpec, ensemble: EnsembleSpec, dt: float) -> SweepPlan:
    grids = sweep_grids(spec, dt)
    return SweepPlan(
        deltas=tuple(d for _, d, _ in grids),
        kappa_counts=tuple(len(ks) for _, _, ks in grids),
        ensemble_size=ensemble.size,
    )


def _manifest_text(
    params: SolverParams,
    config: AssimilationConfig,
    spec: SweepSpec,
    ensemble: EnsembleSpec,
    T: float,
) -> str:
    geo = config.interpolant.geometry
    items = [
        ("solver.n", params.grid.n),
        ("solver.nu", _fmt(params.nu)),
        ("solver.dt", _fmt(params.dt)),
        ("solver.forcing.kind", params.forcing.kind),
        ("solver.forcing.amplitude", _fmt(params.forcing.amplitude)),
        ("solver.forcing.wavenumber", params.forcing.wavenumber),
        ("observation.points_per_side", geo.points_per_side),
        ("observation.radius_sq", geo.radius_sq_resolved),
        ("observation.lambda_cut", _fmt(config.interpolant.lambda_cut)),
        ("sweep.delta_exponents", f"{spec.delta_exponents[0]}..{spec.delta_exponents[1]}"),
        ("sweep.base_m", spec.base_m),
        ("sweep.ratio", _fmt(spec.ratio)),
        ("sweep.kappa_ratio_root", spec.kappa_ratio_root),
        ("sweep.kappa_floor", _fmt(spec.kappa_floor)),
        ("sweep.kappa_ceiling_factor", _fmt(spec.kappa_ceiling_factor)),
        ("ensemble.size", ensemble.size),
        ("ensemble.spinup_time", _fmt(ensemble.spinup_time)),
        ("ensemble.seed", ensemble.seed),
        ("ensemble.spectrum_peak", _fmt(ensemble.spectrum_peak)),
        ("ensemble.amplitude", _fmt(ensemble.amplitude)),
        ("horizon", _fmt(T)),
    ]
    return "".join(f"{k} = {v}\n" for k, v in items)


def write_summary_csv(path: Path, rows: Sequence[CellStats]) -> None:
    cols = (
        "delta,kappa,n_ok,n_diverged,mean,gm,median,q1,q3,min,max"
    )
    with path.open("w") as fh:
        fh.write(cols + "\n")
        for r in rows:
            fh.write(
                f"{_fmt(r.delta)},{_fmt(r.kappa)},{r.n_ok},{r.n_diverged},"
                f"{_fmt(r.mean)},{_fmt(r.gm)},{_fmt(r.median)},"
                f"{_fmt(r.q1)},{_fmt(r.q3)},{_fmt(r.min)},{_fmt(r.max)}\n"
            )


def _cell_stats(
    delta: float, kappa: float, terminals: Sequence[tuple[float, bool]]
) -> CellStats:
    ok = [t for t, div in terminals if not div and math.isfinite(t)]
    n_div = len(terminals) - len(ok)
    if ok:
        q1, med, q3 = quartiles(ok)
        return CellStats(
            delta=delta,
            kappa=kappa,
            n_ok=len(ok),
            n_diverged=n_div,
            mean=ensemble_average(ok),
            gm=geometric_mean(ok),
            median=med,
            q1=q1,
            q3=q3,
            min=min(ok),
            max=max(ok),
        )
    nan = float("nan")
    return CellStats(
        delta=delta, kappa=kappa, n_ok=0, n_diverged=n_div,
        mean=nan, gm=nan, median=nan, q1=nan, q3=nan, min=nan, max=nan,
    )


def run_sweep(
    params: SolverParams,
    config: AssimilationConfig,
    spec: SweepSpec,
    ensemble_spec: EnsembleSpec,
    T: float,
    out_dir: Path | str,
    resume: bool = True,
    plan_only: bool = False,
    progress: Callable[[str], None] | None = None,
    workers: int = 1,
) -> SweepResult:
    """Run the full (delta, kappa, member) sweep into `out_dir`.

    The plan (cell and run counts) is established and reported before any
    solve starts.  Runs sharing a (member, delta) pair are co-stepped
    against a single reference trajectory; those families are independent
    tasks dispatched to a pool of `workers` threads, with aggregation done
    by the caller thread after all families finish.  A run whose outputs
    already exist is skipped when `resume` is true, so interrupting and
    restarting a sweep never repeats finished work.  Diverged runs are
    recorded and aggregation proceeds over the surviving members.
    """
    out_dir = Path(out_dir)
    say = progress if progress is not None else lambda msg: logger.info("%s", msg)
    if workers < 1:
        raise ValueError("workers must be at least 1")

    grids = sweep_grids(spec, params.dt)
    plan = SweepPlan(
        deltas=tuple(d for _, d, _ in grids),
        kappa_counts=tuple(len(ks) for _, _, ks in grids),
        ensemble_size=ensemble_spec.size,
    )
    say(
        f"sweep plan: {len(plan.deltas)} delta values, {plan.n_cells} "
        f"(delta, kappa) cells, ensemble of {ensemble_spec.size}, "
        f"{plan.n_runs} runs total"
    )
    if plan_only:
        return SweepResult(plan=plan, rows=(), executed=0, skipped=0)

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_text(params, config, spec, ensemble_spec, T)
    manifest_path = out_dir / "manifest.txt"
    if manifest_path.exists():
        if manifest_path.read_text() != manifest:
            raise ValueError(
                f"existing manifest at {manifest_path} does not match this "
                "sweep configuration; refusing to mix results"
            )
    else:
        manifest_path.write_text(manifest)

    # The ensemble is deterministic in its seed; snapshots are cached so a
    # resumed sweep skips the spinup integrations.
    ens_dir = out_dir / "ensemble"
    ens_dir.mkdir(exist_ok=True)
    member_paths = [ens_dir / f"member{i:03d}.nkf" for i in range(ensemble_spec.size)]
    if resume and all(p.exists() for p in member_paths):
        members = [read_snapshot(p, params.grid) for p in member_paths]
        say(f"loaded {len(members)} cached ensemble members")
    else:
        say(
            f"spinning up {ensemble_spec.size} ensemble members "
            f"({ensemble_spec.spinup_time:g} time units each)"
        )
        members = generate_ensemble(ensemble_spec, params)
        for p, w in zip(member_paths, members):
            write_snapshot(p, w)

    executed = 0
    skipped = 0
    done: dict[tuple[int, float, float], tuple[float, bool]] = {}
    tasks: list[tuple[int, SpectralVorticityField, float, list[tuple[float, Path]]]] = []
    for member, w0 in enumerate(members):
        for _, delta, kappas in grids:
            todo: list[tuple[float, Path]] = []
            for kappa in kappas:
                csv_path = out_dir / _fmt(delta) / _fmt(kappa) / f"{member:03d}.csv"
                if resume and csv_path.exists() and _meta_path(csv_path).exists():
                    done[(member, delta, kappa)] = _load_terminal(csv_path)
                    skipped += 1
                else:
                    todo.append((kappa, csv_path))
            if todo:
                tasks.append((member, w0, delta, todo))

    def run_task(
        member: int,
        w0: SpectralVorticityField,
        delta: float,
        todo: list[tuple[float, Path]],
    ) -> tuple[int, float, list[tuple[float, float, bool]]]:
        say(f"member {member}, delta = {_fmt(delta)}: {len(todo)} kappa runs")
        reference = ReferenceRun(params, w0)
        schemes = [
            AssimilationScheme(kind="relaxed", delta=delta, kappa=kappa)
            for kappa, _ in todo
        ]
        results = run_family(reference, schemes, T, config, seed=member)
        out: list[tuple[float, float, bool]] = []
        for (kappa, csv_path), (traj, _) in zip(todo, results):
            csv_path.parent.mkdir(parents=True, exist_ok=True)
            write_trajectory(csv_path, traj, params, config)
            out.append((kappa, traj.terminal_error(), traj.diverged))
        return member, delta, out

    if workers == 1 or len(tasks) <= 1:
        completed = [run_task(*task) for task in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            completed = list(pool.map(lambda task: run_task(*task), tasks))
    for member, delta, outs in completed:
        for kappa, terminal, diverged in outs:
            done[(member, delta, kappa)] = (terminal, diverged)
            executed += 1

    rows = tuple(
        _cell_stats(
            d, k, [done[(member, d, k)] for member in range(len(members))]
        )
        for _, d, ks in grids
        for k in ks
    )
    write_summary_csv(out_dir / "summary.csv", rows)
    return SweepResult(plan=plan, rows=rows, executed=executed, skipped=skipped)
