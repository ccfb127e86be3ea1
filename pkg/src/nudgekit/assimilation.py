"""Data-assimilation schemes driven by the local-average observations.

Three ways to pull an approximating solution toward a reference run:
full insertion of the smoothed observations at sampling times, the
kappa-relaxed variant of that update, and continuous nudging with the
feedback force mu J(U - v).  A reference producer feeds consumers
through an ordered one-way stream; everything runs co-stepped in one
process so the reference trajectory is computed once per family.

States here are vorticity half-spectra (the solver's representation);
error metrics are reported for the corresponding velocities.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from nudgekit import observation
from nudgekit.observation import HalfSpectrumObserver, InterpolantConfig
from nudgekit.solver import Solver, SolverDivergenceError, SolverParams
from nudgekit.spectral import SpectralVelocityField, SpectralVorticityField

_SCHEME_KINDS = ("direct", "relaxed", "nudging")


class StreamProtocolError(RuntimeError):
    """Observation stream used out of order, doubly, or with a gap."""


@dataclass(frozen=True)
class AssimilationScheme:
    """What a consumer does with observations.

    direct: full insertion (kappa = 1) every delta.
    relaxed: partial insertion; kappa defaults to min(1, mu*delta) when
      not given explicitly.  Explicit kappa may exceed 1 so that
      overrelaxation can be studied; it must be positive.
    nudging: feedback force mu J(U - v) at every solver stage.
    """

    kind: str
    delta: float | None = None
    mu: float | None = None
    kappa: float | None = None

    def __post_init__(self):
        if self.kind not in _SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "nudging":
            if self.mu is None or self.mu < 0:
                raise ValueError("nudging requires mu >= 0")
            if self.delta is not None or self.kappa is not None:
                raise ValueError("nudging takes no delta or kappa")
            return
        if self.delta is None or not self.delta > 0:
            raise ValueError(f"{self.kind} insertion requires delta > 0")
        if self.kind == "direct":
            if self.kappa not in (None, 1.0):
                raise ValueError("direct insertion fixes kappa = 1")
            object.__setattr__(self, "kappa", 1.0)
            return
        if self.kappa is None:
            if self.mu is None:
                raise ValueError("relaxed insertion needs kappa or mu")
            object.__setattr__(self, "kappa", min(1.0, self.mu * self.delta))
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")


@dataclass(frozen=True)
class AssimilationConfig:
    """Shared observation settings for a family of runs."""

    interpolant: InterpolantConfig
    sample_stride: int = 16
    ship_raw_vectors: bool = False

    def __post_init__(self):
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be at least 1")


class ObservationStream:
    """Ordered one-way channel of step-indexed observation payloads.

    Producer pushes at a fixed period in solver steps; the consumer
    must take every payload exactly once, in order.  Violations raise
    StreamProtocolError.
    """

    def __init__(self, period_steps: int, start_index: int = 0):
        if period_steps < 1:
            raise ValueError("stream period must be at least 1 step")
        self.period_steps = period_steps
        self._queue = deque()
        self._last_pushed = start_index
        self._last_taken = start_index

    def __len__(self):
        return len(self._queue)

    def push(self, step_index: int, payload):
        want = self._last_pushed + self.period_steps
        if step_index != want:
            raise StreamProtocolError(
                f"producer pushed step {step_index}, expected {want}"
            )
        self._queue.append((step_index, payload))
        self._last_pushed = step_index

    def take(self, step_index: int):
        if not self._queue:
            raise StreamProtocolError(
                f"take at step {step_index} from an empty stream"
            )
        idx, payload = self._queue.popleft()
        if idx != step_index:
            raise StreamProtocolError(
                f"consumer asked for step {step_index}, stream holds {idx}"
            )
        want = self._last_taken + self.period_steps
        if step_index != want:
            raise StreamProtocolError(
                f"observation gap: consumed step {step_index} after "
                f"{self._last_taken}, period {self.period_steps}"
            )
        self._last_taken = step_index
        return payload


@dataclass
class ErrorTrajectory:
    """Velocity-space errors against the reference along one run."""

    scheme: str
    t: np.ndarray
    err_l2: np.ndarray
    err_h1: np.ndarray
    delta: float | None = None
    kappa: float | None = None
    mu: float | None = None
    seed: int | None = None
    diverged: bool = False
    diverged_time: float | None = None

    def terminal_error(self) -> float:
        if self.diverged or len(self.err_l2) == 0:
            return float("nan")
        return float(self.err_l2[-1])


def write_trajectory(path, traj: ErrorTrajectory, params: SolverParams,
                     config: AssimilationConfig):
    """CSV (t,err_l2,err_h1) plus a .meta sidecar of run metadata."""
    path = str(path)
    with open(path, "w") as fh:
        fh.write("t,err_l2,err_h1\n")
        for t, e0, e1 in zip(traj.t, traj.err_l2, traj.err_h1):
            fh.write(f"{t:.17g},{e0:.17g},{e1:.17g}\n")
    base = path[: -len(".csv")] if path.endswith(".csv") else path
    meta = {
        "scheme": traj.scheme,
        "delta": traj.delta,
        "kappa": traj.kappa,
        "mu": traj.mu,
        "nu": params.nu,
        "n": params.grid.n,
        "dt": params.dt,
        "seed": traj.seed,
        "lambda": config.interpolant.lambda_cut,
        "h": config.interpolant.h,
        "diverged": traj.diverged,
    }
    with open(base + ".meta", "w") as fh:
        for key, val in meta.items():
            if isinstance(val, float):
                val = f"{val:.17g}"
            elif val is None:
                val = "none"
            fh.write(f"{key} = {val}\n")


def read_trajectory_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 0], rows[:, 1], rows[:, 2]


# ---------------------------------------------------------------------------
# reference handle and the public field-level update


class ReferenceRun:
    """Reference trajectory handle: solver, initial state, start time."""

    def __init__(self, params: SolverParams, w0: SpectralVorticityField,
                 t0: float = 0.0):
        self.params = params
        self.solver = Solver(params)
        self.w0_half = self.solver.state_from_field(w0)
        self.t0 = t0


def insertion_update(
    u_pred: SpectralVelocityField,
    obs_ju: SpectralVelocityField,
    kappa: float,
    config: InterpolantConfig,
    smoother=None,
) -> SpectralVelocityField:
    """One insertion step: u_pred + kappa (JU - J u_pred).

    obs_ju must already be the smoothed observation of the reference at
    the update time.  kappa = 1 replaces the observed components
    outright; kappa above 1 (overrelaxation) is allowed for parameter
    studies.  A custom smoother(u) -> Ju may replace the default.
    """
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if smoother is None:
        ju = observation.filtered_interpolant(u_pred, config)
    else:
        ju = smoother(u_pred)
    out = u_pred.coeffs + kappa * (obs_ju.coeffs - ju.coeffs)
    return SpectralVelocityField(u_pred.spec, out)


# ---------------------------------------------------------------------------
# co-stepping engine


@dataclass
class _Consumer:
    scheme: AssimilationScheme
    m: int
    state: np.ndarray
    stream: ObservationStream
    t: list = field(default_factory=list)
    err_l2: list = field(default_factory=list)
    err_h1: list = field(default_factory=list)
    diverged: bool = False
    diverged_time: float | None = None


def _steps_for(delta: float, dt: float) -> int:
    m = int(round(delta / dt))
    if m < 1 or abs(m * dt - delta) > 1e-9 * max(1.0, abs(delta)):
        raise ValueError(f"delta = {delta} is not a positive multiple of dt = {dt}")
    return m


def _finite(arr: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(arr.view(np.float64))))


def _co_step(reference: ReferenceRun, schemes, T: float,
             config: AssimilationConfig, on_sample=None, initial_state=None):
    """Advance the reference once; feed every consumer from it.

    Returns the consumer list with recorded errors and final states.
    on_sample(idx, t, U_half, consumers) runs at each sampling index.
    initial_state overrides the default u0 = JU(t0).
    """
    solver = reference.solver
    dt = solver.params.dt
    observer = HalfSpectrumObserver(config.interpolant)
    n_steps = int(round(T / dt))
    if n_steps < 1:
        raise ValueError(f"horizon T = {T} shorter than one step")

    raw = config.ship_raw_vectors
    if raw:
        produce = observer.ball_means
        decode = observer.vector_to_vorticity
    else:
        produce = observer.smoothed_vorticity
        decode = lambda payload: payload

    if initial_state is None:
        u0 = decode(produce(reference.w0_half))
    else:
        u0 = solver.state_from_field(initial_state)
    consumers = []
    for scheme in schemes:
        m = 1 if scheme.kind == "nudging" else _steps_for(scheme.delta, dt)
        consumers.append(
            _Consumer(scheme=scheme, m=m, state=u0.copy(),
                      stream=ObservationStream(m))
        )

    def record(idx, t, U_half):
        for c in consumers:
            if c.diverged:
                continue
            diff = U_half - c.state
            c.t.append(t)
            c.err_l2.append(solver.norm_half(diff, 0.0))
            c.err_h1.append(solver.norm_half(diff, 1.0))
        if on_sample is not None:
            on_sample(idx, t, U_half, consumers)

    need_stages = any(
        c.scheme.kind == "nudging" and c.scheme.mu > 0 for c in consumers
    )
    U = reference.w0_half.copy()
    record(0, reference.t0, U)

    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_steps):
            idx = i + 1
            t = reference.t0 + idx * dt
            if need_stages:
                U_next, stages = solver.step_half(U, capture_stages=True)
                stage_payloads = tuple(produce(s) for s in stages)
            else:
                U_next = solver.step_half(U)
            if not _finite(U_next):
                raise SolverDivergenceError(idx, t)
            obs_payload = None  # built once if an insertion consumer samples now

            for c in consumers:
                if c.diverged:
                    continue
                scheme = c.scheme
                if scheme.kind == "nudging":
                    if scheme.mu > 0:
                        c.stream.push(idx, stage_payloads)
                        payload = c.stream.take(idx)
                        mu = scheme.mu

                        def hook(s, vs, _payload=payload, _mu=mu):
                            return _mu * (decode(_payload[s])
                                          - observer.smoothed_vorticity(vs))

                        c.state = solver.step_half(c.state, hook=hook)
                    else:
                        c.state = solver.step_half(c.state)
                else:
                    c.state = solver.step_half(c.state)
                    if idx % c.m == 0:
                        if obs_payload is None:
                            obs_payload = produce(U_next)
                        c.stream.push(idx, obs_payload)
                        ju = decode(c.stream.take(idx))
                        c.state = c.state + scheme.kappa * (
                            ju - observer.smoothed_vorticity(c.state)
                        )
                if not _finite(c.state):
                    c.diverged = True
                    c.diverged_time = t
            U = U_next
            if idx % config.sample_stride == 0 or idx == n_steps:
                record(idx, t, U)
    return consumers, U


def _trajectory(c: _Consumer, seed=None) -> ErrorTrajectory:
    s = c.scheme
    return ErrorTrajectory(
        scheme=s.kind,
        t=np.array(c.t),
        err_l2=np.array(c.err_l2),
        err_h1=np.array(c.err_h1),
        delta=s.delta,
        kappa=s.kappa,
        mu=s.mu,
        seed=seed,
        diverged=c.diverged,
        diverged_time=c.diverged_time,
    )


# ---------------------------------------------------------------------------
# public runners


def run_family(reference: ReferenceRun, schemes, T: float,
               config: AssimilationConfig, seed=None, initial_state=None):
    """One reference pass, many consumers; trajectories plus final fields."""
    consumers, _ = _co_step(reference, list(schemes), T, config,
                            initial_state=initial_state)
    out = []
    for c in consumers:
        final = reference.solver.field_from_state(c.state)
        out.append((_trajectory(c, seed), final))
    return out


def run_discrete(reference: ReferenceRun, scheme: AssimilationScheme,
                 T: float, config: AssimilationConfig, seed=None,
                 initial_state=None):
    """Insertion assimilation against a fresh reference pass."""
    if scheme.kind not in ("direct", "relaxed"):
        raise ValueError(f"run_discrete cannot run a {scheme.kind!r} scheme")
    return run_family(reference, [scheme], T, config, seed, initial_state)[0]


def run_nudging(reference: ReferenceRun, mu: float, T: float,
                config: AssimilationConfig, seed=None, initial_state=None):
    """Continuously nudged assimilation against a fresh reference pass."""
    scheme = AssimilationScheme(kind="nudging", mu=mu)
    return run_family(reference, [scheme], T, config, seed, initial_state)[0]


@dataclass(frozen=True)
class GapRecord:
    """sup over sampled times of the insertion-vs-nudging distance."""

    delta: float
    kappa: float
    sup_l2: float
    sup_h1: float
    diverged: bool


def compare_discrete_vs_nudging(reference: ReferenceRun, deltas, mu: float,
                                T: float, config: AssimilationConfig):
    """Distance between relaxed insertion (kappa = min(1, mu delta)) and
    nudging with the same mu, per delta; one shared reference pass."""
    deltas = list(deltas)
    if not deltas:
        raise ValueError("no deltas to compare")
    schemes = [
        AssimilationScheme(kind="relaxed", delta=d, mu=mu) for d in deltas
    ]
    schemes.append(AssimilationScheme(kind="nudging", mu=mu))
    sups = np.zeros((len(deltas), 2))
    solver = reference.solver

    def on_sample(idx, t, U_half, consumers):
        v = consumers[-1]
        if v.diverged:
            return
        for j, c in enumerate(consumers[:-1]):
            if c.diverged:
                continue
            diff = c.state - v.state
            sups[j, 0] = max(sups[j, 0], solver.norm_half(diff, 0.0))
            sups[j, 1] = max(sups[j, 1], solver.norm_half(diff, 1.0))

    consumers, _ = _co_step(reference, schemes, T, config, on_sample=on_sample)
    records = []
    for j, c in enumerate(consumers[:-1]):
        bad = c.diverged or consumers[-1].diverged
        records.append(
            GapRecord(
                delta=deltas[j],
                kappa=c.scheme.kappa,
                sup_l2=float(sups[j, 0]) if not bad else float("nan"),
                sup_h1=float(sups[j, 1]) if not bad else float("nan"),
                diverged=bad,
            )
        )
    return records
