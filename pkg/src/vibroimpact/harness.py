"""
Stepped-sine sweeps and convergence studies.

A sweep visits the excitation frequencies of a :class:`SweepPlan` in
order, starting every frequency from the final state of the previous
one. At each frequency the response first settles for
``wait_periods`` and is then recorded for ``record_periods``; the wait
is extended block by block while the RMS of the recorded block differs
from the preceding block by more than ``settle_tol``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .contact import ContactConfig, ContactNonConvergence
from .integrator import (
    Excitation,
    IntegrationError,
    IntegratorState,
    initial_state,
    linear_steady_state,
    merge_invariants,
    resample_state,
    simulate,
)
from .postproc import TimeSeries, contact_activity, per_period_amplitudes, rms
from .rom import ReducedModel

__all__ = [
    "SweepPlan",
    "SweepStep",
    "SweepResult",
    "stepped_sine",
    "eps_rms",
    "state_hash",
    "ConvergenceTable",
    "convergence_time_study",
    "convergence_modes_study",
    "SUMMARY_COLUMNS",
]

log = logging.getLogger(__name__)

SETTLE_TOL = 0.02


class StudyError(RuntimeError):
    pass


def eps_rms(u, u_ref) -> float:
    """Relative RMS error ``sqrt(sum |u - u_ref|^2 / sum |u_ref|^2)``."""
    u = np.asarray(u, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if u.shape != u_ref.shape:
        raise ValueError(f"series lengths differ: {u.shape} vs {u_ref.shape}")
    den = float(np.sum(u_ref**2))
    if den == 0.0:
        raise ValueError("reference series is identically zero")
    return float(np.sqrt(np.sum((u - u_ref) ** 2) / den))


def state_hash(state: IntegratorState) -> str:
    """SHA-256 of the physical state (``g``, ``lam``, ``eta``, ``eta_dot``); the clock is excluded."""
    h = hashlib.sha256()
    for a in (state.g, state.lam, state.eta, state.eta_dot):
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


# -- stepped sine ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPlan:
    """One stepped-sine test.

    ``freq_grid`` holds ``Omega / omega_ref`` values in the order given by
    ``direction``: ascending for ``"up"``, descending for ``"down"``.
    """

    freq_grid: tuple
    direction: str = "up"
    level: float = 0.0
    wait_periods: int = 200
    record_periods: int = 100
    clearance: float = 0.0
    steps_per_period: int = 1000
    stride: int = 1
    max_extensions: int = 4
    settle_tol: float = SETTLE_TOL
    on_error: str = "abort"
    start: str = "linear"

    def __post_init__(self):
        grid = np.asarray(self.freq_grid, dtype=float)
        object.__setattr__(self, "freq_grid", tuple(float(x) for x in grid))
        if grid.size == 0 or np.any(grid <= 0):
            raise ValueError("frequency grid must be non-empty and positive")
        if self.direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")
        steps = np.diff(grid)
        if self.direction == "up" and np.any(steps <= 0):
            raise ValueError("an upward sweep needs a strictly ascending grid")
        if self.direction == "down" and np.any(steps >= 0):
            raise ValueError("a downward sweep needs a strictly descending grid")
        if self.wait_periods < 1 or self.record_periods < 1:
            raise ValueError("wait_periods and record_periods must be at least 1")
        if self.level < 0:
            raise ValueError("excitation level must be non-negative")
        if self.steps_per_period < 2 or self.stride < 1:
            raise ValueError("invalid time resolution")
        if self.stride > self.steps_per_period:
            raise ValueError("output stride exceeds the steps per period")
        if self.on_error not in ("abort", "skip"):
            raise ValueError("on_error must be 'abort' or 'skip'")
        if self.start not in ("linear", "rest"):
            raise ValueError("start must be 'linear' or 'rest'")

    @classmethod
    def from_grid(cls, grid, direction="up", **kw) -> "SweepPlan":
        """Build a plan from an unordered grid, sorting it for ``direction``."""
        g = np.unique(np.asarray(grid, dtype=float))
        return cls(tuple(g if direction == "up" else g[::-1]), direction=direction, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freq_grid"] = list(self.freq_grid)
        return d


@dataclass
class SweepStep:
    ratio: float
    omega: float
    series: TimeSeries | None
    rms: dict
    extrema: dict
    contact_fraction: float
    settled: bool
    extensions: int
    state_in: str
    state_out: str
    error: str | None = None
    invariants: dict = field(default_factory=dict)


SUMMARY_COLUMNS = ("omega_ratio", "omega", "rms_{obs}", "amp_min_{obs}", "amp_max_{obs}",
                   "amp_mean_{obs}", "contact_fraction", "settled", "extensions")


@dataclass
class SweepResult:
    plan: SweepPlan
    steps: list
    omega_ref: float
    model_hash: str = ""
    final_state: IntegratorState | None = field(default=None, repr=False)

    @property
    def invariants(self) -> dict:
        """Worst contact invariants over every accepted step of the sweep."""
        out = None
        for s in self.steps:
            if s.invariants:
                out = merge_invariants(out, s.invariants)
        return out or {}

    @property
    def ratios(self) -> np.ndarray:
        return np.array([s.ratio for s in self.steps])

    def rms_curve(self, channel: str) -> np.ndarray:
        return np.array([s.rms.get(channel, np.nan) for s in self.steps])

    def extrema_curve(self, channel: str) -> np.ndarray:
        """``(n_steps, 3)`` array of per-period min/max/mean amplitudes."""
        return np.array([s.extrema.get(channel, (np.nan,) * 3) for s in self.steps])

    def columns(self) -> list[str]:
        chans = sorted(self.steps[0].rms) if self.steps else []
        cols = ["omega_ratio", "omega"]
        cols += [f"rms_{c}" for c in chans]
        for c in chans:
            cols += [f"amp_min_{c}", f"amp_max_{c}", f"amp_mean_{c}"]
        return cols + ["contact_fraction", "settled", "extensions"]

    def summary_rows(self) -> list[list]:
        rows = []
        for s in self.steps:
            chans = sorted(s.rms)
            row = [s.ratio, s.omega] + [s.rms[c] for c in chans]
            for c in chans:
                row += list(s.extrema[c])
            rows.append(row + [s.contact_fraction, int(s.settled), s.extensions])
        return rows

    def save(self, directory, series: bool = True) -> Path:
        """Write ``summary.csv``, ``manifest.json`` and one series per step."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for row in self.summary_rows():
                w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
        steps = []
        for i, s in enumerate(self.steps):
            name = f"step_{i:03d}"
            if series and s.series is not None:
                s.series.save(out / name)
            steps.append({"index": i, "omega_ratio": s.ratio, "series": name,
                          "state_in": s.state_in, "state_out": s.state_out,
                          "settled": s.settled, "extensions": s.extensions, "error": s.error})
        manifest = {"plan": self.plan.to_dict(), "omega_ref": self.omega_ref,
                    "model_hash": self.model_hash, "steps": steps}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return out


def _velocity_channels(rom: ReducedModel) -> list[str]:
    return [f"v_{n}" for n in rom.observer_names]


def stepped_sine(rom: ReducedModel, config: ContactConfig, plan: SweepPlan,
                 omega_ref: float | None = None, state0: IntegratorState | None = None,
                 keep_series: bool = True, model_hash: str = "") -> SweepResult:
    """Run one stepped-sine test with state carry-over between frequencies.

    ``omega_ref`` defaults to the second free-interface mode (the
    normalization frequency of the grid). The ROM clearance is replaced
    by ``plan.clearance``. Settling blocks are extended up to
    ``plan.max_extensions`` times; a step that still misses the
    tolerance is kept and marked ``settled=False``.

    Without ``state0`` the sweep starts from the open-contact periodic
    response at the first frequency (``plan.start="linear"``), the
    counterpart of slowly ramping up the shaker, or from rest.
    """
    config = config or ContactConfig()
    if omega_ref is None:
        omega_ref = float(rom.omegas[min(1, rom.n_modes - 1)])
    rom = rom.with_clearance(plan.clearance)
    if state0 is None:
        first = Excitation(plan.freq_grid[0] * omega_ref, plan.level)
        if plan.start == "linear":
            state0 = linear_steady_state(rom, first, first.period / plan.steps_per_period, config)
        else:
            state0 = initial_state(rom, config)
    state = state0
    channels = _velocity_channels(rom)
    steps = []
    for ratio in plan.freq_grid:
        omega = ratio * omega_ref
        exc = Excitation(omega, plan.level)
        spp = plan.steps_per_period
        dt = exc.period / spp
        # Blocks span whole periods, so restarting the clock at zero keeps the
        # excitation phase continuous; the state itself is carried bit for bit.
        state_in = IntegratorState(state.g, state.lam, state.eta, state.eta_dot, state.j, 0.0)
        h_in = state_hash(state_in)
        try:
            step = _settle_and_record(rom, config, exc, dt, plan, state_in, channels)
        except (ContactNonConvergence, IntegrationError) as exc_err:
            log.error("sweep step at Omega/omega_ref=%.5f failed: %s", ratio, exc_err)
            if plan.on_error == "abort":
                raise
            steps.append(SweepStep(ratio, omega, None, {}, {}, float("nan"), False, 0, h_in,
                                   h_in, error=str(exc_err)))
            continue
        series, settled, ext, inv = step
        state = series.final_state
        act = contact_activity(series)
        steps.append(SweepStep(
            ratio=ratio, omega=omega, series=series if keep_series else None,
            rms={c: rms(series, c) for c in channels},
            extrema={c: per_period_amplitudes(series, c) for c in channels},
            contact_fraction=act.fraction, settled=settled, extensions=ext,
            state_in=h_in, state_out=state_hash(state), invariants=inv,
        ))
    return SweepResult(plan=plan, steps=steps, omega_ref=float(omega_ref),
                       model_hash=model_hash, final_state=state)


def _settle_and_record(rom, config, exc, dt, plan, state, channels):
    spp = plan.steps_per_period
    inv = None

    def run(s0, n, stride):
        nonlocal inv
        ts = simulate(rom, config, exc, None, dt, s0, n_steps=n, stride=stride)
        inv = merge_invariants(inv, ts.meta["invariants"])
        return ts

    n_rec = plan.record_periods * spp
    n_pre = max(plan.wait_periods - plan.record_periods, 0) * spp
    if n_pre:
        state = run(state, n_pre, spp).final_state
    # block preceding the record (from the wait time when it is long enough)
    n_prev = min(plan.wait_periods, plan.record_periods) * spp
    prev = run(state, n_prev, plan.stride)
    prev_rms = {c: rms(prev, c) for c in channels}
    ext = 0
    while True:
        rec = run(prev.final_state, n_rec, plan.stride)
        now = {c: rms(rec, c) for c in channels}
        change = max(abs(now[c] - prev_rms[c]) / max(prev_rms[c], 1e-300) for c in channels)
        if change <= plan.settle_tol:
            return rec, True, ext, inv
        if ext >= plan.max_extensions:
            log.warning("Omega=%.6g rad/s: RMS still changes by %.1f%% after %d extensions",
                        exc.omega, 100 * change, ext)
            return rec, False, ext, inv
        ext += 1
        log.info("Omega=%.6g rad/s: RMS changed by %.1f%%, extending wait (%d)",
                 exc.omega, 100 * change, ext)
        prev, prev_rms = rec, now


# -- convergence studies -------------------------------------------------------------


@dataclass
class ConvergenceTable:
    """Error table of a convergence study.

    ``values`` are the study parameters (steps per period or mode
    counts), ``eps`` the trajectory error against the reference,
    ``rms`` the RMS velocity and ``rms_change`` its relative deviation
    from the reference RMS. Failed runs hold NaN and a message in
    ``failures``.
    """

    parameter: str
    values: list
    eps: np.ndarray
    rms: np.ndarray
    rms_change: np.ndarray
    channel: str
    failures: dict = field(default_factory=dict)

    def rows(self):
        for v, e, r, c in zip(self.values, self.eps, self.rms, self.rms_change):
            yield v, e, r, c

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.parameter, "eps_rms", "rms", "rms_change", "status"])
            for v, e, r, c in self.rows():
                w.writerow([v, repr(float(e)), repr(float(r)), repr(float(c)),
                            self.failures.get(v, "ok")])

    def threshold_index(self, tol: float = 0.01) -> int | None:
        """First index from which every RMS change stays below ``tol``."""
        ok = np.nan_to_num(self.rms_change, nan=np.inf) < tol
        for i in range(len(ok)):
            if ok[i:].all():
                return i
        return None


def _centered_velocity(series: TimeSeries, name: str) -> np.ndarray:
    """Velocity at the displacement grid from the staggered difference quotients.

    ``v[k]`` lives at ``t[k] - dt/2``; averaging neighbours gives a
    second-order estimate at ``t[k]`` for ``k < n - 1``.
    """
    v = series[name]
    return 0.5 * (v[:-1] + v[1:])


def convergence_time_study(rom: ReducedModel, config: ContactConfig, exc: Excitation,
                           steps_per_period_list, horizon_periods: int = 5,
                           state0: IntegratorState | None = None, state0_dt: float | None = None,
                           observer: str | None = None) -> ConvergenceTable:
    """Trajectory error against the finest resolution from one shared initial state.

    All runs start from ``state0`` (a rest state by default; a settled
    state from a run with step ``state0_dt`` is re-centred to each step
    size). The tip velocity is compared on the grid of the coarsest
    resolution, which must divide every other entry. Runs that fail or
    diverge are recorded with NaN errors.
    """
    spps = [int(s) for s in steps_per_period_list]
    if not spps or spps != sorted(spps) or len(set(spps)) != len(spps):
        raise ValueError("steps_per_period_list must be strictly ascending")
    base = spps[0]
    if any(s % base for s in spps):
        raise ValueError("every resolution must be a multiple of the coarsest one")
    observer = observer or rom.observer_names[0]
    chan = f"v_{observer}"
    state0 = state0 or initial_state(rom, config)
    T = exc.period
    samples = {}
    failures = {}
    for spp in spps:
        dt = T / spp
        s0 = resample_state(state0, rom, state0_dt, dt) if state0_dt else state0
        try:
            ts = simulate(rom, config, exc, None, dt, s0, n_steps=horizon_periods * spp + 1)
        except (ContactNonConvergence, IntegrationError) as err:
            log.warning("%d steps/period: %s", spp, err)
            failures[spp] = str(err)
            continue
        v = _centered_velocity(ts, chan)
        samples[spp] = v[spp // base - 1::spp // base][: horizon_periods * base]
    ref = samples.get(spps[-1])
    if ref is None:
        raise StudyError("the reference resolution failed")
    eps, r, change = [], [], []
    r_ref = rms(ref)
    for spp in spps:
        if spp in samples:
            u = samples[spp]
            eps.append(eps_rms(u, ref))
            r.append(rms(u))
            change.append(abs(r[-1] - r_ref) / r_ref)
        else:
            eps.append(np.nan)
            r.append(np.nan)
            change.append(np.nan)
    return ConvergenceTable("steps_per_period", spps, np.array(eps), np.array(r),
                            np.array(change), chan, failures)


def convergence_modes_study(reduce, config: ContactConfig, exc: Excitation, n_modes_list,
                            horizon_periods: int = 100, settle_periods: int = 400,
                            steps_per_period: int = 1000, stride: int = 1,
                            observer: str | None = None) -> ConvergenceTable:
    """RMS velocity against mode count, the largest count being the reference.

    ``reduce(n)`` returns a ready reduced model (damping and clearance
    set) with ``n`` retained modes. Each basis settles from rest for
    ``settle_periods`` at the excitation before ``horizon_periods`` are
    recorded, since modal states of different bases cannot be shared.
    The record keeps every ``stride``-th sample.
    """
    ns = [int(n) for n in n_modes_list]
    if not ns or ns != sorted(ns) or len(set(ns)) != len(ns):
        raise ValueError("n_modes_list must be strictly ascending")
    dt = exc.period / steps_per_period
    records = {}
    failures = {}
    chan = None
    for n in ns:
        try:
            rom = reduce(n)
        except Exception as err:
            raise StudyError(f"reduction with {n} modes failed: {err}") from err
        chan = chan or f"v_{observer or rom.observer_names[0]}"
        try:
            s = simulate(rom, config, exc, None, dt, None,
                         n_steps=settle_periods * steps_per_period,
                         stride=steps_per_period).final_state
            ts = simulate(rom, config, exc, None, dt, s,
                          n_steps=horizon_periods * steps_per_period, stride=stride)
        except (ContactNonConvergence, IntegrationError) as err:
            log.warning("%d modes: %s", n, err)
            failures[n] = str(err)
            continue
        records[n] = ts[chan]
    ref = records.get(ns[-1])
    if ref is None:
        raise StudyError("the reference basis failed")
    r_ref = rms(ref)
    eps, r, change = [], [], []
    for n in ns:
        u = records.get(n)
        if u is None:
            eps.append(np.nan)
            r.append(np.nan)
            change.append(np.nan)
            continue
        eps.append(eps_rms(u, ref))
        r.append(rms(u))
        change.append(abs(r[-1] - r_ref) / r_ref)
    return ConvergenceTable("n_modes", ns, np.array(eps), np.array(r), np.array(change),
                            chan, failures)
