"""
Semi-explicit leapfrog time stepping of the reduced contact model.

Per time step the modal velocities sit half a step behind the
displacements. The boundary coordinates have no inertia, so they are
found implicitly together with the contact forces, while the modal
coordinates are advanced explicitly::

    (eta'[j+1/2] - eta'[j-1/2]) / dt + D (eta'[j+1/2] + eta'[j-1/2]) / 2
        + K_geta^T g[j] + K_etaeta eta[j] = -beta a_base[j]
    eta[j+1] = eta[j] + eta'[j+1/2] dt
    K_gg g[j+1] + K_geta eta[j+1] - lam[j+1] = 0,   g[j+1] = g[j] + gamma dt

An :class:`IntegratorState` is the fully solved state at ``t_j``:
``g``, ``lam`` and ``eta`` at ``t_j`` and ``eta_dot`` at ``t_{j-1/2}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .contact import ContactConfig, ContactNonConvergence, _boundary_solve
from .postproc import TimeSeries
from .rom import ReducedModel

__all__ = [
    "Excitation",
    "IntegratorState",
    "IntegrationError",
    "base_displacement",
    "base_velocity",
    "base_acceleration",
    "initial_state",
    "linear_steady_state",
    "resample_state",
    "step",
    "simulate",
    "harmonic_response",
    "modal_energy",
    "stable_time_step",
    "INVARIANT_KEYS",
    "merge_invariants",
]

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Excitation:
    """Harmonic base displacement ``q_base(t) = amplitude sin(omega t + phase)``."""

    omega: float
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("excitation frequency must be positive")
        if self.amplitude < 0:
            raise ValueError("base amplitude must be non-negative")

    @property
    def period(self) -> float:
        return 2 * np.pi / self.omega


def base_displacement(exc: Excitation, t):
    return exc.amplitude * np.sin(exc.omega * np.asarray(t) + exc.phase)


def base_velocity(exc: Excitation, t):
    return exc.amplitude * exc.omega * np.cos(exc.omega * np.asarray(t) + exc.phase)


def base_acceleration(exc: Excitation, t):
    """Second time derivative of :func:`base_displacement`."""
    return -exc.amplitude * exc.omega**2 * np.sin(exc.omega * np.asarray(t) + exc.phase)


@dataclass(frozen=True)
class IntegratorState:
    g: np.ndarray
    lam: np.ndarray
    eta: np.ndarray
    eta_dot: np.ndarray
    j: int = 0
    t: float = 0.0

    def check(self):
        for name in ("g", "lam", "eta", "eta_dot"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise IntegrationError(f"non-finite {name} at step {self.j}")
        return self

    def arrays(self):
        return (self.g.copy(), self.lam.copy(), self.eta.copy(), self.eta_dot.copy())


# -- compiled core ---------------------------------------------------------------


@njit(cache=True)
def _advance(g, lam, eta, etad, qdd, dt, Kgg_inv, S, KgeT, Kee, D, beta, g0, d, mu, rho, tol,
             max_iter, g_prev, lam_prev, g_free, scratch):
    """One step in place; returns ``(converged, iterations, n_active)``."""
    n = eta.size
    m = g.size
    f = KgeT @ g + Kee @ eta
    inv_dt = 1.0 / dt
    for i in range(n):
        fi = f[i] + beta[i] * qdd
        etad[i] = ((inv_dt - 0.5 * D[i]) * etad[i] - fi) / (inv_dt + 0.5 * D[i])
        eta[i] += etad[i] * dt
    for i in range(m):
        acc = 0.0
        for k in range(n):
            acc -= S[i, k] * eta[k]
        g_free[i] = acc
        g_prev[i] = g[i]
        lam_prev[i] = lam[i]
    return _boundary_solve(Kgg_inv, g_free, g_prev, lam_prev, g0, d, dt, mu, rho, tol,
                           max_iter, g, lam, scratch)


INVARIANT_KEYS = ("min_lambda_n", "min_gap", "max_friction_excess", "max_stick_slip",
                  "max_gamma", "stick_steps")


def _new_invariants() -> np.ndarray:
    return np.array([np.inf, np.inf, -np.inf, 0.0, 0.0, 0.0])


def merge_invariants(a: dict | None, b: dict) -> dict:
    """Combine invariant summaries of consecutive runs."""
    if not a:
        return dict(b)
    return {
        "min_lambda_n": min(a["min_lambda_n"], b["min_lambda_n"]),
        "min_gap": min(a["min_gap"], b["min_gap"]),
        "max_friction_excess": max(a["max_friction_excess"], b["max_friction_excess"]),
        "max_stick_slip": max(a["max_stick_slip"], b["max_stick_slip"]),
        "max_gamma": max(a["max_gamma"], b["max_gamma"]),
        "stick_steps": a["stick_steps"] + b["stick_steps"],
    }


@njit(cache=True)
def _track_invariants(g, lam, g_old, g0, d, mu, tol, dt, inv):
    """Update ``[min lam_n, min physical gap, max(|lam_t| - mu lam_n (1 + 1e-6)),
    max stick |gamma_t|, max |gamma|, stick count]`` with one accepted step.

    A pair sticks when ``|lam_t| < mu lam_n (1 - tol)``.
    """
    for k in range(g.size // d):
        s = k * d
        ln = lam[s]
        if ln < inv[0]:
            inv[0] = ln
        gap = g[s] + g0[k]
        if gap < inv[1]:
            inv[1] = gap
        lt = 0.0
        gt = 0.0
        for i in range(1, d):
            lt += lam[s + i] ** 2
            gt += ((g[s + i] - g_old[s + i]) / dt) ** 2
        lt = np.sqrt(lt)
        gt = np.sqrt(gt)
        excess = lt - mu * max(ln, 0.0) * (1.0 + 1e-6)
        if excess > inv[2]:
            inv[2] = excess
        for i in range(d):
            ga = abs(g[s + i] - g_old[s + i]) / dt
            if ga > inv[4]:
                inv[4] = ga
        if ln > 0.0 and d > 1 and lt < mu * ln * (1.0 - tol):
            inv[5] += 1.0
            if gt > inv[3]:
                inv[3] = gt


@njit(cache=True)
def _finite(x):
    for v in x:
        if not np.isfinite(v):
            return False
    return True


@njit(cache=True)
def _run(Kgg_inv, S, KgeT, Kee, D, beta, R, obs_base, g0, d, mu, rho, tol, max_iter,
         dt, n_steps, stride, omega, qhat, phase, t0, g, lam, eta, etad,
         rec_t, rec_u, rec_v, rec_g, rec_lam, rec_act, rec_qb, rec_it, stats, inv):
    """Leapfrog loop with output recording every ``stride`` steps.

    ``stats`` receives ``[steps done, total sweeps, max sweeps, retries,
    active steps, status]``; status 0 is success, 1 contact failure, 2
    non-finite state. ``inv`` accumulates contact invariants over every
    accepted step (see :data:`INVARIANT_KEYS`).
    """
    m = g.size
    n = eta.size
    no = R.shape[0]
    g_prev = np.empty(m)
    lam_prev = np.empty(m)
    g_free = np.empty(m)
    scratch = np.empty(0)
    bg = np.empty(m)
    bl = np.empty(m)
    be = np.empty(n)
    bd = np.empty(n)
    y = np.empty(m + n)
    u_old = np.empty(no)
    u_new = np.empty(no)
    for i in range(m):
        y[i] = g[i]
    for i in range(n):
        y[m + i] = eta[i]
    qb = qhat * np.sin(omega * t0 + phase)
    u_old[:] = R @ y + obs_base * qb
    k = 0
    t = t0
    for j in range(n_steps):
        qdd = -qhat * omega * omega * np.sin(omega * t + phase)
        bg[:] = g
        bl[:] = lam
        be[:] = eta
        bd[:] = etad
        ok, it, na = _advance(g, lam, eta, etad, qdd, dt, Kgg_inv, S, KgeT, Kee, D, beta, g0,
                              d, mu, rho, tol, max_iter, g_prev, lam_prev, g_free, scratch)
        if not ok:
            g[:] = bg
            lam[:] = bl
            eta[:] = be
            etad[:] = bd
            stats[3] += 1
            ok, it1, na = _advance(g, lam, eta, etad, qdd, 0.5 * dt, Kgg_inv, S, KgeT, Kee, D,
                                   beta, g0, d, mu, rho, tol, max_iter, g_prev, lam_prev,
                                   g_free, scratch)
            it2 = 0
            if ok:
                qdd2 = -qhat * omega * omega * np.sin(omega * (t + 0.5 * dt) + phase)
                ok, it2, na = _advance(g, lam, eta, etad, qdd2, 0.5 * dt, Kgg_inv, S, KgeT, Kee,
                                       D, beta, g0, d, mu, rho, tol, max_iter, g_prev,
                                       lam_prev, g_free, scratch)
            it = it1 + it2
            if not ok:
                stats[0] = j
                stats[5] = 1
                return
        t = t0 + (j + 1) * dt
        if not (_finite(eta) and _finite(etad) and _finite(g)):
            stats[0] = j
            stats[5] = 2
            return
        stats[1] += it
        if it > stats[2]:
            stats[2] = it
        _track_invariants(g, lam, bg, g0, d, mu, tol, dt, inv)
        if na > 0:
            stats[4] += 1
        for i in range(m):
            y[i] = g[i]
        for i in range(n):
            y[m + i] = eta[i]
        qb = qhat * np.sin(omega * t + phase)
        u_new[:] = R @ y + obs_base * qb
        if (j + 1) % stride == 0 and k < rec_t.size:
            rec_t[k] = t
            rec_u[k, :] = u_new
            rec_v[k, :] = (u_new - u_old) / dt
            rec_g[k, :] = g
            rec_lam[k, :] = lam
            rec_act[k] = 1.0 if na > 0 else 0.0
            rec_qb[k] = qb
            rec_it[k] = it
            k += 1
        u_old[:] = u_new
    stats[0] = n_steps
    stats[5] = 0


# -- Python API ------------------------------------------------------------------


class _Operators:
    """Dense operators cached per reduced model."""

    def __init__(self, rom: ReducedModel):
        Kinv = np.linalg.inv(rom.K_gg)
        self.Kgg_inv = np.ascontiguousarray(0.5 * (Kinv + Kinv.T))
        self.S = np.ascontiguousarray(self.Kgg_inv @ rom.K_geta)
        self.KgeT = np.ascontiguousarray(rom.K_geta.T)
        self.Kee = np.ascontiguousarray(rom.K_etaeta)
        self.D = np.ascontiguousarray(rom.D, dtype=float)
        self.beta = np.ascontiguousarray(rom.beta, dtype=float)
        self.R = np.ascontiguousarray(rom.R, dtype=float)
        self.obs_base = np.ascontiguousarray(rom.observer_base, dtype=float)
        self.g0 = np.ascontiguousarray(rom.g0, dtype=float)
        self.dt_stable = stable_time_step(rom)


_OPS_CACHE: dict[int, tuple] = {}


def _operators(rom: ReducedModel) -> _Operators:
    key = id(rom)
    hit = _OPS_CACHE.get(key)
    if hit is not None and hit[0] is rom:
        return hit[1]
    ops = _Operators(rom)
    if len(_OPS_CACHE) > 32:
        _OPS_CACHE.clear()
    _OPS_CACHE[key] = (rom, ops)
    return ops


def stable_time_step(rom: ReducedModel, closed: bool = True) -> float:
    """Largest undamped-stable step ``2 / omega_max``.

    With ``closed`` the bound uses the modal stiffness with all boundary
    coordinates held (``K_etaeta``), the stiffest configuration a stuck
    contact can produce; otherwise the free-interface frequencies.
    """
    if closed:
        w2 = float(np.linalg.eigvalsh(rom.K_etaeta)[-1])
    else:
        w2 = float(np.max(rom.omegas)) ** 2
    return 2.0 / np.sqrt(w2)


def initial_state(rom: ReducedModel, contact: ContactConfig | None = None) -> IntegratorState:
    """Rest state: ``eta = eta' = 0`` and ``g`` in static contact equilibrium."""
    contact = contact or ContactConfig()
    ops = _operators(rom)
    m = rom.n_boundary
    g = np.zeros(m)
    lam = np.zeros(m)
    ok, _, _ = _boundary_solve(ops.Kgg_inv, np.zeros(m), np.zeros(m), np.zeros(m), ops.g0,
                               rom.pair_dim, 1.0, contact.mu, contact.rho, contact.tol_rel,
                               contact.max_iter, g, lam, np.empty(0))
    if not ok:
        raise ContactNonConvergence("initial contact equilibrium did not converge")
    n = rom.n_modes
    return IntegratorState(g=g, lam=lam, eta=np.zeros(n), eta_dot=np.zeros(n))


def linear_steady_state(rom: ReducedModel, exc: Excitation, dt: float,
                        contact: ContactConfig | None = None) -> IntegratorState:
    """Periodic open-contact response at ``t = 0``, as a starting state.

    The modal amplitudes come from the harmonic solution of the
    condensed modal equations; ``eta_dot`` is evaluated at ``-dt/2`` to
    match the staggered grid. The boundary state is then solved with
    the contact laws, so the state stays admissible when the linear
    amplitude already exceeds the clearance.
    """
    contact = contact or ContactConfig()
    ops = _operators(rom)
    w = exc.omega
    Kc = rom.K_etaeta - rom.K_geta.T @ ops.S
    A = Kc - w**2 * np.eye(rom.n_modes) + 1j * w * np.diag(rom.D)
    H = np.linalg.solve(A, rom.beta * (w**2 * exc.amplitude)) * np.exp(1j * exc.phase)
    eta = H.imag.copy()
    eta_dot = (1j * w * H * np.exp(-0.5j * w * dt)).imag.copy()
    m = rom.n_boundary
    g = np.zeros(m)
    lam = np.zeros(m)
    g_free = -ops.S @ eta
    ok, _, _ = _boundary_solve(ops.Kgg_inv, g_free, g_free.copy(), np.zeros(m), ops.g0,
                               rom.pair_dim, dt, contact.mu, contact.rho, contact.tol_rel,
                               contact.max_iter, g, lam, np.empty(0))
    if not ok:
        raise ContactNonConvergence("contact solve for the starting state did not converge")
    return IntegratorState(g=g, lam=lam, eta=eta, eta_dot=eta_dot)


def resample_state(state: IntegratorState, rom: ReducedModel, dt_from: float, dt_to: float,
                   exc: Excitation | None = None) -> IntegratorState:
    """Re-centre the staggered modal velocity for a new step size.

    The velocity at ``t_j`` is estimated as ``eta'[j-1/2] + dt_from/2 * a``
    with ``a`` the modal acceleration at ``t_j``, and the new half-step
    velocity is ``v - dt_to/2 * a``. Both estimates are second-order
    accurate, so runs with different step sizes start consistently.
    """
    if dt_from == dt_to:
        return state
    qdd = float(base_acceleration(exc, state.t)) if exc is not None else 0.0
    f = rom.K_geta.T @ state.g + rom.K_etaeta @ state.eta + rom.beta * qdd
    a = -f - rom.D * state.eta_dot
    # trapezoidal damping: solve v = etad + h a(v) for the damped part
    h = 0.5 * dt_from
    v = (state.eta_dot - h * f) / (1.0 + h * rom.D)
    a = -f - rom.D * v
    eta_dot = v - 0.5 * dt_to * a
    return IntegratorState(state.g.copy(), state.lam.copy(), state.eta.copy(), eta_dot,
                           state.j, state.t)


def step(state: IntegratorState, rom: ReducedModel, contact: ContactConfig,
         exc: Excitation, dt: float) -> IntegratorState:
    """Advance a solved state at ``t_j`` by one step.

    On contact non-convergence the step is retried once as two half
    steps before :class:`ContactNonConvergence` is raised.
    """
    if not dt > 0:
        raise ValueError("time step must be positive")
    ops = _operators(rom)
    m = rom.n_boundary
    g, lam, eta, etad = state.arrays()
    work = (np.empty(m), np.empty(m), np.empty(m), np.empty(0))
    args = (ops.Kgg_inv, ops.S, ops.KgeT, ops.Kee, ops.D, ops.beta, ops.g0, rom.pair_dim,
            contact.mu, contact.rho, contact.tol_rel, contact.max_iter)
    qdd = float(base_acceleration(exc, state.t))
    ok, _, _ = _advance(g, lam, eta, etad, qdd, dt, *args, *work)
    if not ok:
        log.warning("contact solve failed at t=%.6g, retrying with two half steps", state.t)
        g, lam, eta, etad = state.arrays()
        ok, _, _ = _advance(g, lam, eta, etad, qdd, 0.5 * dt, *args, *work)
        if ok:
            qdd2 = float(base_acceleration(exc, state.t + 0.5 * dt))
            ok, _, _ = _advance(g, lam, eta, etad, qdd2, 0.5 * dt, *args, *work)
        if not ok:
            raise ContactNonConvergence(f"contact solve failed at t={state.t:.6g}")
    return IntegratorState(g, lam, eta, etad, state.j + 1, state.t + dt).check()


def simulate(rom: ReducedModel, contact: ContactConfig, exc: Excitation, t_end: float | None,
             dt: float, state0: IntegratorState | None = None, *, n_steps: int | None = None,
             stride: int = 1, meta: dict | None = None) -> TimeSeries:
    """Run the scheme from ``state0`` and record observer outputs.

    Channels: ``u_<observer>`` (displacement including base motion for
    observers aligned with it), ``v_<observer>`` (difference quotient of
    ``u`` over the last step, i.e. the velocity at ``t - dt/2``),
    ``g_<k>``/``lam_<k>`` per boundary component, ``active``,
    ``q_base`` and ``iterations``. The final state is attached as
    ``series.final_state``; its time restarts the clock of the next call.
    """
    if n_steps is None:
        if t_end is None or not t_end > 0:
            raise ValueError("t_end must be positive")
        n_steps = int(round(t_end / dt))
    if not dt > 0:
        raise ValueError("time step must be positive")
    state0 = state0 or initial_state(rom, contact)
    ops = _operators(rom)
    if dt > ops.dt_stable:
        log.warning("dt=%.3g s exceeds the closed-contact stability limit %.3g s",
                    dt, ops.dt_stable)
    g, lam, eta, etad = state0.arrays()
    n_rec = n_steps // stride
    no = rom.R.shape[0]
    m = rom.n_boundary
    rec_t = np.zeros(n_rec)
    rec_u = np.zeros((n_rec, no))
    rec_v = np.zeros((n_rec, no))
    rec_g = np.zeros((n_rec, m))
    rec_lam = np.zeros((n_rec, m))
    rec_act = np.zeros(n_rec)
    rec_qb = np.zeros(n_rec)
    rec_it = np.zeros(n_rec)
    stats = np.zeros(6, dtype=np.int64)
    inv = _new_invariants()
    _run(ops.Kgg_inv, ops.S, ops.KgeT, ops.Kee, ops.D, ops.beta, ops.R, ops.obs_base, ops.g0,
         rom.pair_dim, contact.mu, contact.rho, contact.tol_rel, contact.max_iter,
         float(dt), int(n_steps), int(stride), float(exc.omega), float(exc.amplitude),
         float(exc.phase), float(state0.t), g, lam, eta, etad,
         rec_t, rec_u, rec_v, rec_g, rec_lam, rec_act, rec_qb, rec_it, stats, inv)
    done, sweeps, max_sweeps, retries, n_active, status = (int(s) for s in stats)
    if status == 1:
        raise ContactNonConvergence(
            f"contact solve failed twice at step {done} (t={state0.t + done * dt:.6g})"
        )
    if status == 2:
        raise IntegrationError(f"non-finite state at step {done} (t={state0.t + done * dt:.6g})")
    if retries:
        log.info("%d steps needed the half-step retry", retries)
    channels = {}
    for i, name in enumerate(rom.observer_names):
        channels[f"u_{name}"] = rec_u[:, i]
        channels[f"v_{name}"] = rec_v[:, i]
    for i in range(m):
        channels[f"g_{i}"] = rec_g[:, i]
    for i in range(m):
        channels[f"lam_{i}"] = rec_lam[:, i]
    channels["active"] = rec_act
    channels["q_base"] = rec_qb
    channels["iterations"] = rec_it
    info = {
        "dt": float(dt),
        "omega": float(exc.omega),
        "amplitude": float(exc.amplitude),
        "phase": float(exc.phase),
        "stride": int(stride),
        "t0": float(state0.t),
        "n_steps": int(n_steps),
        "velocity_shift": -0.5 * float(dt),
        "pair_dim": int(rom.pair_dim),
        "g0": [float(x) for x in rom.g0],
        "mu": float(contact.mu),
        "length_scale": float(rom.length_scale),
        "solver_sweeps": sweeps,
        "solver_max_sweeps": max_sweeps,
        "retries": retries,
        "active_steps": n_active,
        "invariants": {k: float(v) for k, v in zip(INVARIANT_KEYS, inv)},
    }
    info.update(meta or {})
    final = IntegratorState(g, lam, eta, etad, state0.j + n_steps, state0.t + n_steps * dt)
    return TimeSeries(rec_t, channels, info, final_state=final.check())


def harmonic_response(rom: ReducedModel, exc: Excitation, absolute: bool = True) -> np.ndarray:
    """Complex steady-state displacement amplitudes of the observers, open contact.

    With ``q_base = Im(A e^{i w t})`` the observer displacement is
    ``Im(U e^{i w t})``; returns ``U / A * amplitude`` per observer.
    """
    Kc = rom.K_etaeta - rom.K_geta.T @ np.linalg.solve(rom.K_gg, rom.K_geta)
    w = exc.omega
    A = Kc - w**2 * np.eye(rom.n_modes) + 1j * w * np.diag(rom.D)
    eta = np.linalg.solve(A, rom.beta * w**2 * exc.amplitude)
    g = -np.linalg.solve(rom.K_gg, rom.K_geta @ eta)
    nb = rom.n_boundary
    u = rom.R[:, :nb] @ g + rom.R[:, nb:] @ eta
    if absolute:
        u = u + rom.observer_base * exc.amplitude
    return u


def modal_energy(rom: ReducedModel, g, eta, eta_dot) -> float:
    """Kinetic plus strain energy of the reduced model."""
    y = np.concatenate([g, eta])
    return 0.5 * float(eta_dot @ eta_dot) + 0.5 * float(y @ rom.stiffness() @ y)
