"""
Set-valued contact laws and the projected Jacobi inclusion solver.

Contact forces ``lam`` and relative velocities ``gamma`` are stacked per
pair as ``[normal, tangential...]``. For an active pair the admissible
force set is ``R_0^+ x D(mu lam_n)``; the inclusion
``-(G lam + c) in N_C(lam)`` is solved through the fixed point
``lam = proj(lam - r (G lam + c))``.

The numeric kernels are compiled with numba so that the integrator can
call them once per time step without Python overhead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "ContactConfig",
    "InclusionProblem",
    "ContactNonConvergence",
    "project_admissible",
    "active_set",
    "assemble_delassus",
    "solve_inclusion",
]


class ContactNonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ContactConfig:
    mu: float = 0.4
    tol_rel: float = 1e-8
    max_iter: int = 500
    rho: float = 0.8

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("friction coefficient must be non-negative")
        if not self.tol_rel > 0:
            raise ValueError("tol_rel must be positive")
        if not 0 < self.rho <= 1:
            raise ValueError("relaxation rho must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass(frozen=True)
class InclusionProblem:
    """``gamma = G lam + c`` restricted to the active pairs.

    ``G`` and ``c`` cover the components of the ``active`` pairs only.
    ``gap_rate`` is added to the normal components before the
    unilateral law is applied: it is the physical gap at the start of
    the step divided by the step size, zero for a contact that was
    already closed. ``G_cols`` and ``c_all`` give ``gamma`` for every
    pair, inactive ones included.
    """

    G: np.ndarray
    c: np.ndarray
    active: np.ndarray
    pair_dim: int
    gap_rate: np.ndarray = None
    G_cols: np.ndarray = None
    c_all: np.ndarray = None

    def __post_init__(self):
        if self.gap_rate is None:
            object.__setattr__(self, "gap_rate", np.zeros_like(self.c))

    @property
    def n_active(self) -> int:
        return len(self.active)


# -- kernels ---------------------------------------------------------------------


@njit(cache=True)
def _project_into(x, d, mu, out):
    n_pairs = x.size // d
    for k in range(n_pairs):
        s = k * d
        ln = x[s]
        if ln <= 0.0:
            for i in range(d):
                out[s + i] = 0.0
            continue
        out[s] = ln
        nt = 0.0
        for i in range(1, d):
            nt += x[s + i] * x[s + i]
        nt = np.sqrt(nt)
        radius = mu * ln
        scale = 1.0
        if nt > radius:
            scale = radius / nt
        for i in range(1, d):
            out[s + i] = x[s + i] * scale


@njit(cache=True)
def _step_sizes(G, d, rho):
    """Per-pair relaxation ``rho / max diag``, shrunk to a safe Jacobi step.

    The Gershgorin bound of ``diag(r) G`` bounds its spectrum; keeping it
    below 1.9 makes the simultaneous update a contraction on frictionless
    problems even for strongly coupled pairs.
    """
    m = G.shape[0]
    n_pairs = m // d
    r = np.empty(m)
    for k in range(n_pairs):
        gmax = 0.0
        for i in range(d):
            v = G[k * d + i, k * d + i]
            if v > gmax:
                gmax = v
        for i in range(d):
            r[k * d + i] = rho / gmax
    bound = 0.0
    for i in range(m):
        row = 0.0
        for j in range(m):
            row += abs(G[i, j])
        row *= r[i]
        if row > bound:
            bound = row
    if bound > 1.9:
        r *= 1.9 / bound
    return r


@njit(cache=True)
def _jacobi(G, c, lam0, d, mu, rho, tol, max_iter, history):
    """Projected Jacobi iteration; returns ``(lam, iterations, residual, converged)``.

    ``c`` already contains the gap offsets of the normal components.
    ``history`` (length >= max_iter, or empty) receives the residual of
    every sweep.
    """
    m = c.size
    r = _step_sizes(G, d, rho)
    lam = lam0.copy()
    trial = np.empty(m)
    proj = np.empty(m)
    res = np.inf
    it = 0
    keep = history.size > 0
    while it < max_iter:
        gam = G @ lam + c
        for i in range(m):
            trial[i] = lam[i] - r[i] * gam[i]
        _project_into(trial, d, mu, proj)
        res = 0.0
        for k in range(m // d):
            num = 0.0
            den = 0.0
            for i in range(k * d, (k + 1) * d):
                num += (proj[i] - lam[i]) ** 2
                den += lam[i] ** 2
            val = np.sqrt(num) / (1.0 + np.sqrt(den))
            if val > res:
                res = val
        if keep:
            history[it] = res
        lam[:] = proj
        it += 1
        if res < tol:
            return lam, it, res, True
    return lam, it, res, False


@njit(cache=True)
def _boundary_solve(Kgg_inv, g_free, g_prev, lam_prev, g0, d, dt, mu, rho, tol, max_iter,
                    g_out, lam_out, scratch):
    """Contact-consistent boundary state at the new time level.

    ``g_free`` is the boundary displacement without contact forces
    (``-K_gg^-1 K_geta eta``). Pairs whose predicted physical gap is
    closed are active; the active set grows while inactive pairs end up
    penetrating. Returns ``(converged, iterations, n_active)``.
    """
    m = g_free.size
    n_pairs = m // d
    active = np.zeros(n_pairs, dtype=np.bool_)
    for k in range(n_pairs):
        if g_free[k * d] + g0[k] <= 0.0:
            active[k] = True
    total_it = 0
    for _ in range(n_pairs + 1):
        na = 0
        for k in range(n_pairs):
            if active[k]:
                na += 1
        if na == 0:
            g_out[:] = g_free
            lam_out[:] = 0.0
            return True, total_it, 0
        comps = np.empty(na * d, dtype=np.int64)
        q = 0
        for k in range(n_pairs):
            if active[k]:
                for i in range(d):
                    comps[q] = k * d + i
                    q += 1
        ma = na * d
        G = np.empty((ma, ma))
        c = np.empty(ma)
        lam0 = np.empty(ma)
        for a in range(ma):
            ia = comps[a]
            for b in range(ma):
                G[a, b] = Kgg_inv[ia, comps[b]] / dt
            c[a] = (g_free[ia] - g_prev[ia]) / dt
            lam0[a] = lam_prev[ia]
        for a in range(0, ma, d):
            k = comps[a] // d
            c[a] += (g_prev[comps[a]] + g0[k]) / dt
        lam_a, it, res, ok = _jacobi(G, c, lam0, d, mu, rho, tol, max_iter, scratch)
        total_it += it
        if not ok:
            return False, total_it, na
        lam_out[:] = 0.0
        for a in range(ma):
            lam_out[comps[a]] = lam_a[a]
        for i in range(m):
            acc = g_free[i]
            for a in range(ma):
                acc += Kgg_inv[i, comps[a]] * lam_a[a]
            g_out[i] = acc
        grown = False
        for k in range(n_pairs):
            if not active[k] and g_out[k * d] + g0[k] < 0.0:
                active[k] = True
                grown = True
        if not grown:
            return True, total_it, na
    return True, total_it, na


# -- public API ------------------------------------------------------------------


def project_admissible(lam, mu: float, pair_dim: int | None = None) -> np.ndarray:
    """Project stacked pair forces onto ``R_0^+ x D(mu lam_n)``.

    The normal part is clipped at zero, then the tangential part is
    scaled radially onto the disk whose radius uses the clipped normal.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    d = lam.size if pair_dim is None else pair_dim
    if lam.size % d:
        raise ValueError("force vector length is not a multiple of the pair dimension")
    out = np.empty_like(lam)
    _project_into(lam, d, float(mu), out)
    return out


def active_set(g_current, g0, pair_dim: int) -> np.ndarray:
    """Indices of pairs whose physical normal gap ``g_n + g0`` is closed (``<= 0``)."""
    g = np.asarray(g_current, dtype=float)
    gn = g[0::pair_dim]
    return np.flatnonzero(gn + np.broadcast_to(g0, gn.shape) <= 0.0)


def assemble_delassus(rom, dt: float, g_prev, eta_now, active=None) -> InclusionProblem:
    """Delassus form of the boundary equation after one gap update.

    Substituting ``g = g_prev + gamma dt`` into
    ``K_gg g + K_geta eta = lam`` gives ``gamma = G lam + c`` with
    ``G = (dt K_gg)^-1`` and ``c = -g_prev / dt - (dt K_gg)^-1 K_geta eta``.
    Without ``active`` the set is taken from the contact-free predicted
    gap ``-K_gg^-1 K_geta eta``.
    """
    if not dt > 0:
        raise ValueError("time step must be positive")
    d = rom.pair_dim
    g_prev = np.asarray(g_prev, dtype=float)
    Kinv = np.linalg.inv(rom.K_gg)
    Kinv = 0.5 * (Kinv + Kinv.T)
    g_free = -Kinv @ (rom.K_geta @ np.asarray(eta_now, dtype=float))
    G_all = Kinv / dt
    c_all = (g_free - g_prev) / dt
    if active is None:
        active = active_set(g_free, rom.g0, d)
    active = np.asarray(active, dtype=int)
    comps = (active[:, None] * d + np.arange(d)).ravel()
    gap_rate = np.zeros(comps.size)
    gap_rate[0::d] = (g_prev[active * d] + rom.g0[active]) / dt
    return InclusionProblem(
        G=G_all[np.ix_(comps, comps)], c=c_all[comps], active=active, pair_dim=d,
        gap_rate=gap_rate, G_cols=G_all[:, comps], c_all=c_all,
    )


def solve_inclusion(problem: InclusionProblem, lam_init=None, config: ContactConfig = None,
                    history: bool = False):
    """Solve ``-(G lam + c) in N_C(lam)`` by projected Jacobi relaxation.

    Returns ``(lam, gamma)`` on the active components, plus the residual
    history when ``history`` is set. Raises
    :class:`ContactNonConvergence` once ``config.max_iter`` sweeps are
    spent.
    """
    config = config or ContactConfig()
    m = problem.c.size
    if m == 0:
        out = (np.zeros(0), np.zeros(0))
        return out + (np.zeros(0),) if history else out
    lam0 = np.zeros(m) if lam_init is None else np.asarray(lam_init, dtype=float).copy()
    hist = np.empty(config.max_iter if history else 0)
    G = np.ascontiguousarray(problem.G, dtype=float)
    c_eff = np.asarray(problem.c, dtype=float) + problem.gap_rate
    lam, it, res, ok = _jacobi(G, c_eff, lam0, problem.pair_dim, config.mu, config.rho,
                               config.tol_rel, config.max_iter, hist)
    if not ok:
        raise ContactNonConvergence(
            f"inclusion solver stopped after {it} sweeps with residual {res:.3e}"
        )
    gamma = G @ lam + problem.c
    if history:
        return lam, gamma, hist[:it]
    return lam, gamma
