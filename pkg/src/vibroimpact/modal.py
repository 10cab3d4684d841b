"""Modal analysis, modal damping and frequency-based model updating."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import differential_evolution

from .model import FEModel

__all__ = [
    "ModalError",
    "ModalData",
    "lowest_modes",
    "solve_modes",
    "expand_damping_ratios",
    "damping_matrix",
    "UpdateResult",
    "update_parameters",
]

log = logging.getLogger(__name__)

DENSE_LIMIT = 600
EIG_RESIDUAL_TOL = 1e-10


class ModalError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModalData:
    """Mass-normalized modes of the constrained model.

    ``modes`` has one row per model DOF (zeros at constrained DOFs) and
    one column per mode.
    """

    frequencies: np.ndarray
    modes: np.ndarray
    damping_ratios: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.damping_ratios is None:
            object.__setattr__(self, "damping_ratios", np.zeros(len(self.frequencies)))

    @property
    def omegas(self) -> np.ndarray:
        return 2 * np.pi * np.asarray(self.frequencies)

    def restrict(self, dofs) -> np.ndarray:
        return self.modes[np.asarray(dofs), :]

    def with_damping(self, ratios) -> "ModalData":
        return ModalData(self.frequencies, self.modes, np.asarray(ratios, dtype=float))


def _dense_inverse_eigh(K, M, n):
    """Lowest modes via the largest eigenvalues of ``L^-1 M L^-T`` with ``K = L L^T``.

    The inverted problem resolves the low end of the spectrum to
    relative accuracy, whereas ``eigh(K, M)`` loses digits in proportion
    to the spread of the spectrum.
    """
    L = la.cholesky(K, lower=True)
    B = la.solve_triangular(L, la.solve_triangular(L, M, lower=True).T, lower=True)
    B = 0.5 * (B + B.T)
    N = K.shape[0]
    mu, y = la.eigh(B, subset_by_index=[N - n, N - 1])
    mu, y = mu[::-1], y[:, ::-1]
    if mu[-1] <= 0:
        raise la.LinAlgError("mass matrix is singular on the retained DOFs")
    w2 = 1.0 / mu
    phi = la.solve_triangular(L, y, lower=True, trans="T")
    if 2 * n > N:
        # the inverted form is only accurate relative to the top of its own
        # spectrum; above the geometric mean the direct form is the better one
        w2_d, phi_d = la.eigh(K, M, subset_by_index=[0, n - 1])
        w2_max = la.eigh(K, M, eigvals_only=True, subset_by_index=[N - 1, N - 1])[0]
        upper = w2_d > np.sqrt(w2_d[0] * w2_max)
        w2 = np.where(upper, w2_d, w2)
        phi = np.where(upper, phi_d, phi)
    return w2, phi


def lowest_modes(K, M, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` lowest eigenpairs of ``K phi = w^2 M phi``, mass-normalized.

    Small problems are solved densely in inverted form; larger ones use
    ARPACK in shift-invert mode around zero. Eigenvector residuals are checked
    either way.
    """
    N = K.shape[0]
    if not 1 <= n <= N:
        raise ModalError(f"requested {n} modes from a {N}-DOF problem")
    if N <= DENSE_LIMIT or n >= N - 1:
        Kd = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
        Md = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
        try:
            w2, phi = _dense_inverse_eigh(Kd, Md, n)
        except la.LinAlgError:
            # K not positive definite (rigid-body modes): plain generalized problem
            try:
                w2, phi = la.eigh(Kd, Md, subset_by_index=[0, n - 1])
            except la.LinAlgError as exc:
                raise ModalError(f"eigensolver failed: {exc}") from exc
    else:
        try:
            w2, phi = spla.eigsh(sp.csc_matrix(K), k=n, M=sp.csc_matrix(M), sigma=0.0,
                                 which="LM", tol=0.0)
        except (spla.ArpackNoConvergence, RuntimeError) as exc:
            raise ModalError(f"eigensolver did not converge: {exc}") from exc
        order = np.argsort(w2)
        w2, phi = w2[order], phi[:, order]
    mass = np.einsum("ij,ij->j", phi, M @ phi)
    if np.any(mass <= 0):
        raise ModalError("mass matrix is singular on the retained DOFs")
    phi = phi / np.sqrt(mass)
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(phi), axis=0)
    phi = phi * np.sign(phi[idx, np.arange(phi.shape[1])])
    # normwise backward error with infinity norms
    nK = float(abs(K).sum(axis=1).max())
    nM = float(abs(M).sum(axis=1).max())
    Kphi = K @ phi
    res = (np.abs(Kphi - (M @ phi) * w2).max(axis=0)
           / ((nK + np.abs(w2) * nM) * np.abs(phi).max(axis=0)))
    if res.max() > EIG_RESIDUAL_TOL:
        raise ModalError(f"eigenvector residual {res.max():.2e} above tolerance")
    return np.clip(w2, 0.0, None), phi


def solve_modes(model: FEModel, n: int) -> ModalData:
    """Lowest ``n`` modes with ground constraints applied and contact pairs open."""
    free = model.free_dofs
    if n > free.size:
        raise ModalError(f"{n} modes requested but only {free.size} free DOFs")
    K = model.K[free][:, free]
    M = model.M[free][:, free]
    w2, phi_f = lowest_modes(K, M, n)
    phi = np.zeros((model.n_dofs, n))
    phi[free] = phi_f
    return ModalData(np.sqrt(w2) / (2 * np.pi), phi)


def expand_damping_ratios(ratios, n: int, overrides: dict | None = None) -> np.ndarray:
    """Extend a prefix of damping ratios to ``n`` modes.

    Modes past the end of ``ratios`` take its last value; ``overrides``
    maps 1-based mode numbers to explicit ratios.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ValueError("need at least one damping ratio")
    out = np.array((ratios + [ratios[-1]] * n)[:n])
    for mode, value in (overrides or {}).items():
        if 1 <= int(mode) <= n:
            out[int(mode) - 1] = float(value)
    if np.any(out < 0):
        raise ValueError("damping ratios must be non-negative")
    if np.any(out >= 1):
        raise ValueError("damping ratios must be below 1")
    return out


def damping_matrix(modal: ModalData | np.ndarray, ratios, overrides=None) -> np.ndarray:
    """Diagonal modal damping ``diag(2 zeta_i omega_i)``.

    ``modal`` is a :class:`ModalData` or an array of angular
    frequencies.
    """
    omegas = modal.omegas if isinstance(modal, ModalData) else np.asarray(modal, dtype=float)
    zeta = expand_damping_ratios(ratios, len(omegas), overrides)
    return np.diag(2 * zeta * omegas)


@dataclass
class UpdateResult:
    params: np.ndarray
    objective: float
    objective0: float
    frequencies: np.ndarray
    residuals: np.ndarray
    seed: int
    nfev: int


class _Objective:
    # module-level class so that differential_evolution can pickle it for workers
    def __init__(self, builder, targets, weights, n_modes):
        self.builder = builder
        self.targets = np.asarray(targets, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.n_modes = n_modes

    def frequencies(self, params) -> np.ndarray:
        try:
            model = self.builder(np.asarray(params, dtype=float))
        except Exception as exc:
            raise ModalError(f"model factory failed for params {list(params)}: {exc}") from exc
        return solve_modes(model, self.n_modes).frequencies[: len(self.targets)]

    def residuals(self, params) -> np.ndarray:
        return (self.frequencies(params) - self.targets) / self.targets

    def __call__(self, params) -> float:
        r = self.residuals(params)
        value = float(np.sum(self.weights * r**2))
        if not math.isfinite(value):
            raise ModalError(f"non-finite objective at params {list(params)}")
        return value


def update_parameters(model_builder, params0, bounds, targets, weights=None, *,
                      n_modes: int | None = None, seed: int = 0, population: int = 32,
                      generations: int = 200, tol: float = 1e-12,
                      workers: int = 1) -> UpdateResult:
    """Tune model parameters so the lowest natural frequencies hit ``targets``.

    Minimizes ``sum_i w_i ((f_i - f*_i) / f*_i)**2`` with seeded
    differential evolution (roughly ``population`` candidates per
    generation, polished by L-BFGS-B inside ``bounds``). The start point
    ``params0`` is part of the initial population, and the returned
    objective never exceeds its value.
    """
    params0 = np.asarray(params0, dtype=float)
    bounds = [tuple(map(float, b)) for b in bounds]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    if params0.shape != lo.shape or np.any(params0 < lo) or np.any(params0 > hi):
        raise ValueError("params0 must lie within bounds")
    targets = np.asarray(targets, dtype=float)
    weights = np.ones_like(targets) if weights is None else np.asarray(weights, dtype=float)
    n_modes = n_modes or len(targets)
    if n_modes < len(targets):
        raise ValueError("more targets than computed modes")
    obj = _Objective(model_builder, targets, weights, n_modes)
    f0 = obj(params0)
    res = differential_evolution(
        obj, bounds, x0=params0, seed=seed,
        popsize=max(1, math.ceil(population / len(params0))),
        maxiter=generations, tol=tol, atol=0.0, polish=True,
        updating="deferred", workers=workers,
    )
    x = np.clip(res.x, lo, hi)
    fx = obj(x)
    if fx > f0:
        x, fx = params0, f0
    log.info("model updating: objective %.3e -> %.3e after %d evaluations", f0, fx, res.nfev)
    return UpdateResult(
        params=x, objective=fx, objective0=f0, frequencies=obj.frequencies(x),
        residuals=obj.residuals(x), seed=seed, nfev=int(res.nfev),
    )
