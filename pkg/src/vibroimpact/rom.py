"""
Relative-coordinate boundary transform and MacNeal reduction.

The reduced model keeps the relative contact displacements ``g`` as
physical boundary coordinates and represents everything else with
free-interface normal modes ``eta``. Residual flexibility attachment
modes make the static boundary flexibility exact, and the reduced mass
is the identity on ``eta`` and zero on ``g``; so the boundary equation
``K_gg g + K_geta eta = lambda`` carries no inertia.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .modal import lowest_modes
from .model import FEModel, ModelError

__all__ = [
    "ReductionError",
    "TransformedModel",
    "ReducedModel",
    "boundary_transform",
    "macneal_reduce",
    "recover_outputs",
    "static_check",
    "save_reduced",
    "load_reduced",
]

ARCHIVE_FORMAT = "vibroimpact-rom"
ARCHIVE_VERSION = 1
MAX_FLEX_CONDITION = 1e12


class ReductionError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransformedModel:
    """Model in coordinates ``y = [g; q_i]``.

    ``g`` stacks the relative displacements of all contact pairs in their
    local frames (normal first). ``q_i`` starts with the pairs' absolute
    (mean) contact-point displacements, followed by every other free DOF
    in original order. Free nodal displacements are ``u = T @ y``.
    """

    K: sp.csr_matrix
    M: sp.csr_matrix
    T: sp.csr_matrix
    T_inv: sp.csr_matrix
    n_boundary: int
    pair_dim: int
    frames: tuple
    b: np.ndarray
    free_dofs: np.ndarray
    observers: dict
    observer_base: dict

    @property
    def n_pairs(self) -> int:
        return self.n_boundary // self.pair_dim if self.pair_dim else 0


def boundary_transform(model: FEModel) -> TransformedModel:
    """Swap each contact pair's nodal DOFs for relative and absolute parts.

    For pair ``k`` with point maps ``P_a``, ``P_b`` and frame ``F``:
    ``g_k = F (P_a u_a - P_b u_b)`` and ``a_k = (P_a u_a + P_b u_b) / 2``.
    The transform is applied congruently to M and K.
    """
    model.validate()
    pairs = model.contact_pairs
    if not pairs:
        raise ModelError("model has no contact pairs")
    dims = {p.dim for p in pairs}
    if len(dims) != 1:
        raise ModelError("all contact pairs must have the same dimension")
    d = dims.pop()
    npairs = len(pairs)
    nb = d * npairs
    free = model.free_dofs
    pos = -np.ones(model.n_dofs, dtype=int)
    pos[free] = np.arange(free.size)

    pair_pos = set()
    T_rows, T_cols, T_vals = [], [], []
    Ti_rows, Ti_cols, Ti_vals = [], [], []

    def add(rows, cols, vals, r_idx, c_idx, block):
        for ii, r in enumerate(r_idx):
            for jj, c in enumerate(c_idx):
                if block[ii, jj] != 0.0:
                    rows.append(r)
                    cols.append(c)
                    vals.append(block[ii, jj])

    for k, pair in enumerate(pairs):
        da, db = model.pair_dofs(pair)
        pa, pb = pos[da], pos[db]
        F = np.asarray(pair.frame, dtype=float)
        Pa = np.asarray(pair.map_a, dtype=float)
        Pb = np.asarray(pair.map_b, dtype=float)
        Pa_inv, Pb_inv = np.linalg.inv(Pa), np.linalg.inv(Pb)
        gk = np.arange(k * d, (k + 1) * d)
        ak = nb + gk
        pair_pos.update(pa.tolist() + pb.tolist())
        # u_a = Pa^-1 (a + F^T g / 2), u_b = Pb^-1 (a - F^T g / 2)
        add(T_rows, T_cols, T_vals, pa, gk, 0.5 * Pa_inv @ F.T)
        add(T_rows, T_cols, T_vals, pa, ak, Pa_inv)
        add(T_rows, T_cols, T_vals, pb, gk, -0.5 * Pb_inv @ F.T)
        add(T_rows, T_cols, T_vals, pb, ak, Pb_inv)
        add(Ti_rows, Ti_cols, Ti_vals, gk, pa, F @ Pa)
        add(Ti_rows, Ti_cols, Ti_vals, gk, pb, -F @ Pb)
        add(Ti_rows, Ti_cols, Ti_vals, ak, pa, 0.5 * Pa)
        add(Ti_rows, Ti_cols, Ti_vals, ak, pb, 0.5 * Pb)

    others = [p for p in range(free.size) if p not in pair_pos]
    for j, p in enumerate(others):
        T_rows.append(p)
        T_cols.append(2 * nb + j)
        T_vals.append(1.0)
        Ti_rows.append(2 * nb + j)
        Ti_cols.append(p)
        Ti_vals.append(1.0)
    n = free.size
    T = sp.csr_matrix((T_vals, (T_rows, T_cols)), shape=(n, n))
    T_inv = sp.csr_matrix((Ti_vals, (Ti_rows, Ti_cols)), shape=(n, n))

    Kf = model.K[free][:, free]
    Mf = model.M[free][:, free]
    Kt = (T.T @ Kf @ T).tocsr()
    Mt = (T.T @ Mf @ T).tocsr()
    Kt = ((Kt + Kt.T) * 0.5).tocsr()
    Mt = ((Mt + Mt.T) * 0.5).tocsr()
    bt = T_inv @ model.b[free]

    observers, observer_base = {}, {}
    for name, dof in model.observers.items():
        if pos[dof] < 0:
            raise ModelError(f"observer {name!r} sits on a constrained DOF")
        observers[name] = int(pos[dof])
        observer_base[name] = float(model.b[dof])
    return TransformedModel(
        K=Kt, M=Mt, T=T, T_inv=T_inv, n_boundary=nb, pair_dim=d,
        frames=tuple(np.asarray(p.frame, dtype=float) for p in pairs),
        b=bt, free_dofs=free, observers=observers, observer_base=observer_base,
    )


@dataclass(frozen=True)
class ReducedModel:
    """Massless-boundary reduced model.

    Boundary equation: ``K_gg g + K_geta eta = lam``.
    Modal equation: ``eta'' + D eta' + K_geta^T g + K_etaeta eta = -beta a_base``.
    ``D`` holds the diagonal of the modal damping matrix.
    ``R`` maps ``[g; eta]`` to the displacements of the named observers
    (relative to the base); ``observer_base`` flags observers aligned
    with the base motion.
    """

    K_gg: np.ndarray
    K_geta: np.ndarray
    K_etaeta: np.ndarray
    D: np.ndarray
    beta: np.ndarray
    R: np.ndarray
    observer_names: tuple
    observer_base: np.ndarray
    omegas: np.ndarray
    pair_dim: int
    frames: tuple
    g0: np.ndarray
    length_scale: float = 1.0
    info: dict = field(default_factory=dict, compare=False)

    @property
    def n_boundary(self) -> int:
        return self.K_gg.shape[0]

    @property
    def n_modes(self) -> int:
        return self.K_etaeta.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.n_boundary // self.pair_dim

    @property
    def frequencies(self) -> np.ndarray:
        return self.omegas / (2 * np.pi)

    @property
    def normal_index(self) -> np.ndarray:
        return np.arange(0, self.n_boundary, self.pair_dim)

    def stiffness(self) -> np.ndarray:
        """Full reduced stiffness in ``[g; eta]`` ordering."""
        return np.block([[self.K_gg, self.K_geta], [self.K_geta.T, self.K_etaeta]])

    def mass(self) -> np.ndarray:
        nb, m = self.n_boundary, self.n_modes
        Mr = np.zeros((nb + m, nb + m))
        Mr[nb:, nb:] = np.eye(m)
        return Mr

    def observer(self, name: str) -> int:
        try:
            return self.observer_names.index(name)
        except ValueError:
            raise KeyError(f"unknown observer {name!r}") from None

    def with_damping(self, D) -> "ReducedModel":
        D = np.asarray(D, dtype=float)
        if D.ndim == 2:
            if np.any(D != np.diag(np.diag(D))):
                raise ValueError("only diagonal modal damping is supported")
            D = np.diag(D).copy()
        if D.shape != (self.n_modes,) or np.any(D < 0):
            raise ValueError("damping must be a non-negative vector over the modes")
        return replace(self, D=D)

    def with_clearance(self, g0) -> "ReducedModel":
        g0 = np.broadcast_to(np.asarray(g0, dtype=float), (self.n_pairs,)).copy()
        if not np.all(np.isfinite(g0)):
            raise ValueError("clearance must be finite")
        return replace(self, g0=g0)

    def condensed_operator(self) -> np.ndarray:
        """``K_gg^-1 K_geta``: boundary response to modal motion when contact is open."""
        return la.solve(self.K_gg, self.K_geta, assume_a="pos")


def _factorize(K: sp.spmatrix):
    try:
        lu = spla.splu(sp.csc_matrix(K))
    except RuntimeError as exc:
        raise ReductionError(
            "stiffness matrix is singular; the model has rigid-body modes "
            "(check ground constraints)"
        ) from exc
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= 1e-13 * diag.max():
        raise ReductionError("stiffness matrix is numerically singular (rigid-body modes)")
    return lu


def macneal_reduce(tm: TransformedModel, n_modes: int) -> ReducedModel:
    """Free-interface modes plus residual-flexibility attachment modes.

    With ``Phi`` the retained free-interface modes, ``Omega^2`` their
    eigenvalues and ``G = K^-1[:, B] - Phi Omega^-2 Phi_B^T`` the residual
    flexibility with respect to the boundary coordinates ``B``:

    * ``K_gg = G_BB^-1``
    * ``K_geta = -K_gg Phi_B``
    * ``K_etaeta = Omega^2 + Phi_B^T K_gg Phi_B``
    * ``beta = Phi_i^T M_ii b_i``

    and the component-mode basis is ``[G K_gg, Phi - G K_gg Phi_B]``.
    """
    n = tm.K.shape[0]
    nb = tm.n_boundary
    if not 1 <= n_modes < n - nb + 1:
        raise ReductionError(
            f"n_modes must be in [1, {n - nb}] for a model with {n} DOFs "
            f"and {nb} boundary coordinates"
        )
    lu = _factorize(tm.K)
    w2, Phi = lowest_modes(tm.K, tm.M, n_modes)
    if w2[0] <= 1e-10 * w2[-1]:
        raise ReductionError("rigid-body mode among the free-interface modes")
    B = np.arange(nb)
    I = np.arange(nb, n)
    E = np.zeros((n, nb))
    E[B, B] = 1.0
    X = lu.solve(E)
    X += lu.solve(E - tm.K @ X)  # one refinement step
    Phi_B = Phi[B]
    G = X - (Phi / w2) @ Phi_B.T
    G_BB = 0.5 * (G[B] + G[B].T)
    ev = np.linalg.eigvalsh(G_BB)
    if ev[0] <= 0 or ev[-1] / ev[0] > MAX_FLEX_CONDITION:
        raise ReductionError(
            "residual flexibility is ill-conditioned; retain fewer modes "
            f"(eigenvalue range {ev[0]:.3e} .. {ev[-1]:.3e})"
        )
    K_gg = la.cho_solve(la.cho_factor(G_BB), np.eye(nb))
    K_gg = 0.5 * (K_gg + K_gg.T)
    K_geta = -K_gg @ Phi_B
    K_ee = np.diag(w2) + Phi_B.T @ K_gg @ Phi_B
    K_ee = 0.5 * (K_ee + K_ee.T)

    M_ii = tm.M[I][:, I]
    beta = Phi[I].T @ (M_ii @ tm.b[I])

    GK = G @ K_gg
    basis = np.hstack([GK, Phi - GK @ Phi_B])
    names = tuple(tm.observers)
    obs_rows = [tm.observers[nm] for nm in names]
    R = np.asarray(tm.T[obs_rows] @ basis) if names else np.zeros((0, nb + n_modes))
    info = {
        "n_dofs": int(n),
        "boundary_b_norm": float(np.abs(tm.b[B]).max()) if nb else 0.0,
        "residual_flexibility_condition": float(ev[-1] / ev[0]),
    }
    return ReducedModel(
        K_gg=K_gg, K_geta=K_geta, K_etaeta=K_ee, D=np.zeros(n_modes), beta=beta,
        R=R, observer_names=names,
        observer_base=np.array([tm.observer_base[nm] for nm in names]),
        omegas=np.sqrt(w2), pair_dim=tm.pair_dim, frames=tm.frames,
        g0=np.zeros(tm.n_pairs), info=info,
    )


def component_modes(tm: TransformedModel, n_modes: int) -> np.ndarray:
    """The full basis ``R`` in transformed coordinates, ``y ~= R [g; eta]``.

    Recomputed on demand (the archive only keeps observer rows).
    """
    n = tm.K.shape[0]
    nb = tm.n_boundary
    lu = _factorize(tm.K)
    w2, Phi = lowest_modes(tm.K, tm.M, n_modes)
    E = np.zeros((n, nb))
    E[np.arange(nb), np.arange(nb)] = 1.0
    X = lu.solve(E)
    X += lu.solve(E - tm.K @ X)
    G = X - (Phi / w2) @ Phi[:nb].T
    GK = G @ np.linalg.inv(0.5 * (G[:nb] + G[:nb].T))
    return np.hstack([GK, Phi - GK @ Phi[:nb]])


def static_check(tm: TransformedModel, rom: ReducedModel) -> dict:
    """Compare static responses to unit boundary loads, reduced vs full model.

    Each boundary coordinate is loaded in turn with all others free of
    load. The full solve uses one step of iterative refinement. Errors
    are relative to the largest entry of the full response (per load
    case); ``boundary`` covers the contact coordinates and ``observers``
    the recovered observer displacements.
    """
    nb = tm.n_boundary
    n = tm.K.shape[0]
    lu = _factorize(tm.K)
    E = np.zeros((n, nb))
    E[np.arange(nb), np.arange(nb)] = 1.0
    Y = lu.solve(E)
    Y += lu.solve(E - tm.K @ Y)
    Kr = rom.stiffness()
    Z = la.solve(Kr, np.vstack([np.eye(nb), np.zeros((rom.n_modes, nb))]), assume_a="sym")
    full_b, red_b = Y[:nb], Z[:nb]
    err_b = np.abs(red_b - full_b).max(axis=0) / np.abs(full_b).max(axis=0)
    out = {"n_loads": int(nb), "boundary_rel_error": err_b.tolist(),
           "max_boundary_rel_error": float(err_b.max())}
    names = tuple(tm.observers)
    if names and rom.R.shape[0]:
        rows = [tm.observers[nm] for nm in names]
        full_o = np.asarray(tm.T[rows] @ Y)
        red_o = rom.R @ Z
        scale = np.maximum(np.abs(full_o).max(axis=0), 1e-300)
        err_o = np.abs(red_o - full_o).max(axis=0) / scale
        out["max_observer_rel_error"] = float(err_o.max())
    return out


def recover_outputs(rom: ReducedModel, g, eta) -> np.ndarray:
    """Observer displacements ``R [g; eta]``; rows of 2-D inputs are time samples."""
    g = np.asarray(g, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if g.shape[-1] != rom.n_boundary or eta.shape[-1] != rom.n_modes:
        raise ValueError(
            f"expected g[..., {rom.n_boundary}] and eta[..., {rom.n_modes}], "
            f"got {g.shape} and {eta.shape}"
        )
    nb = rom.n_boundary
    return g @ rom.R[:, :nb].T + eta @ rom.R[:, nb:].T


# -- archive ---------------------------------------------------------------------

_ARRAYS = ("K_gg", "K_geta", "K_etaeta", "D", "beta", "R", "observer_base", "omegas", "g0")


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    # fixed timestamp keeps archives byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_reduced(rom: ReducedModel, path) -> str:
    """Write a versioned zip archive; returns its SHA-256."""
    path = Path(path)
    header = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "pair_dim": rom.pair_dim,
        "observer_names": list(rom.observer_names),
        "frames": [np.asarray(f).tolist() for f in rom.frames],
        "length_scale": rom.length_scale,
        "info": rom.info,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "header.json", json.dumps(header, indent=1, sort_keys=True).encode())
        for name in _ARRAYS:
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.ascontiguousarray(getattr(rom, name), dtype=float),
                                      allow_pickle=False)
            _zip_write(zf, f"{name}.npy", arr.getvalue())
    data = buf.getvalue()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_reduced(path) -> ReducedModel:
    with zipfile.ZipFile(Path(path)) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != ARCHIVE_FORMAT:
            raise ValueError(f"{path}: not a reduced-model archive")
        if header.get("version") != ARCHIVE_VERSION:
            raise ValueError(f"{path}: unsupported archive version {header.get('version')}")
        arrays = {
            name: np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
            for name in _ARRAYS
        }
    return ReducedModel(
        **arrays,
        observer_names=tuple(header["observer_names"]),
        pair_dim=int(header["pair_dim"]),
        frames=tuple(np.array(f) for f in header["frames"]),
        length_scale=float(header["length_scale"]),
        info=header["info"],
    )
