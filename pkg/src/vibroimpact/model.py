"""
Finite-element level inputs.

An :class:`FEModel` bundles sparse mass and stiffness matrices with the
bookkeeping needed downstream: which DOF belongs to which node and
direction, which DOFs are grounded, which node pairs may come into
contact, and which DOFs follow the imposed base motion.

Models either come from disk (Matrix Market matrices plus a JSON
sidecar, see :func:`load_fe_matrices`) or from the built-in planar
twin-cantilever generator :func:`build_twin_beam_model`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

__all__ = [
    "ModelError",
    "ContactPair",
    "ElasticLayer",
    "FEModel",
    "TwinBeamSpec",
    "load_fe_matrices",
    "save_fe_matrices",
    "build_twin_beam_model",
    "attach_elastic_layers",
    "apply_point_masses",
    "TRANSLATIONS",
]

METADATA_FORMAT = "vibroimpact-fe"
METADATA_VERSION = 1
ASYMMETRY_TOL = 1e-8

#: direction labels treated as translations (point masses, elastic layers)
TRANSLATIONS = ("x", "y", "z")


class ModelError(ValueError):
    """Raised when model data violates its contract."""


@dataclass(frozen=True)
class ContactPair:
    """Node-to-node contact candidate.

    Each side lists the DOF labels it contributes (``labels``, e.g.
    ``("x", "y", "z")`` for solid nodes). ``map_a``/``map_b`` turn those
    nodal DOFs into the displacement of the contact point in global
    components; the identity for translational DOFs, a lever arm for
    beam nodes whose contact point sits off the neutral axis. ``frame``
    rows are the normal followed by the tangents, in the same global
    components. The normal points from side B towards side A, so a
    positive normal gap means opening.
    """

    node_a: int
    node_b: int
    labels: tuple[str, ...]
    frame: np.ndarray
    map_a: np.ndarray
    map_b: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.labels)

    def to_dict(self) -> dict:
        return {
            "node_a": int(self.node_a),
            "node_b": int(self.node_b),
            "labels": list(self.labels),
            "frame": np.asarray(self.frame).tolist(),
            "map_a": np.asarray(self.map_a).tolist(),
            "map_b": np.asarray(self.map_b).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContactPair":
        labels = tuple(d["labels"])
        n = len(labels)
        eye = np.eye(n).tolist()
        return cls(
            node_a=int(d["node_a"]),
            node_b=int(d["node_b"]),
            labels=labels,
            frame=np.array(d["frame"], dtype=float),
            map_a=np.array(d.get("map_a", eye), dtype=float),
            map_b=np.array(d.get("map_b", eye), dtype=float),
        )


@dataclass(frozen=True)
class ElasticLayer:
    """Transversally isotropic spring layer.

    ``pairs`` holds ``(node_a, node_b)`` tuples; ``node_b=None`` ties
    node A to ground. Stiffness values are per node pair.
    """

    pairs: tuple
    k_n: float
    k_t: float
    normal: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not (self.k_n > 0 and self.k_t > 0):
            raise ModelError("elastic layer stiffness must be positive")
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,) or not np.isclose(np.linalg.norm(n), 1.0):
            raise ModelError("layer normal must be a unit 3-vector")


@dataclass(frozen=True)
class FEModel:
    M: sp.csr_matrix
    K: sp.csr_matrix
    nodes: dict  # node id -> {label: dof index}
    constrained_dofs: np.ndarray
    contact_pairs: tuple = ()
    b: np.ndarray = None
    point_masses: tuple = ()
    observers: dict = field(default_factory=dict)
    coords: dict = field(default_factory=dict)
    load_report: dict = field(default_factory=dict, compare=False)

    @property
    def n_dofs(self) -> int:
        return self.M.shape[0]

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.constrained_dofs] = False
        return np.flatnonzero(mask)

    def dof(self, node: int, label: str) -> int:
        try:
            return self.nodes[node][label]
        except KeyError:
            raise ModelError(f"node {node} has no DOF {label!r}") from None

    def pair_dofs(self, pair: ContactPair) -> tuple[list[int], list[int]]:
        return (
            [self.dof(pair.node_a, lab) for lab in pair.labels],
            [self.dof(pair.node_b, lab) for lab in pair.labels],
        )

    def validate(self) -> "FEModel":
        n = self.n_dofs
        if self.M.shape != (n, n) or self.K.shape != (n, n):
            raise ModelError(
                f"M {self.M.shape} and K {self.K.shape} must be square and equal"
            )
        for name, A in (("M", self.M), ("K", self.K)):
            if abs(A - A.T).max() != 0.0:
                raise ModelError(f"{name} is not symmetric")
        b = np.asarray(self.b)
        if b.shape != (n,) or not np.all((b == 0) | (b == 1)):
            raise ModelError("b must be a 0/1 vector of length n_dofs")
        cons = set(int(i) for i in self.constrained_dofs)
        if any(b[i] for i in cons):
            raise ModelError("b must vanish at constrained DOFs")
        used = set()
        for k, pair in enumerate(self.contact_pairs):
            da, db = self.pair_dofs(pair)
            for i in da + db:
                if i in cons:
                    raise ModelError(f"contact pair {k} references constrained DOF {i}")
                if i in used:
                    raise ModelError(f"DOF {i} used by more than one contact pair")
                used.add(i)
            d = pair.dim
            F = np.asarray(pair.frame)
            if F.shape != (d, d) or not np.allclose(F @ F.T, np.eye(d), atol=1e-12):
                raise ModelError(f"contact pair {k} frame is not orthonormal")
            for P in (pair.map_a, pair.map_b):
                if np.asarray(P).shape != (d, d) or abs(np.linalg.det(P)) < 1e-300:
                    raise ModelError(f"contact pair {k} has a singular point map")
        for name, i in self.observers.items():
            if not 0 <= i < n:
                raise ModelError(f"observer {name!r} DOF {i} out of range")
        return self


def _symmetrize(A, name: str) -> tuple[sp.csr_matrix, float]:
    A = sp.csr_matrix(A, dtype=float)
    scale = abs(A).max() if A.nnz else 0.0
    asym = abs(A - A.T).max() if A.nnz else 0.0
    rel = asym / scale if scale > 0 else 0.0
    if rel > ASYMMETRY_TOL:
        raise ModelError(f"{name} relative asymmetry {rel:.3e} exceeds {ASYMMETRY_TOL}")
    if asym > 0:
        A = ((A + A.T) * 0.5).tocsr()
    A.sort_indices()
    return A, rel


def load_fe_matrices(path_M, path_K, metadata_path) -> FEModel:
    """Read a model written as Matrix Market files plus a JSON sidecar.

    Matrices with a relative asymmetry up to 1e-8 are symmetrized and the
    largest asymmetry found is kept in ``model.load_report``; anything
    beyond that is rejected. The sidecar schema is documented in the
    README (``format: vibroimpact-fe``, ``version: 1``).
    """
    M = scipy.io.mmread(str(path_M))
    K = scipy.io.mmread(str(path_K))
    if M.shape != K.shape or M.shape[0] != M.shape[1]:
        raise ModelError(f"dimension mismatch: M {M.shape}, K {K.shape}")
    M, rel_m = _symmetrize(M, "M")
    K, rel_k = _symmetrize(K, "K")
    meta = json.loads(Path(metadata_path).read_text())
    if meta.get("format") != METADATA_FORMAT:
        raise ModelError(f"{metadata_path}: not a {METADATA_FORMAT} metadata file")
    if meta.get("version") != METADATA_VERSION:
        raise ModelError(f"unsupported metadata version {meta.get('version')}")
    n = M.shape[0]
    if meta["n_dofs"] != n:
        raise ModelError(f"metadata declares {meta['n_dofs']} DOFs, matrices have {n}")
    nodes = {int(k): {lab: int(i) for lab, i in v.items()} for k, v in meta["nodes"].items()}
    b = np.zeros(n)
    b[np.asarray(meta.get("b_dofs", []), dtype=int)] = 1.0
    model = FEModel(
        M=M,
        K=K,
        nodes=nodes,
        constrained_dofs=np.asarray(sorted(meta.get("constrained_dofs", [])), dtype=int),
        contact_pairs=tuple(ContactPair.from_dict(p) for p in meta.get("contact_pairs", [])),
        b=b,
        point_masses=tuple((int(nd), float(m)) for nd, m in meta.get("point_masses", [])),
        observers={k: int(v) for k, v in meta.get("observers", {}).items()},
        coords={int(k): tuple(v) for k, v in meta.get("coords", {}).items()},
    )
    model = replace(model, load_report={"asymmetry_M": rel_m, "asymmetry_K": rel_k})
    return model.validate()


def save_fe_matrices(model: FEModel, directory, stem: str = "model") -> tuple[Path, Path, Path]:
    """Write ``<stem>_M.mtx``, ``<stem>_K.mtx`` and ``<stem>.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pM = directory / f"{stem}_M.mtx"
    pK = directory / f"{stem}_K.mtx"
    pJ = directory / f"{stem}.json"
    # 17 significant digits round-trip IEEE doubles exactly
    scipy.io.mmwrite(str(pM), sp.coo_matrix(model.M), precision=17, symmetry="general")
    scipy.io.mmwrite(str(pK), sp.coo_matrix(model.K), precision=17, symmetry="general")
    meta = {
        "format": METADATA_FORMAT,
        "version": METADATA_VERSION,
        "n_dofs": model.n_dofs,
        "nodes": {str(k): v for k, v in sorted(model.nodes.items())},
        "coords": {str(k): list(v) for k, v in sorted(model.coords.items())},
        "constrained_dofs": [int(i) for i in model.constrained_dofs],
        "b_dofs": [int(i) for i in np.flatnonzero(model.b)],
        "contact_pairs": [p.to_dict() for p in model.contact_pairs],
        "point_masses": [[int(nd), float(m)] for nd, m in model.point_masses],
        "observers": dict(model.observers),
    }
    pJ.write_text(json.dumps(meta, indent=1))
    return pM, pK, pJ


# -- synthetic twin cantilever -------------------------------------------------


@dataclass(frozen=True)
class TwinBeamSpec:
    """Geometry and material of the two-cantilever rig (SI units).

    The lower beam is prismatic. The upper beam has the same tip width
    and a root width of ``taper_ratio * width`` with a linear width
    profile; the default ratio puts its fundamental frequency about 10 %
    above the lower beam's. Contact points sit ``probe_offset`` below
    (upper beam) or above (lower beam) the neutral axis.
    """

    length: float = 0.3
    width: float = 0.02
    thickness: float = 0.005
    taper_ratio: float = 1.37
    youngs_modulus: float = 210e9
    density: float = 7850.0
    n_elements: int = 32
    n_pairs: int = 1
    probe_offset: float = 0.01
    clamped: bool = True

    def __post_init__(self):
        for name in ("length", "width", "thickness", "taper_ratio",
                     "youngs_modulus", "density", "probe_offset"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        if self.n_elements < 4:
            raise ModelError("need at least 4 elements per beam")
        if not 1 <= self.n_pairs <= self.n_elements:
            raise ModelError("n_pairs must be between 1 and n_elements")


def beam_element(EI: float, rhoA: float, le: float) -> tuple[np.ndarray, np.ndarray]:
    """Hermite cubic bending element, DOFs ``(w1, w1', w2, w2')``."""
    L = le
    k = EI / L**3 * np.array([
        [12, 6 * L, -12, 6 * L],
        [6 * L, 4 * L**2, -6 * L, 2 * L**2],
        [-12, -6 * L, 12, -6 * L],
        [6 * L, 2 * L**2, -6 * L, 4 * L**2],
    ])
    m = rhoA * L / 420 * np.array([
        [156, 22 * L, 54, -13 * L],
        [22 * L, 4 * L**2, 13 * L, -3 * L**2],
        [54, 13 * L, 156, -22 * L],
        [-13 * L, -3 * L**2, -22 * L, 4 * L**2],
    ])
    return k, m


def _assemble_beam(spec: TwinBeamSpec, root_width: float, first_dof: int, rows, cols, kv, mv):
    n = spec.n_elements
    le = spec.length / n
    h = spec.thickness
    E, rho = spec.youngs_modulus, spec.density
    for e in range(n):
        xi = (e + 0.5) / n
        w = root_width + (spec.width - root_width) * xi
        k, m = beam_element(E * w * h**3 / 12, rho * w * h, le)
        idx = first_dof + 2 * e + np.arange(4)
        r, c = np.meshgrid(idx, idx, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        kv.append(k.ravel())
        mv.append(m.ravel())


def build_twin_beam_model(spec: TwinBeamSpec | None = None) -> FEModel:
    """Two planar cantilevers with node-to-node contact pairs at the tips.

    Nodes ``0..n`` form the lower beam, ``n+1..2n+1`` the upper one;
    each node carries ``z`` (transverse displacement) and ``slope``
    (``dw/dx``). Contact pairs couple the last ``spec.n_pairs`` nodes of
    both beams with a vertical normal and an axial tangent; the axial
    slip at the contact point follows from the slope and probe offset.
    Observers ``tip_upper``/``tip_lower`` are the tip ``z`` DOFs.
    """
    spec = spec or TwinBeamSpec()
    n = spec.n_elements
    nn = n + 1
    ndof = 4 * nn
    rows, cols, kv, mv = [], [], [], []
    _assemble_beam(spec, spec.width, 0, rows, cols, kv, mv)
    _assemble_beam(spec, spec.width * spec.taper_ratio, 2 * nn, rows, cols, kv, mv)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    K = sp.csr_matrix((np.concatenate(kv), (r, c)), shape=(ndof, ndof))
    M = sp.csr_matrix((np.concatenate(mv), (r, c)), shape=(ndof, ndof))
    K = ((K + K.T) * 0.5).tocsr()
    M = ((M + M.T) * 0.5).tocsr()

    le = spec.length / n
    nodes, coords = {}, {}
    for beam, z0 in ((0, 0.0), (1, 2 * spec.probe_offset)):
        for i in range(nn):
            node = beam * nn + i
            nodes[node] = {"z": 2 * node, "slope": 2 * node + 1}
            coords[node] = (i * le, 0.0, z0)
    constrained = []
    if spec.clamped:
        constrained = [0, 1, 2 * nn, 2 * nn + 1]
    b = np.zeros(ndof)
    b[0::2] = 1.0
    b[constrained] = 0.0

    # contact-point displacement (x, z) from nodal (z, slope): u_x = -offset * slope
    d = spec.probe_offset
    map_upper = np.array([[0.0, d], [1.0, 0.0]])
    map_lower = np.array([[0.0, -d], [1.0, 0.0]])
    frame = np.array([[0.0, 1.0], [1.0, 0.0]])
    pairs = tuple(
        ContactPair(nn + i, i, ("z", "slope"), frame, map_upper, map_lower)
        for i in range(nn - spec.n_pairs, nn)
    )
    model = FEModel(
        M=M,
        K=K,
        nodes=nodes,
        constrained_dofs=np.asarray(constrained, dtype=int),
        contact_pairs=pairs,
        b=b,
        observers={"tip_upper": nodes[2 * nn - 1]["z"], "tip_lower": nodes[nn - 1]["z"]},
        coords=coords,
    )
    return model.validate()


# -- mutations -------------------------------------------------------------------


def _translations(model: FEModel, node: int) -> list[tuple[int, int]]:
    """(component index in x/y/z, dof) for the node's translational DOFs."""
    if node not in model.nodes:
        raise ModelError(f"unknown node {node}")
    return [(TRANSLATIONS.index(lab), i) for lab, i in model.nodes[node].items()
            if lab in TRANSLATIONS]


def attach_elastic_layers(model: FEModel, layers) -> FEModel:
    """Add spring layers to K; M is untouched."""
    cons = set(int(i) for i in model.constrained_dofs)
    rows, cols, vals = [], [], []
    for layer in layers:
        nvec = np.asarray(layer.normal, dtype=float)
        C = layer.k_n * np.outer(nvec, nvec) + layer.k_t * (np.eye(3) - np.outer(nvec, nvec))
        for node_a, node_b in layer.pairs:
            ends = [(_translations(model, node_a), 1.0)]
            if node_b is not None:
                ends.append((_translations(model, node_b), -1.0))
            for dofs, _ in ends:
                for _, i in dofs:
                    if i in cons:
                        raise ModelError(f"elastic layer acts on constrained DOF {i}")
            for dofs_p, sp_ in ends:
                for dofs_q, sq in ends:
                    for ci, i in dofs_p:
                        for cj, j in dofs_q:
                            rows.append(i)
                            cols.append(j)
                            vals.append(sp_ * sq * C[ci, cj])
    dK = sp.csr_matrix((vals, (rows, cols)), shape=model.K.shape)
    K = model.K + ((dK + dK.T) * 0.5)
    return replace(model, K=K.tocsr())


def apply_point_masses(model: FEModel, masses) -> FEModel:
    """Lump ``(node, mass)`` entries onto the nodes' translational DOFs."""
    diag = np.zeros(model.n_dofs)
    added = []
    for node, m in masses:
        if m < 0:
            raise ModelError(f"negative point mass at node {node}")
        for _, i in _translations(model, node):
            diag[i] += m
        added.append((int(node), float(m)))
    M = (model.M + sp.diags(diag)).tocsr()
    return replace(model, M=M, point_masses=tuple(model.point_masses) + tuple(added))
