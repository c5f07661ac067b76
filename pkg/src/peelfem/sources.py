"""H(div) source space: source placement, node-pair dipoles and the PBO interpolation matrix."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .exceptions import NumericalError
from .forward import element_gradients
from .mesh import EDGE_SLOTS, TetrahedralMesh, _pair_keys
from .peeling import PeelResult

log = logging.getLogger(__name__)

EDGEWISE = 0
FACE_INTERSECTING = 1


@dataclass(frozen=True, eq=False)
class SourceSpace:
    """Source positions (mm) and the kept element hosting each one.

    Every source carries three Cartesian unit dipoles; source ``i`` owns
    lead-field columns ``3i..3i+2``.
    """

    positions: np.ndarray
    host_tetra: np.ndarray
    spacing: float = float("nan")
    origin: np.ndarray | None = None

    def __len__(self):
        return len(self.positions)

    def subset(self, index) -> "SourceSpace":
        index = np.asarray(index)
        return SourceSpace(self.positions[index], self.host_tetra[index], self.spacing, self.origin)


def _lattice_hits(mesh: TetrahedralMesh, kept: np.ndarray, origin: np.ndarray, s: float, geom=None):
    """Lattice cell centres ``origin + (ijk + 1/2) s`` lying in kept elements.

    Returns (lattice index triples, host element) sorted by lattice index; a
    point on a shared face goes to the lowest element index.
    """
    p = mesh.nodes[mesh.tetra[kept]]
    lo = np.ceil((p.min(axis=1) - origin) / s - 0.5 - 1e-9).astype(np.int64)
    hi = np.floor((p.max(axis=1) - origin) / s - 0.5 + 1e-9).astype(np.int64)
    span = np.maximum(hi - lo + 1, 0)
    count = span.prod(axis=1)
    total = int(count.sum())
    if total == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    owner = np.repeat(np.arange(len(kept)), count)
    # Position of each candidate within its element's bounding box.
    local = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    sp_ = span[owner]
    ijk = np.stack([local // (sp_[:, 1] * sp_[:, 2]), (local // sp_[:, 2]) % sp_[:, 1], local % sp_[:, 2]], 1)
    ijk += lo[owner]
    x = origin + (ijk + 0.5) * s
    grads, p0 = geom if geom is not None else _bary_geometry(mesh, kept)
    lam = np.einsum("nij,nj->ni", grads[owner][:, 1:], x - p0[owner])
    lam = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
    inside = (lam >= -1e-12).all(axis=1)
    ijk, owner = ijk[inside], owner[inside]
    order = np.lexsort((owner, ijk[:, 2], ijk[:, 1], ijk[:, 0]))
    ijk, owner = ijk[order], owner[order]
    first = np.ones(len(ijk), dtype=bool)
    first[1:] = np.any(ijk[1:] != ijk[:-1], axis=1)
    return ijk[first], kept[owner[first]]


def _bary_geometry(mesh: TetrahedralMesh, kept: np.ndarray):
    grads, _ = element_gradients(mesh.nodes, mesh.tetra[kept])
    return grads, mesh.nodes[mesh.tetra[kept, 0]]


# Default lattice offset in units of the spacing. Incommensurate per axis so
# that symmetric domains do not admit whole shells of points at one spacing.
_LATTICE_PHASE = np.array([np.sqrt(2.0), np.sqrt(3.0), np.sqrt(5.0)]) % 1.0


def place_sources(mesh: TetrahedralMesh, peel: PeelResult, target_count: int, *,
                  spacing: float | None = None, origin=None, rtol: float = 0.02,
                  max_iter: int = 30) -> SourceSpace:
    """Evenly distribute sources over the kept elements.

    Positions are cell centres of a cubic lattice intersected with the kept
    elements. Unless ``spacing`` is given, it is bisected (in log scale) until
    the number of positions is within ``rtol`` of ``target_count`` or
    ``max_iter`` iterations have elapsed, in which case the closest count seen
    is used. By default the lattice sits at an irrational offset from the
    lower corner of the kept elements' bounding box; the returned ``origin``
    and ``spacing`` can be passed back to freeze the lattice.
    """
    kept = np.asarray(peel.kept_tetra, dtype=np.int64)
    if len(kept) == 0:
        raise ValueError("peeled source space is empty")
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    if origin is None:
        corner = mesh.nodes[mesh.tetra[kept]].reshape(-1, 3).min(axis=0)
        phase = _LATTICE_PHASE
    else:
        corner = np.asarray(origin, dtype=float)
        phase = np.zeros(3)
    geom = _bary_geometry(mesh, kept)

    def run(s):
        return _lattice_hits(mesh, kept, corner + phase * s, s, geom)

    if spacing is not None:
        s = float(spacing)
        ijk, host = run(s)
    else:
        volume = float(mesh.volumes[kept].sum())
        s = (volume / target_count) ** (1.0 / 3.0)
        best = None
        lo_s, hi_s = None, None
        for _ in range(max_iter):
            ijk, host = run(s)
            n = len(host)
            if best is None or abs(n - target_count) < abs(best[2] - target_count):
                best = (ijk, host, n, s)
            if abs(n - target_count) <= rtol * target_count:
                break
            if n > target_count:
                lo_s = s
            else:
                hi_s = s
            if lo_s is None:
                s = hi_s / 1.5
            elif hi_s is None:
                s = lo_s * 1.5
            else:
                s = np.sqrt(lo_s * hi_s)
        ijk, host, n, s = best
        if abs(n - target_count) > rtol * target_count:
            log.warning("source placement reached %d positions for target %d", n, target_count)
    origin = corner + phase * s
    positions = origin + (ijk + 0.5) * s
    return SourceSpace(positions, host, s, origin)


def sources_at(mesh: TetrahedralMesh, kept, positions, k: int = 16) -> SourceSpace:
    """Source space at given points, each hosted by a kept element containing it.

    A point outside every kept element raises ``ValueError``.
    """
    kept = np.unique(np.asarray(kept, dtype=np.int64))
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    grads, p0 = _bary_geometry(mesh, kept)
    k = min(k, len(kept))
    _, near = cKDTree(mesh.centroids[kept]).query(pts, k=k)
    near = near.reshape(len(pts), k)
    host = np.full(len(pts), -1, dtype=np.int64)
    for i, x in enumerate(pts):
        cand = np.sort(near[i])
        lam = np.einsum("nij,nj->ni", grads[cand][:, 1:], x - p0[cand])
        lam = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
        inside = np.flatnonzero((lam >= -1e-12).all(axis=1))
        if len(inside) == 0:
            inside_all = np.flatnonzero(_contains(grads, p0, x))
            if len(inside_all) == 0:
                raise ValueError(f"point {i} at {x.tolist()} lies outside the kept elements")
            host[i] = kept[inside_all[0]]
        else:
            host[i] = kept[cand[inside[0]]]
    return SourceSpace(pts, host)


def _contains(grads, p0, x):
    lam = np.einsum("nij,nj->ni", grads[:, 1:], x - p0)
    return (lam >= -1e-12).all(axis=1) & (lam.sum(axis=1) <= 1 + 1e-12)


@dataclass(frozen=True, eq=False)
class HdivDipoles:
    """Node-pair dipoles; pair ``(a, b)`` points from node ``a`` to node ``b``."""

    pairs: np.ndarray
    kind: np.ndarray
    direction: np.ndarray
    position: np.ndarray
    length: np.ndarray
    host_tetra: np.ndarray

    def __len__(self):
        return len(self.pairs)

    @property
    def n_edgewise(self) -> int:
        return int((self.kind == EDGEWISE).sum())

    @property
    def n_face_intersecting(self) -> int:
        return int((self.kind == FACE_INTERSECTING).sum())


def enumerate_hdiv_dipoles(mesh: TetrahedralMesh, kept) -> HdivDipoles:
    """Edgewise dipoles on every edge of a kept element, plus one
    face-intersecting dipole per face shared by two kept elements, joining the
    two vertices opposite that face."""
    kept = np.unique(np.asarray(kept, dtype=np.int64))
    n = mesh.n_nodes
    edges = np.sort(mesh.tetra[kept][:, EDGE_SLOTS].reshape(-1, 2), axis=1)
    ekeys = _pair_keys(edges, n)
    ekeys, first = np.unique(ekeys, return_index=True)
    e_pairs = edges[first]
    e_host = np.repeat(kept, 6)[first]

    is_kept = np.zeros(mesh.n_tetra, dtype=bool)
    is_kept[kept] = True
    nbr = mesh.face_neighbors[kept]
    t_idx, slot = np.nonzero((nbr > np.repeat(kept[:, None], 4, axis=1)) & is_kept[np.maximum(nbr, 0)] & (nbr >= 0))
    t = kept[t_idx]
    other = nbr[t_idx, slot]
    apex = mesh.tetra[t, slot]
    face_sum = mesh.tetra[t].sum(axis=1) - apex
    opposite = mesh.tetra[other].sum(axis=1) - face_sum
    f_pairs = np.sort(np.stack([apex, opposite], 1), axis=1)
    fkeys = _pair_keys(f_pairs, n)
    fkeys, ffirst = np.unique(fkeys, return_index=True)
    f_pairs, f_host = f_pairs[ffirst], t[ffirst]
    fresh = ~np.isin(fkeys, ekeys)

    pairs = np.concatenate([e_pairs, f_pairs[fresh]])
    kind = np.concatenate([np.full(len(e_pairs), EDGEWISE), np.full(int(fresh.sum()), FACE_INTERSECTING)])
    host = np.concatenate([e_host, f_host[fresh]])
    a, b = mesh.nodes[pairs[:, 0]], mesh.nodes[pairs[:, 1]]
    vec = b - a
    length = np.linalg.norm(vec, axis=1)
    return HdivDipoles(pairs, kind, vec / length[:, None], 0.5 * (a + b), length, host)


def _node_incidence(dipoles: HdivDipoles, n_nodes: int) -> sp.csr_matrix:
    m = len(dipoles)
    rows = dipoles.pairs.ravel()
    cols = np.repeat(np.arange(m), 2)
    return sp.csr_matrix((np.ones(2 * m), (rows, cols)), shape=(n_nodes, m))


def pbo_weights(directions: np.ndarray, offsets: np.ndarray, reg: float = 1e-6) -> np.ndarray:
    """Moment-matching weights, one column per Cartesian component.

    Minimizes ``sum_j w_j^2 (|offset_j|^2 + reg * mean|offset|^2)`` subject
    to ``sum_j w_j direction_j = e_c``. Returns an array (K, 3).
    """
    d2 = (offsets**2).sum(axis=1)
    q = d2 + reg * max(d2.mean(), np.finfo(float).tiny)
    C = directions.T  # (3, K)
    Cq = C / q
    G = Cq @ C.T
    return np.linalg.solve(G, Cq).T


def build_interpolation_pbo(mesh: TetrahedralMesh, dipoles: HdivDipoles, sources: SourceSpace, *,
                            max_candidates: int = 30, reg: float = 1e-6,
                            rank_tol: float = 1e-8) -> sp.csr_matrix:
    """Interpolation matrix D (n_nodes, 3 * n_sources) by position-based optimization.

    Candidates for a source are the dipoles with an end at a vertex of its
    host element, capped at the ``max_candidates`` whose midpoints are
    closest. Dipole ``j`` with weight ``w`` (A*mm) loads ``-w/len_j`` at its
    negative node and ``+w/len_j`` at its positive node, so that every column
    has zero net charge and first moment equal to the requested unit dipole.
    """
    inc = _node_incidence(dipoles, mesh.n_nodes)
    rows, cols, vals = [], [], []
    for i, (x, h) in enumerate(zip(sources.positions, sources.host_tetra)):
        cand = np.unique(inc[mesh.tetra[h]].indices)
        if len(cand) == 0:
            raise NumericalError(f"source {i}: no candidate dipoles around host tetra {h}")
        off = dipoles.position[cand] - x
        dist = np.linalg.norm(off, axis=1)
        if len(cand) > max_candidates:
            pick = np.lexsort((cand, dist))[:max_candidates]
            cand, off = cand[pick], off[pick]
        dirs = dipoles.direction[cand]
        sv = np.linalg.svd(dirs, compute_uv=False)
        if len(sv) < 3 or sv[-1] < rank_tol * sv[0]:
            raise NumericalError(f"source {i}: candidate dipoles span fewer than 3 directions")
        W = pbo_weights(dirs, off, reg)
        q = W / dipoles.length[cand, None]  # (K, 3) charges
        a, b = dipoles.pairs[cand, 0], dipoles.pairs[cand, 1]
        for c in range(3):
            rows.extend((a, b))
            cols.append(np.full(2 * len(cand), 3 * i + c))
            vals.extend((-q[:, c], q[:, c]))
    shape = (mesh.n_nodes, 3 * len(sources))
    if not rows:
        return sp.csr_matrix(shape)
    D = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)
    D = D.tocsr()
    D.sum_duplicates()
    return D
