"""Labeled tetrahedral meshes: validation, boundary extraction, refinement.

Positions are in millimetres and conductivities in S/m. Every element is
stored in canonical vertex order: indices sorted ascending, then the last
two swapped when needed so that the signed volume is positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .exceptions import MeshError

# Face k is opposite local vertex k; winding is outward for a positively
# oriented element.
FACE_SLOTS = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
EDGE_SLOTS = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
# Edge slots belonging to each face slot.
FACE_EDGE_SLOTS = np.array([[3, 4, 5], [1, 2, 5], [0, 2, 4], [0, 1, 3]])


def signed_volumes(nodes: np.ndarray, tetra: np.ndarray) -> np.ndarray:
    p = nodes[tetra]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def canonical_order(nodes: np.ndarray, tetra: np.ndarray) -> np.ndarray:
    """Sort vertex indices and swap the last two where orientation is negative."""
    tetra = np.sort(np.asarray(tetra, dtype=np.int64), axis=1)
    if len(tetra) == 0:
        return tetra
    neg = signed_volumes(nodes, tetra) < 0
    tetra[neg, 2], tetra[neg, 3] = tetra[neg, 3], tetra[neg, 2].copy()
    return tetra


def _pair_keys(pairs: np.ndarray, n: int) -> np.ndarray:
    pairs = np.sort(pairs, axis=-1)
    return pairs[..., 0] * np.int64(n) + pairs[..., 1]


def _triple_keys(faces: np.ndarray, n: int) -> np.ndarray:
    if n >= 2**21:
        raise MeshError(f"too many nodes for face hashing: {n}")
    faces = np.sort(faces, axis=-1).astype(np.int64)
    n = np.int64(n)
    return (faces[..., 0] * n + faces[..., 1]) * n + faces[..., 2]


@dataclass(frozen=True, eq=False)
class TetrahedralMesh:
    """Immutable labeled tetrahedral mesh.

    Parameters
    ----------
    nodes : array (N, 3)
        Node positions in mm.
    tetra : array (M, 4)
        Node indices per element. Reordered canonically on construction.
    labels : array (M,)
        Integer compartment label per element.
    conductivities : mapping
        Compartment label -> conductivity (S/m).
    """

    nodes: np.ndarray
    tetra: np.ndarray
    labels: np.ndarray
    conductivities: Mapping[int, float]

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, 3)
        tetra = np.array(self.tetra, dtype=np.int64).reshape(-1, 4)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        cond = {int(k): float(v) for k, v in dict(self.conductivities).items()}

        if len(labels) != len(tetra):
            raise MeshError(f"{len(labels)} labels for {len(tetra)} tetra")
        if not np.all(np.isfinite(nodes)):
            raise MeshError("non-finite node coordinates")
        if len(tetra) and (tetra.min() < 0 or tetra.max() >= len(nodes)):
            raise MeshError("tetra reference nodes out of range")
        for lab in np.unique(labels):
            if int(lab) not in cond:
                raise MeshError(f"no conductivity for compartment {int(lab)}")
        bad = [k for k, v in cond.items() if not (v > 0 and np.isfinite(v))]
        if bad:
            raise MeshError(f"conductivity must be positive for compartments {bad}")

        tetra = canonical_order(nodes, tetra)
        if len(tetra):
            vol = signed_volumes(nodes, tetra)
            flat = np.flatnonzero(vol <= 0)
            if len(flat):
                raise MeshError(f"degenerate tetra {int(flat[0])} (zero volume)")

        for arr in (nodes, tetra, labels):
            arr.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tetra", tetra)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "conductivities", cond)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tetra(self) -> int:
        return len(self.tetra)

    @cached_property
    def volumes(self) -> np.ndarray:
        return signed_volumes(self.nodes, self.tetra)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.tetra].mean(axis=1)

    @cached_property
    def sigma(self) -> np.ndarray:
        """Per-element conductivity."""
        lut = self.conductivities
        return np.array([lut[int(k)] for k in self.labels], dtype=float)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Sorted indices of nodes on the outer boundary."""
        if self.n_tetra == 0:
            return np.zeros(0, dtype=np.int64)
        return extract_surface(self, np.unique(self.labels)).surface_node_set

    @cached_property
    def face_neighbors(self) -> np.ndarray:
        """(M, 4) index of the element across each face slot, -1 on the boundary."""
        m = self.n_tetra
        keys = _triple_keys(self.tetra[:, FACE_SLOTS], self.n_nodes).ravel()
        order = np.argsort(keys, kind="stable")
        sk = keys[order]
        nbr = np.full(4 * m, -1, dtype=np.int64)
        same = np.flatnonzero(sk[1:] == sk[:-1])
        a, b = order[same], order[same + 1]
        nbr[a] = b // 4
        nbr[b] = a // 4
        return nbr.reshape(m, 4)

    def edge_lengths(self) -> np.ndarray:
        p = self.nodes[self.tetra[:, EDGE_SLOTS]]
        return np.linalg.norm(p[:, :, 1] - p[:, :, 0], axis=-1)

    def select(self, compartments: Iterable[int]) -> np.ndarray:
        """Boolean element mask for the given compartment labels."""
        return np.isin(self.labels, np.fromiter(compartments, dtype=np.int64))

    def with_conductivities(self, conductivities: Mapping[int, float]) -> "TetrahedralMesh":
        return TetrahedralMesh(self.nodes, self.tetra, self.labels, conductivities)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Boundary triangles of a compartment selection.

    ``triangles`` are wound outward from their owner element.
    """

    triangles: np.ndarray
    surface_node_set: np.ndarray
    owner_tetra: np.ndarray
    face_slot: np.ndarray

    def area(self, nodes: np.ndarray) -> float:
        p = nodes[self.triangles]
        return 0.5 * float(np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum())


def extract_surface(mesh: TetrahedralMesh, compartments: Iterable[int]) -> SurfaceMesh:
    """Faces owned by exactly one element of the selected compartments.

    Ordering is by owner element index, then face slot.
    """
    comps = np.unique(np.fromiter(compartments, dtype=np.int64))
    sel = np.flatnonzero(np.isin(mesh.labels, comps))
    if len(comps) == 0 or len(sel) == 0:
        raise MeshError("no tetra in compartments")
    faces = mesh.tetra[sel][:, FACE_SLOTS]
    keys = _triple_keys(faces, mesh.n_nodes).ravel()
    _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    on_surface = counts[inverse.ravel()] == 1
    flat = np.flatnonzero(on_surface)
    triangles = faces.reshape(-1, 3)[flat]
    return SurfaceMesh(
        triangles=triangles,
        surface_node_set=np.unique(triangles),
        owner_tetra=sel[flat // 4],
        face_slot=flat % 4,
    )


def nearest_surface_node(mesh: TetrahedralMesh, point) -> int:
    """Outer-boundary node closest to ``point``; lowest index wins ties."""
    point = np.asarray(point, dtype=float).reshape(3)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    cand = mesh.boundary_nodes
    d2 = ((mesh.nodes[cand] - point) ** 2).sum(axis=1)
    return int(cand[np.argmin(d2)])


# --- refinement -------------------------------------------------------------

# Octahedron split of a red-refined element. Local ids 4..9 are the midpoints
# of EDGE_SLOTS 0..5; each entry is (diagonal, equator cycle).
_OCTA_SPLITS = (
    ((4, 9), (5, 6, 8, 7)),
    ((5, 8), (4, 6, 9, 7)),
    ((6, 7), (4, 5, 9, 8)),
)
_RED_CORNERS = np.array([[0, 4, 5, 6], [4, 1, 7, 8], [5, 7, 2, 9], [6, 8, 9, 3]])


def _edge_masks(tetra: np.ndarray, marked: np.ndarray, n: int) -> np.ndarray:
    keys = _pair_keys(tetra[:, EDGE_SLOTS], n)
    hit = np.isin(keys, marked)
    return (hit * (1 << np.arange(6))).sum(axis=1)


def _close_marks(tetra: np.ndarray, marked: np.ndarray, n: int) -> np.ndarray:
    """Grow the marked edge set until every element has an admissible pattern.

    Admissible: nothing marked, all six edges, exactly the three edges of one
    face, or any pattern without a fully marked face (bisection closure).
    """
    face_bits = (1 << FACE_EDGE_SLOTS).sum(axis=1)
    while True:
        mask = _edge_masks(tetra, marked, n)
        full_face = np.zeros(len(tetra), dtype=bool)
        exact_face = np.zeros(len(tetra), dtype=bool)
        for bits in face_bits:
            full_face |= (mask & bits) == bits
            exact_face |= mask == bits
        upgrade = full_face & ~exact_face & (mask != 63)
        if not upgrade.any():
            return marked
        extra = _pair_keys(tetra[upgrade][:, EDGE_SLOTS], n).ravel()
        marked = np.union1d(marked, extra)


def _bisect_closure(tetra: np.ndarray, marked: np.ndarray, midpoint, n: int):
    """Recursive bisection along marked edges taken in ascending key order.

    Returns the children and the row of ``tetra`` each one came from.
    """
    # Children carry midpoint ids >= n, so keys need a wider base to stay unique.
    big = n + len(marked)
    marked_big = (marked // n) * big + marked % n
    done_t, done_p = [], []
    work, parent = tetra, np.arange(len(tetra))
    while len(work):
        keys = _pair_keys(work[:, EDGE_SLOTS], big)
        hit = np.isin(keys, marked_big)
        finished = ~hit.any(axis=1)
        done_t.append(work[finished])
        done_p.append(parent[finished])
        work, parent = work[~finished], parent[~finished]
        keys, hit = keys[~finished], hit[~finished]
        if not len(work):
            break
        slot = np.argmin(np.where(hit, keys, np.iinfo(np.int64).max), axis=1)
        rows = np.arange(len(work))
        ends = EDGE_SLOTS[slot]
        k = keys[rows, slot]
        mid = midpoint((k // big) * n + k % big)
        a = work.copy()
        b = work.copy()
        a[rows, ends[:, 1]] = mid
        b[rows, ends[:, 0]] = mid
        work = np.concatenate([a, b])
        parent = np.concatenate([parent, parent])
    return np.concatenate(done_t), np.concatenate(done_p)


def _refine_once(mesh: TetrahedralMesh, selected: np.ndarray) -> TetrahedralMesh:
    n = mesh.n_nodes
    tetra = mesh.tetra
    marked = np.unique(_pair_keys(tetra[selected][:, EDGE_SLOTS], n).ravel())
    marked = _close_marks(tetra, marked, n)

    a, b = marked // n, marked % n
    new_nodes = np.concatenate([mesh.nodes, 0.5 * (mesh.nodes[a] + mesh.nodes[b])])

    def midpoint(keys):
        return n + np.searchsorted(marked, keys)

    mask = _edge_masks(tetra, marked, n)
    face_bits = (1 << FACE_EDGE_SLOTS).sum(axis=1)
    out_t, out_l = [tetra[mask == 0]], [mesh.labels[mask == 0]]

    red = np.flatnonzero(mask == 63)
    if len(red):
        t = tetra[red]
        local = np.concatenate([t, midpoint(_pair_keys(t[:, EDGE_SLOTS], n))], axis=1)
        kids = [local[:, c] for c in _RED_CORNERS]
        # Split the inner octahedron along its shortest diagonal.
        diag_len = np.stack(
            [np.linalg.norm(new_nodes[local[:, p]] - new_nodes[local[:, q]], axis=1)
             for (p, q), _ in _OCTA_SPLITS], axis=1)
        choice = np.argmin(diag_len, axis=1)
        octa = np.empty((len(t), 4, 4), dtype=np.int64)
        for k, ((p, q), cyc) in enumerate(_OCTA_SPLITS):
            rows = choice == k
            for j in range(4):
                octa[rows, j] = local[rows][:, [p, q, cyc[j], cyc[(j + 1) % 4]]]
        kids.extend(octa[:, j] for j in range(4))
        out_t.append(np.concatenate(kids))
        out_l.append(np.tile(mesh.labels[red], 8))

    for k, bits in enumerate(face_bits):
        rows = np.flatnonzero(mask == bits)
        if not len(rows):
            continue
        t = tetra[rows]
        apex = t[:, k]
        fa, fb, fc = (t[:, j] for j in FACE_SLOTS[k])
        mab = midpoint(_pair_keys(np.stack([fa, fb], 1), n))
        mbc = midpoint(_pair_keys(np.stack([fb, fc], 1), n))
        mac = midpoint(_pair_keys(np.stack([fa, fc], 1), n))
        out_t.append(np.concatenate([
            np.stack([apex, fa, mab, mac], 1),
            np.stack([apex, fb, mab, mbc], 1),
            np.stack([apex, fc, mac, mbc], 1),
            np.stack([apex, mab, mbc, mac], 1),
        ]))
        out_l.append(np.tile(mesh.labels[rows], 4))

    rest = np.flatnonzero((mask != 0) & (mask != 63) & ~np.isin(mask, face_bits))
    if len(rest):
        kids, parent = _bisect_closure(tetra[rest], marked, midpoint, n)
        out_t.append(kids)
        out_l.append(mesh.labels[rest][parent])

    return TetrahedralMesh(new_nodes, np.concatenate(out_t), np.concatenate(out_l),
                           mesh.conductivities)


def refine_compartments(mesh: TetrahedralMesh, compartments: Iterable[int], rounds: int = 1) -> TetrahedralMesh:
    """Red-refine every element of ``compartments`` and close the mesh conformingly.

    Selected elements are split 1->8 through their edge midpoints. Elements
    outside the selection that end up with split edges are subdivided by face
    splits or edge bisection so that no hanging nodes remain. Each round
    refines the children of the previous one.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    comps = list(compartments)
    for _ in range(rounds):
        sel = mesh.select(comps)
        if not sel.any():
            break
        mesh = _refine_once(mesh, sel)
    return mesh


def face_multiplicity(mesh: TetrahedralMesh) -> np.ndarray:
    """Occurrence count of every distinct face in the mesh."""
    keys = _triple_keys(mesh.tetra[:, FACE_SLOTS], mesh.n_nodes).ravel()
    return np.unique(keys, return_counts=True)[1]
