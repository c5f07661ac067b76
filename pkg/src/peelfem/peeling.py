"""Removal of source-hosting elements near active-compartment boundaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TetrahedralMesh, extract_surface

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PeelConfig:
    depth_mm: float
    active_compartments: frozenset

    def __init__(self, depth_mm: float, active_compartments: Iterable[int]):
        depth = float(depth_mm)
        comps = frozenset(int(c) for c in active_compartments)
        if not depth >= 0 or not np.isfinite(depth):
            raise ValueError("depth_mm must be a finite non-negative length")
        if not comps:
            raise ValueError("active_compartments must be non-empty")
        object.__setattr__(self, "depth_mm", depth)
        object.__setattr__(self, "active_compartments", comps)


@dataclass(frozen=True, eq=False)
class PeelResult:
    kept_tetra: np.ndarray
    removed_tetra: np.ndarray
    surface_nodes: np.ndarray
    depth_mm: float = 0.0

    @property
    def n_kept(self) -> int:
        return len(self.kept_tetra)

    def summary(self) -> dict:
        return {
            "depth_mm": self.depth_mm,
            "kept": int(len(self.kept_tetra)),
            "removed": int(len(self.removed_tetra)),
            "surface_nodes": int(len(self.surface_nodes)),
        }


def _distances(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # Shared by the grid search and the exhaustive reference so that both
    # evaluate bit-identical distances.
    return np.sqrt(((points[:, None, :] - targets[None, :, :]) ** 2).sum(axis=-1))


def _near_surface_grid(points: np.ndarray, surface: np.ndarray, depth: float, cell: float) -> np.ndarray:
    """Mask of ``points`` with some surface point strictly closer than ``depth``."""
    near = np.zeros(len(points), dtype=bool)
    if depth <= 0 or len(points) == 0 or len(surface) == 0:
        return near
    cell = max(cell, depth) * (1 + 1e-9)
    origin = np.minimum(points.min(axis=0), surface.min(axis=0))
    pc = np.floor((points - origin) / cell).astype(np.int64)
    sc = np.floor((surface - origin) / cell).astype(np.int64)
    dims = np.maximum(pc.max(axis=0), sc.max(axis=0)) + 3

    def key(c):
        c = c + 1
        return (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]

    skey = key(sc)
    s_order = np.argsort(skey, kind="stable")
    skey_sorted = skey[s_order]
    pkey = key(pc)
    p_order = np.argsort(pkey, kind="stable")
    cells, starts = np.unique(pkey[p_order], return_index=True)
    bounds = np.append(starts, len(p_order))
    offsets = np.array([(i * dims[1] + j) * dims[2] + k
                        for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])

    probe = cells[:, None] + offsets[None, :]
    lo_all = np.searchsorted(skey_sorted, probe, side="left")
    hi_all = np.searchsorted(skey_sorted, probe, side="right")

    for lo, hi, lo_s, hi_s in zip(bounds[:-1], bounds[1:], lo_all, hi_all):
        cand = np.concatenate([s_order[a:b] for a, b in zip(lo_s, hi_s) if b > a] or [[]]).astype(np.int64)
        if not len(cand):
            continue
        rows = p_order[lo:hi]
        d = _distances(points[rows], surface[cand])
        near[rows] = (d < depth).any(axis=1)
    return near


def _assemble(mesh: TetrahedralMesh, active: np.ndarray, qualifies: np.ndarray,
              surface_nodes: np.ndarray, depth: float) -> PeelResult:
    keep = qualifies[mesh.tetra[active]].all(axis=1)
    res = PeelResult(active[keep], active[~keep], surface_nodes, depth)
    if res.n_kept == 0:
        log.warning("peeling at %.3g mm removed every active element", depth)
    return res


def peel(mesh: TetrahedralMesh, config: PeelConfig) -> PeelResult:
    """Keep active elements whose four nodes all stand clear of the active surface.

    A node qualifies when it is not itself a surface node of the active
    compartments and its distance to every surface node is at least
    ``config.depth_mm``. Because surface nodes never qualify, the outermost
    element layer is always removed, even at depth zero.
    """
    active = np.flatnonzero(mesh.select(config.active_compartments))
    surf = extract_surface(mesh, config.active_compartments).surface_node_set
    nodes = np.unique(mesh.tetra[active])
    qualifies = np.zeros(mesh.n_nodes, dtype=bool)
    qualifies[nodes] = True
    qualifies[surf] = False

    cand = np.flatnonzero(qualifies)
    if config.depth_mm > 0 and len(cand):
        cell = float(np.median(mesh.edge_lengths()[active]))
        near = _near_surface_grid(mesh.nodes[cand], mesh.nodes[surf], config.depth_mm, cell)
        qualifies[cand[near]] = False
    return _assemble(mesh, active, qualifies, surf, config.depth_mm)


def peel_exhaustive(mesh: TetrahedralMesh, config: PeelConfig, chunk: int = 2048) -> PeelResult:
    """Reference implementation: full node-to-surface-node distance scan."""
    active = np.flatnonzero(mesh.select(config.active_compartments))
    surf = extract_surface(mesh, config.active_compartments).surface_node_set
    nodes = np.unique(mesh.tetra[active])
    qualifies = np.zeros(mesh.n_nodes, dtype=bool)
    S = mesh.nodes[surf]
    for lo in range(0, len(nodes), chunk):
        block = nodes[lo:lo + chunk]
        dmin = _distances(mesh.nodes[block], S).min(axis=1)
        qualifies[block] = dmin >= config.depth_mm
    qualifies[surf] = False
    return _assemble(mesh, active, qualifies, surf, config.depth_mm)


def effective_depth(mesh: TetrahedralMesh, result: PeelResult) -> tuple[float, bool]:
    """Smallest distance from a kept element's node to the active surface nodes.

    Returns ``(depth, ok)``; ``ok`` is False and depth is ``inf`` when nothing
    was kept.
    """
    if result.n_kept == 0:
        return float("inf"), False
    nodes = np.unique(mesh.tetra[result.kept_tetra])
    tree = cKDTree(mesh.nodes[result.surface_nodes])
    d, _ = tree.query(mesh.nodes[nodes])
    return float(d.min()), True
