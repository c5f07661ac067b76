"""Concentric-shell sphere models: FE mesh generation and the analytic lead field."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import MeshError
from .mesh import TetrahedralMesh, signed_volumes

log = logging.getLogger(__name__)

# Classic three-shell Ary geometry (mm) and relative conductivities.
ARY_RADII = (87.0, 92.0, 100.0)
ARY_CONDUCTIVITIES = (0.33, 0.33 / 80.0, 0.33)


@dataclass(frozen=True)
class ShellSpec:
    """Concentric shells, innermost first.

    ``radii[k]`` is the outer radius of shell ``k`` in mm; shell ``k`` carries
    compartment label ``k + 1`` in generated meshes.
    """

    radii: tuple
    conductivities: tuple

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        cond = tuple(float(s) for s in self.conductivities)
        if len(radii) < 1 or len(radii) != len(cond):
            raise ValueError("need one conductivity per shell and at least one shell")
        if radii[0] <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("shell radii must be positive and strictly increasing")
        if any(not (s > 0 and np.isfinite(s)) for s in cond):
            raise ValueError("shell conductivities must be positive")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "conductivities", cond)

    @classmethod
    def ary(cls) -> "ShellSpec":
        return cls(ARY_RADII, ARY_CONDUCTIVITIES)

    @property
    def outer_radius(self) -> float:
        return self.radii[-1]

    @property
    def labels(self) -> list:
        return list(range(1, len(self.radii) + 1))

    def conductivity_map(self) -> dict:
        return {k + 1: s for k, s in enumerate(self.conductivities)}

    def shell_volumes(self) -> np.ndarray:
        r = np.concatenate([[0.0], self.radii])
        return 4.0 * np.pi * (r[1:] ** 3 - r[:-1] ** 3) / 3.0


# --- mesh generation --------------------------------------------------------

def _bcc_lattice(half_width: float, h: float):
    """Body-centred cubic nodes and tetrahedra covering [-w, w]^3."""
    m = int(np.ceil(half_width / h)) + 1
    ax = np.arange(-m, m + 1) * h
    nc = len(ax)
    corners = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    cx = ax[:-1] + 0.5 * h
    nk = len(cx)
    centers = np.stack(np.meshgrid(cx, cx, cx, indexing="ij"), -1).reshape(-1, 3)
    nodes = np.concatenate([corners, centers])

    def corner(i, j, k):
        return (i * nc + j) * nc + k

    def center(i, j, k):
        return len(corners) + (i * nk + j) * nk + k

    tets = []
    # Adjacent cube centres along each axis share a square face; every edge of
    # that square closes one tetrahedron with the two centres.
    for axis in range(3):
        idx = [np.arange(nk)] * 3
        idx[axis] = np.arange(nk - 1)
        I, J, K = np.meshgrid(*idx, indexing="ij")
        I, J, K = I.ravel(), J.ravel(), K.ravel()
        step = np.eye(3, dtype=int)[axis]
        c1 = center(I, J, K)
        c2 = center(I + step[0], J + step[1], K + step[2])
        # Square corners in the plane orthogonal to `axis` at the shared face.
        base = np.stack([I, J, K], 1) + step
        u, v = [a for a in range(3) if a != axis]
        sq = []
        for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
            off = np.zeros(3, dtype=int)
            off[u], off[v] = du, dv
            q = base + off
            sq.append(corner(q[:, 0], q[:, 1], q[:, 2]))
        for e in range(4):
            tets.append(np.stack([c1, c2, sq[e], sq[(e + 1) % 4]], 1))
    return nodes, np.concatenate(tets)


def _conform_interfaces(nodes, tets, labels, rad, min_ratio=0.05, max_iter=30):
    # A node touching exactly shells k and k+1 belongs on sphere k. Moves are
    # halved around any element that would shrink below min_ratio of its
    # original volume.
    n = len(nodes)
    touch = np.zeros(n, dtype=np.int64)
    for k in np.unique(labels):
        np.bitwise_or.at(touch, tets[labels == k].ravel(), 1 << int(k - 1))
    r = np.linalg.norm(nodes, axis=1)
    target = nodes.copy()
    for k in range(1, len(rad)):
        on = touch == (3 << (k - 1))
        target[on] *= (rad[k - 1] / r[on])[:, None]
    moving = np.any(target != nodes, axis=1)
    v0 = signed_volumes(nodes, tets)
    frac = np.ones(n)
    for _ in range(max_iter):
        out = nodes + frac[:, None] * (target - nodes)
        bad = signed_volumes(out, tets) * np.sign(v0) < min_ratio * np.abs(v0)
        if not bad.any():
            return out
        hit = np.zeros(n, dtype=bool)
        hit[tets[bad]] = True
        frac[hit & moving] *= 0.5
    return nodes


def generate_sphere_mesh(spec: ShellSpec, target_edge_mm: float, snap: float = 0.3) -> TetrahedralMesh:
    """Tetrahedralize the outer ball with a clipped body-centred cubic lattice.

    Lattice nodes within ``snap * target_edge_mm`` of a shell radius are moved
    radially onto it before clipping, so that compartment interfaces and the
    outer surface follow the spheres closely. Elements are labeled by the
    innermost shell containing their centroid. Nodes on the resulting
    staircase interfaces are then pulled radially onto their sphere, as far
    as element quality allows. Outer boundary nodes that end up outside the
    ball are projected onto it.
    """
    h = float(target_edge_mm)
    if not h > 0:
        raise ValueError("target_edge_mm must be positive")
    if h > spec.radii[0]:
        raise MeshError("resolution too coarse")
    R = spec.outer_radius
    nodes, tets = _bcc_lattice(R + 2 * h, h)

    r = np.linalg.norm(nodes, axis=1)
    rad = np.array(spec.radii)
    gap = np.abs(r[:, None] - rad[None, :])
    nearest = np.argmin(gap, axis=1)
    move = gap[np.arange(len(r)), nearest] < snap * h
    move &= r > 0
    nodes[move] *= (rad[nearest[move]] / r[move])[:, None]

    vol = signed_volumes(nodes, tets)
    cr = np.linalg.norm(nodes[tets].mean(axis=1), axis=1)
    keep = (cr <= R) & (np.abs(vol) > 1e-6 * h**3)
    tets = tets[keep]
    cr = cr[keep]
    labels = np.searchsorted(rad, cr) + 1
    nodes = _conform_interfaces(nodes, tets, labels, rad)

    used = np.unique(tets)
    remap = np.full(len(nodes), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    nodes = nodes[used]
    tets = remap[tets]

    mesh = TetrahedralMesh(nodes, tets, labels, spec.conductivity_map())
    outer = mesh.boundary_nodes
    ro = np.linalg.norm(nodes[outer], axis=1)
    out = ro > R
    if out.any():
        nodes = nodes.copy()
        nodes[outer[out]] *= (R / ro[out])[:, None]
        mesh = TetrahedralMesh(nodes, mesh.tetra, mesh.labels, mesh.conductivities)
    return mesh


# --- analytic lead field ----------------------------------------------------

def _positions(obj) -> np.ndarray:
    pos = getattr(obj, "positions", obj)
    return np.asarray(pos, dtype=float).reshape(-1, 3)


def _radial_gains(spec: ShellSpec, n: np.ndarray) -> np.ndarray:
    """Scaled surface gain per Legendre degree for a source in the inner shell.

    Returns ``h_n`` such that the outer-surface potential of degree ``n`` is
    ``h_n * e**(n-1)`` times the angular factor, ``e`` being the source radius
    over the inner radius. Coefficients are propagated inward from the
    Neumann condition at the outer surface using interface continuity of the
    potential and of the normal current.
    """
    rho = np.array(spec.radii) / spec.outer_radius
    sig = np.array(spec.conductivities)
    n = n.astype(float)
    alpha = n + 1.0
    beta = n.copy()
    for k in range(len(rho) - 2, -1, -1):
        alpha = alpha * (rho[k] / rho[k + 1]) ** n
        beta = beta * (rho[k + 1] / rho[k]) ** (n + 1)
        u = alpha + beta
        flux = sig[k + 1] * (n * alpha - (n + 1) * beta) / sig[k]
        alpha = ((n + 1) * u + flux) / (2 * n + 1)
        beta = (n * u - flux) / (2 * n + 1)
    return (2 * n + 1) / (beta * rho[0] ** 2)


def analytic_sphere_leadfield(spec: ShellSpec, sensors, sources, *, max_degree: int = 400,
                              rtol: float = 1e-12, mean_subtract: bool = True,
                              require_three_shells: bool = True) -> np.ndarray:
    """Outer-surface potentials of unit Cartesian dipoles in a shell model.

    Returns an array (n_sensors, 3 * n_sources); source ``i`` occupies columns
    ``3i..3i+2``. With lengths in mm and conductivities in S/m, values are
    mV per A*mm. Sensors are projected radially onto the outer sphere.
    """
    if require_three_shells and len(spec.radii) != 3:
        raise ValueError("Ary model requires 3 shells")
    R = spec.outer_radius
    sens = _positions(sensors)
    src = _positions(sources)

    rs = np.linalg.norm(sens, axis=1)
    if np.any(rs == 0):
        raise ValueError("sensor at the origin cannot be projected")
    shift = np.abs(rs - R)
    if np.any(shift > 1.0):
        log.warning("sensors projected onto the outer sphere by up to %.3g mm", shift.max())
    xhat = sens / rs[:, None]

    s = np.linalg.norm(src, axis=1)
    ecc = s / spec.radii[0]
    if np.any(ecc >= 1.0):
        bad = int(np.argmax(ecc >= 1.0))
        raise ValueError(f"source {bad} has eccentricity {ecc[bad]:.4f} >= 1")
    rhat = np.zeros_like(src)
    nz = s > 0
    rhat[nz] = src[nz] / s[nz, None]

    degrees = np.arange(1, max_degree + 1)
    gains = _radial_gains(spec, degrees)

    t = xhat @ rhat.T  # (S, n)
    t = np.clip(t, -1.0, 1.0)
    # x_hat - t r_hat, per pair and Cartesian component.
    tang = xhat[:, None, :] - t[..., None] * rhat[None, :, :]
    radial = np.broadcast_to(rhat[None, :, :], tang.shape)

    total = np.zeros(tang.shape)
    p_prev, p_cur = np.ones_like(t), t.copy()  # P_0, P_1
    dp_prev, dp_cur = np.zeros_like(t), np.ones_like(t)  # P_0', P_1'
    quiet = 0
    for i, n in enumerate(degrees):
        scale = gains[i] * ecc ** (n - 1)  # (n_src,)
        term = scale[None, :, None] * (n * p_cur[..., None] * radial + dp_cur[..., None] * tang)
        total += term
        mag = np.abs(term).max(axis=(0, 2))
        ref = np.abs(total).max(axis=(0, 2))
        small = np.all(mag <= rtol * np.maximum(ref, np.finfo(float).tiny))
        quiet = quiet + 1 if small else 0
        if quiet >= 3:
            break
        p_next = ((2 * n + 1) * t * p_cur - n * p_prev) / (n + 1)
        dp_next = dp_prev + (2 * n + 1) * p_cur
        p_prev, p_cur = p_cur, p_next
        dp_prev, dp_cur = dp_cur, dp_next

    L = total.reshape(len(sens), -1) / (4.0 * np.pi * spec.conductivities[0] * R**2)
    if mean_subtract:
        L = L - L.mean(axis=0, keepdims=True)
    return L
