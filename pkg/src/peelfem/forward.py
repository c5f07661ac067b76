"""P1 finite-element forward model: stiffness assembly, transfer matrix, lead field."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ._kernels import jacobi_block_pcg
from .exceptions import MeshError, NumericalError
from .mesh import TetrahedralMesh, nearest_surface_node

log = logging.getLogger(__name__)

MIN_ELEMENT_VOLUME = 1e-12  # mm^3


def element_gradients(nodes: np.ndarray, tetra: np.ndarray):
    """Barycentric basis gradients (M, 4, 3) and element volumes (M,)."""
    p = nodes[tetra]
    J = p[:, 1:] - p[:, :1]  # rows are edge vectors from vertex 0
    vol = np.linalg.det(J) / 6.0
    small = np.flatnonzero(vol < MIN_ELEMENT_VOLUME)
    if len(small):
        e = int(small[0])
        raise MeshError(f"degenerate tetra {e}: volume {vol[e]:.3e} mm^3")
    g = np.linalg.inv(J).transpose(0, 2, 1)
    grads = np.concatenate([-g.sum(axis=1, keepdims=True), g], axis=1)
    return grads, vol


def assemble_system(mesh: TetrahedralMesh) -> sp.csr_matrix:
    """Galerkin stiffness matrix ``sum_T sigma_T * int grad(phi_i) . grad(phi_j)``."""
    grads, vol = element_gradients(mesh.nodes, mesh.tetra)
    ke = np.einsum("eik,ejk->eij", grads, grads) * (mesh.sigma * vol)[:, None, None]
    rows = np.repeat(mesh.tetra, 4, axis=1).ravel()
    cols = np.tile(mesh.tetra, (1, 4)).ravel()
    n = mesh.n_nodes
    A = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


@dataclass(frozen=True, eq=False)
class SensorArray:
    """Point electrodes attached to outer-boundary nodes."""

    positions: np.ndarray
    nodes: np.ndarray
    labels: tuple

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1)
        labels = tuple(str(s) for s in self.labels)
        if not (len(pos) == len(nodes) == len(labels)):
            raise ValueError("positions, nodes and labels must have equal length")
        if len(set(labels)) != len(labels):
            raise ValueError("sensor labels must be unique")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def attach(cls, mesh: TetrahedralMesh, positions, labels: Sequence[str] | None = None) -> "SensorArray":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        if labels is None:
            labels = [f"E{i + 1:03d}" for i in range(len(positions))]
        nodes = [nearest_surface_node(mesh, p) for p in positions]
        return cls(positions, nodes, labels)


def fibonacci_sensors(radius: float, count: int, z_min: float = -1.0) -> np.ndarray:
    """Nearly uniform points on the sphere cap ``z >= z_min * radius``."""
    i = np.arange(count) + 0.5
    z = 1.0 - (1.0 - z_min) * i / count
    r = np.sqrt(np.clip(1.0 - z**2, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sensor_rhs(n_nodes: int, sensor_nodes: np.ndarray) -> np.ndarray:
    """Mean-zero unit loads, one column per sensor."""
    B = np.full((n_nodes, len(sensor_nodes)), -1.0 / n_nodes)
    B[sensor_nodes, np.arange(len(sensor_nodes))] += 1.0
    return B


def _center(X: np.ndarray) -> np.ndarray:
    return X - X.mean(axis=0, keepdims=True)


def _generic_pcg(A, B, precond, thresh, maxiter):
    n, k = B.shape
    X = np.zeros((n, k))
    R = B.copy()
    Z = _center(precond(R))
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    cols = np.arange(k)
    it = 0
    while it < maxiter and len(cols):
        it += 1
        AP = A @ P
        pap = np.einsum("ij,ij->j", P, AP)
        broken = ~(pap > 0) | ~(rz > 0)
        alpha = np.where(broken, 0.0, rz / np.where(broken, 1.0, pap))
        X[:, cols] += alpha * P
        R -= alpha * AP
        keep = (np.linalg.norm(R, axis=0) > thresh[cols]) & ~broken
        if not keep.all():
            cols, R, P, rz = cols[keep], R[:, keep], P[:, keep], rz[keep]
            if not len(cols):
                break
        Z = _center(precond(R))
        rz_new = np.einsum("ij,ij->j", R, Z)
        P = Z + (rz_new / rz) * P
        rz = rz_new
    return X, it


def projected_pcg(A, B: np.ndarray, *, tol: float = 1e-9, maxiter: int | None = None,
                  precond=None, restarts: int = 3) -> np.ndarray:
    """Conjugate gradients for ``A X = B`` restricted to mean-zero vectors.

    ``A`` is a singular Neumann matrix with the constants as null space and
    every column of ``B`` must sum to zero. All columns are iterated as one
    block; converged columns drop out. ``precond`` maps a residual block to a
    preconditioned block; the default is Jacobi, run through fused compiled
    loops. The true residual is checked afterwards and a correction solve is
    started when recurrence drift left it above ``tol``.
    """
    A = sp.csr_matrix(A)
    n, k = B.shape
    maxiter = 10 * n if maxiter is None else maxiter
    bnorm = np.linalg.norm(B, axis=0)
    bnorm[bnorm == 0] = 1.0
    X = np.zeros((n, k))
    used = 0
    for _ in range(restarts + 1):
        R = _center(B - A @ X)
        res = np.linalg.norm(R, axis=0) / bnorm
        active = np.flatnonzero(~(res <= tol))
        if not len(active) or used >= maxiter:
            break
        # Aim an order of magnitude below the target to leave room for drift.
        thresh = 0.1 * tol * bnorm[active]
        if precond is None:
            dX, it = jacobi_block_pcg(A, R[:, active], 1.0 / A.diagonal(), thresh, maxiter - used)
        else:
            dX, it = _generic_pcg(A, R[:, active], precond, thresh, maxiter - used)
        used += it
        X[:, active] += dX
        X = _center(X)
    final = np.linalg.norm(B - A @ X, axis=0) / bnorm
    if not final.max() <= tol:
        raise NumericalError(
            f"CG did not converge: relative residual {final.max():.3e} after {used} iterations")
    log.debug("block PCG: %d columns, %d iterations", k, used)
    return X


def amg_preconditioner(A):
    """Smoothed-aggregation V-cycle applied column by column (needs pyamg)."""
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric", max_coarse=500)
    M = ml.aspreconditioner(cycle="V")
    return lambda R: np.column_stack([M @ R[:, j] for j in range(R.shape[1])])


def compute_transfer(A, sensors: SensorArray, *, tol: float = 1e-9, maxiter: int | None = None,
                     preconditioner: str = "jacobi", boundary_nodes=None) -> np.ndarray:
    """Transfer matrix T (n_sensors, n_nodes): one Neumann solve per sensor.

    Sensor ``r`` attached to node ``k`` solves ``A t = e_k - 1/N``; the row is
    ``t`` with its mean removed.
    """
    n = A.shape[0]
    nodes = np.asarray(sensors.nodes)
    if boundary_nodes is not None:
        off = ~np.isin(nodes, boundary_nodes)
        if off.any():
            raise MeshError(f"sensor {sensors.labels[int(np.argmax(off))]} is not on the boundary")
    if preconditioner == "jacobi":
        precond = None
    elif preconditioner == "amg":
        precond = amg_preconditioner(A)
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")
    uniq, inv = np.unique(nodes, return_inverse=True)
    X = projected_pcg(A, sensor_rhs(n, uniq), tol=tol, maxiter=maxiter, precond=precond)
    T = _center(X).T[inv]
    return T


def transfer_residuals(A, T: np.ndarray, sensors: SensorArray) -> np.ndarray:
    """Relative residual ``|A t_r - b_r| / |b_r|`` of every transfer row."""
    B = sensor_rhs(A.shape[0], np.asarray(sensors.nodes))
    R = A @ T.T - B
    return np.linalg.norm(R, axis=0) / np.linalg.norm(B, axis=0)


def compose_leadfield(T: np.ndarray, D) -> np.ndarray:
    """``L = T D`` with every column re-centred across sensors."""
    if T.shape[1] != D.shape[0]:
        raise ValueError(f"dimension mismatch: T is {T.shape}, D is {D.shape}")
    L = np.asarray((D.T @ T.T).T) if sp.issparse(D) else T @ D
    return L - L.mean(axis=0, keepdims=True)


@dataclass(eq=False)
class ForwardModel:
    """Mesh, sensors, system matrix and transfer matrix bundled for reuse."""

    mesh: TetrahedralMesh
    sensors: SensorArray
    tol: float = 1e-9
    preconditioner: str = "jacobi"
    A: sp.csr_matrix = field(init=False, repr=False)
    T: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A = assemble_system(self.mesh)
        self.T = compute_transfer(self.A, self.sensors, tol=self.tol, preconditioner=self.preconditioner,
                                  boundary_nodes=self.mesh.boundary_nodes)

    def leadfield(self, D) -> np.ndarray:
        return compose_leadfield(self.T, D)
