"""Text, binary and JSON formats for meshes, sensors, lead fields and results.

Units are fixed: positions in mm, conductivities in S/m.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .exceptions import MeshError
from .mesh import TetrahedralMesh
from .peeling import PeelResult
from .sources import SourceSpace

LFLD_MAGIC = b"LFLD"
_LFLD_HEADER = struct.Struct("<4sIII")


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                yield line


def _expect(lines, keyword, path):
    try:
        line = next(lines)
    except StopIteration:
        raise MeshError(f"{path}: missing '{keyword}' section") from None
    parts = line.split()
    if parts[0] != keyword or len(parts) != 2:
        raise MeshError(f"{path}: expected '{keyword} <count>', got {line!r}")
    return int(parts[1])


def _rows(lines, count, width, path, what):
    rows = []
    for _ in range(count):
        try:
            parts = next(lines).split()
        except StopIteration:
            raise MeshError(f"{path}: truncated {what} block") from None
        if len(parts) != width:
            raise MeshError(f"{path}: {what} line has {len(parts)} fields, expected {width}")
        rows.append(parts)
    return rows


def read_mesh(path) -> TetrahedralMesh:
    lines = _content_lines(path)
    if next(lines, None) != "tetmesh v1":
        raise MeshError(f"{path}: not a 'tetmesh v1' file")
    n = _expect(lines, "nodes", path)
    nodes = np.array(_rows(lines, n, 3, path, "node"), dtype=float).reshape(-1, 3)
    m = _expect(lines, "tetra", path)
    tet = np.array(_rows(lines, m, 5, path, "tetra"), dtype=np.int64).reshape(-1, 5)
    k = _expect(lines, "conductivity", path)
    cond = {int(a): float(b) for a, b in _rows(lines, k, 2, path, "conductivity")}
    return TetrahedralMesh(nodes, tet[:, :4], tet[:, 4], cond)


def write_mesh(path, mesh: TetrahedralMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tetmesh v1\n# positions in mm, conductivities in S/m\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for x, y, z in mesh.nodes.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
        fh.write(f"tetra {mesh.n_tetra}\n")
        for (i, j, k, l), lab in zip(mesh.tetra.tolist(), mesh.labels.tolist()):
            fh.write(f"{i} {j} {k} {l} {lab}\n")
        fh.write(f"conductivity {len(mesh.conductivities)}\n")
        for lab in sorted(mesh.conductivities):
            fh.write(f"{lab} {float(mesh.conductivities[lab])!r}\n")


def read_sensors(path) -> tuple[list[str], np.ndarray]:
    lines = _content_lines(path)
    if next(lines, None) != "sensors v1":
        raise ValueError(f"{path}: not a 'sensors v1' file")
    labels, pos = [], []
    for line in lines:
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}: sensor line {line!r} must be 'label x y z'")
        labels.append(parts[0])
        pos.append([float(v) for v in parts[1:]])
    return labels, np.array(pos, dtype=float).reshape(-1, 3)


def write_sensors(path, labels, positions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sensors v1\n")
        for lab, (x, y, z) in zip(labels, np.asarray(positions, dtype=float).tolist()):
            fh.write(f"{lab} {x!r} {y!r} {z!r}\n")


def write_leadfield(path, L: np.ndarray) -> None:
    L = np.ascontiguousarray(L, dtype="<f8")
    rows, cols = L.shape
    with open(path, "wb") as fh:
        fh.write(_LFLD_HEADER.pack(LFLD_MAGIC, rows, cols, 0))
        fh.write(L.tobytes(order="C"))


def read_leadfield(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _LFLD_HEADER.size:
        raise ValueError(f"{path}: file too short for a lead-field header")
    magic, rows, cols, _ = _LFLD_HEADER.unpack_from(data)
    if magic != LFLD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = data[_LFLD_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def write_dmat(path, D) -> None:
    D = sp.coo_matrix(D)
    order = np.lexsort((D.col, D.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dmat v1\n{D.shape[0]} {D.shape[1]}\n")
        for i, j, v in zip(D.row[order].tolist(), D.col[order].tolist(), D.data[order].tolist()):
            fh.write(f"{i} {j} {v!r}\n")


def read_dmat(path) -> sp.csr_matrix:
    lines = _content_lines(path)
    if next(lines, None) != "dmat v1":
        raise ValueError(f"{path}: not a 'dmat v1' file")
    shape = tuple(int(v) for v in next(lines).split())
    rows, cols, vals = [], [], []
    for line in lines:
        i, j, v = line.split()
        rows.append(int(i))
        cols.append(int(j))
        vals.append(float(v))
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)


def _dump(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_source_space(path, src: SourceSpace) -> None:
    _dump(path, {
        "positions": src.positions.tolist(),
        "host_tetra": src.host_tetra.tolist(),
        "spacing_mm": src.spacing if np.isfinite(src.spacing) else None,
        "origin": None if src.origin is None else np.asarray(src.origin).tolist(),
    })


def read_source_space(path) -> SourceSpace:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    origin = None if d.get("origin") is None else np.array(d["origin"], dtype=float)
    return SourceSpace(np.array(d["positions"], dtype=float).reshape(-1, 3),
                       np.array(d["host_tetra"], dtype=np.int64),
                       float(d["spacing_mm"]) if d.get("spacing_mm") is not None else float("nan"), origin)


def write_peel(path, result: PeelResult) -> None:
    _dump(path, {
        **result.summary(),
        "kept_tetra": result.kept_tetra.tolist(),
        "removed_tetra": result.removed_tetra.tolist(),
        "surface_nodes": result.surface_nodes.tolist(),
    })


def read_peel(path) -> PeelResult:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return PeelResult(np.array(d["kept_tetra"], dtype=np.int64), np.array(d["removed_tetra"], dtype=np.int64),
                      np.array(d["surface_nodes"], dtype=np.int64), float(d["depth_mm"]))


def write_reconstruction(path, recon) -> None:
    _dump(path, recon.to_dict())
