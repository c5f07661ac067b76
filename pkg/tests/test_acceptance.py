"""End-to-end acceptance criteria. Each test records one PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest

from peelfem.cli import main
from peelfem.experiment import (ExperimentConfig, _measurements, build_depths, build_forward, compare_forward,
                                run_study)
from peelfem.forward import SensorArray, assemble_system, compose_leadfield, compute_transfer, transfer_residuals
from peelfem.inverse import SLORETA, DipoleScan
from peelfem.mesh import extract_surface, refine_compartments
from peelfem.metrics import REFERENCE_ERROR_STATS, outlier_count, rdm_mag, spatial_dispersion
from peelfem.peeling import PeelConfig, peel, peel_exhaustive
from peelfem.sources import build_interpolation_pbo, enumerate_hdiv_dipoles, sources_at
from peelfem.sphere import ShellSpec, generate_sphere_mesh

from conftest import ACCEPTANCE_LINES, cube_mesh

DATA = Path(__file__).parent / "data"


def record(n, ok, detail):
    ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    return ok


@pytest.fixture(scope="module")
def desk():
    cfg = ExperimentConfig.from_yaml(DATA / "desk_study.yaml")
    fwd = build_forward(cfg)
    return cfg, fwd


@pytest.mark.slow
def test_1_analytic_sphere_accuracy(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "config_version": 1,
        "mesh": {"shell_radii_mm": [87, 92, 100], "shell_conductivities": [0.33, 0.33 / 80, 0.33], "edge_mm": 4},
        "refine": {"compartments": [2], "rounds": 1},
        "sensors": {"count": 64, "z_min": -0.2},
        "active_compartments": [1],
        "peel_depths_mm": [0.0],
        "compare": {"sources": 200, "max_eccentricity": 0.9, "pool": 2000},
    })
    t0 = time.perf_counter()
    cmp = compare_forward(cfg, tmp_path)
    elapsed = time.perf_counter() - t0
    rdm, mag = cmp.medians()
    ok = rdm <= 0.04 and mag <= 0.08 and elapsed <= 600 and len(cmp.rdm) == 200
    record(1, ok, f"median RDM {rdm:.4f} (<= 0.04), median MAG {mag:.4f} (<= 0.08), "
                  f"{len(cmp.rdm)} sources, max ecc {cmp.eccentricity.max():.3f}, {elapsed:.0f} s")
    assert ok


def test_2_central_dipole_closed_form():
    R, sigma = 100.0, 0.33
    mesh = generate_sphere_mesh(ShellSpec((R,), (sigma,)), 4.0)
    # 32 points on the cap z >= 0.2 R and their mirror images: the montage
    # avoids the nodal line of cos(theta), where a relative error has no
    # meaning, and its symmetry makes the sensor mean of the exact potential zero.
    i = np.arange(32) + 0.5
    z = 1 - 0.8 * i / 32
    r = np.sqrt(1 - z * z)
    phi = np.pi * (3 - np.sqrt(5)) * i
    up = R * np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)
    sensors = SensorArray.attach(mesh, np.vstack([up, -up]))
    T = compute_transfer(assemble_system(mesh), sensors)
    pr = peel(mesh, PeelConfig(0.0, [1]))
    src = sources_at(mesh, pr.kept_tetra, [[0.0, 0.0, 0.0]])
    D = build_interpolation_pbo(mesh, enumerate_hdiv_dipoles(mesh, pr.kept_tetra), src)
    u = compose_leadfield(T, D)[:, 2]
    p = mesh.nodes[sensors.nodes]
    cos_t = p[:, 2] / np.linalg.norm(p, axis=1)
    exact = 3 * cos_t / (4 * np.pi * sigma * R**2)
    exact -= exact.mean()
    rel = np.abs(u - exact) / np.abs(exact)
    ok = rel.max() <= 0.05
    record(2, ok, f"max per-sensor relative error {rel.max():.4f} (<= 0.05), median {np.median(rel):.4f}, "
                  f"{len(rel)} sensors")
    assert ok


@pytest.mark.slow
def test_3_zero_noise_exact_localisation(desk):
    cfg, fwd = desk
    setup = build_depths(cfg, fwd)[0]
    L = setup.L
    n = L.shape[1] // 3
    rng = np.random.default_rng(2024)
    picks = np.sort(rng.choice(n, 100, replace=False))
    dirs = rng.normal(size=(100, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    M = np.stack([L[:, 3 * i:3 * i + 3] @ d for i, d in zip(picks, dirs)])
    M *= np.sqrt(L.shape[0]) / np.linalg.norm(M, axis=1, keepdims=True)
    M -= M.mean(axis=1, keepdims=True)

    ds = DipoleScan().fit(L)
    rrv = ds.residual_variance(M)
    rrv_true = rrv[np.arange(100), picks]
    ds_hits = int((ds.predict(M) == picks).sum())
    pos = setup.sources.positions
    ds_delta = np.linalg.norm(pos[ds.predict(M)] - pos[picks], axis=1)

    sl = SLORETA(snr_db=cfg.snr_db[-1], standardization=cfg.sloreta_standardization).fit(L)
    scores = sl.transform(M)
    sl_pred = scores.argmax(axis=1)
    misses = np.flatnonzero(sl_pred != picks)
    margins = [(int(picks[k]), float(scores[k, sl_pred[k]] - scores[k, picks[k]])) for k in misses]
    sl_hits = 100 - len(misses)

    ok = rrv_true.max() <= 1e-10 and ds_hits == 100 and np.all(ds_delta == 0) and sl_hits >= 98
    detail = (f"Dipole Scan {ds_hits}/100 exact, max RRV at truth {rrv_true.max():.1e} (<= 1e-10); "
              f"sLORETA {sl_hits}/100 (>= 98) on {n} sources")
    if margins:
        detail += f"; sLORETA misses (source, score margin): {margins}"
    record(3, ok, detail)
    assert ok


@pytest.mark.slow
def test_4_noise_scaling_monotonicity(desk, tmp_path):
    cfg, fwd = desk
    report = run_study(cfg, tmp_path, forward=fwd)
    mu = {(r[0], r[2], r[1]): r[4] for r in report.summary}
    snrs = sorted(cfg.snr_db)
    problems = []
    parts = []
    for depth in sorted(cfg.peel_depths_mm):
        sl = [mu[("sloreta", float(depth), float(s))] for s in snrs]
        dsc = [mu[("dipole_scan", float(depth), float(s))] for s in snrs]
        for name, seq in (("sLORETA", sl), ("Dipole Scan", dsc)):
            if not all(b < a for a, b in zip(seq, seq[1:])):
                problems.append(f"{name} not strictly decreasing at depth {depth}")
        if not all(d < s for d, s in zip(dsc, sl)):
            problems.append(f"Dipole Scan not below sLORETA at depth {depth}")
        parts.append(f"depth {depth}: sLORETA " + " > ".join(f"{v:.2f}" for v in sl)
                     + "; Dipole Scan " + " > ".join(f"{v:.3f}" for v in dsc))
    counts = ", ".join(f"{d['sources']}" for d in report.manifest["depths"])
    ok = not problems
    record(4, ok, f"mean scaled error over SNR {snrs[0]:g}..{snrs[-1]:g} dB, sources per depth {counts}, "
                  f"{cfg.trials} trials; " + " | ".join(parts) + ("" if ok else "; " + "; ".join(problems)))
    assert ok


def _peel_meshes():
    def shell(c):
        return 2 if np.linalg.norm(c - 3.0) < 1.6 else 1
    meshes = {
        "cube 6^3": cube_mesh(6, 1.0),
        "cube with core": cube_mesh(6, 1.0, shell, {1: 1.0, 2: 0.2}),
        "scaled cube 0.5 mm": cube_mesh(8, 0.5),
        "sphere r=10 h=2.5": generate_sphere_mesh(ShellSpec((10.0,), (0.33,)), 2.5),
        "3-shell r=10 h=2.5": generate_sphere_mesh(ShellSpec((6.0, 8.0, 10.0), (0.33, 0.01, 0.33)), 2.5),
    }
    meshes["refined cube core"] = refine_compartments(meshes["cube with core"], [2], 1)
    return meshes


def test_5_peeling_correctness():
    failures = []
    checked = 0
    for name, mesh in _peel_meshes().items():
        assert mesh.n_tetra <= 5000, (name, mesh.n_tetra)
        comps_list = [[1]] + ([[2], [1, 2]] if len(np.unique(mesh.labels)) > 1 else [])
        for comps in comps_list:
            surf = extract_surface(mesh, comps).surface_node_set
            kept = {}
            for depth in (0.0, 0.5, 1.0, 1.5, 2.75):
                cfg = PeelConfig(depth, comps)
                a, b = peel(mesh, cfg), peel_exhaustive(mesh, cfg)
                checked += 1
                if not (np.array_equal(a.kept_tetra, b.kept_tetra)
                        and np.array_equal(a.removed_tetra, b.removed_tetra)):
                    failures.append(f"{name} {comps} d={depth}: grid != exhaustive")
                kept[depth] = set(a.kept_tetra.tolist())
            if not (kept[1.0] <= kept[0.5] <= kept[0.0]):
                failures.append(f"{name} {comps}: not monotone")
            touching = np.isin(mesh.tetra[list(kept[0.0])], surf).any() if kept[0.0] else False
            if touching:
                failures.append(f"{name} {comps}: kept tetra touches the surface at d=0")
    ok = not failures
    record(5, ok, f"{checked} (mesh, compartments, depth) cases: grid == exhaustive, nested kept sets, "
                  f"one-layer rule at d=0" + ("" if ok else "; " + "; ".join(failures)))
    assert ok


def test_6_fem_invariants():
    meshes = {
        "cube 4^3": cube_mesh(4, 1.0, lambda c: 2 if c[2] > 2 else 1, {1: 1.0, 2: 0.0125}),
        "sphere r=10 h=3.5": generate_sphere_mesh(ShellSpec((6.0, 8.0, 10.0), (0.33, 0.004125, 0.33)), 3.5),
    }
    lines = []
    ok = True
    for name, mesh in meshes.items():
        assert mesh.n_nodes <= 500, (name, mesh.n_nodes)
        A = assemble_system(mesh)
        Ad = A.toarray()
        scale = np.abs(Ad).max()
        sym = np.abs(Ad - Ad.T).max() / scale
        null = np.linalg.norm(A @ np.ones(mesh.n_nodes)) / np.abs(Ad).sum(axis=1).max()
        wmin = np.linalg.eigvalsh(Ad)[0] / scale
        b = mesh.boundary_nodes
        sensors = SensorArray(mesh.nodes[b], b, [f"S{k}" for k in range(len(b))])
        T = compute_transfer(A, sensors, boundary_nodes=b)
        res = transfer_residuals(A, T, sensors).max()
        good = sym <= 1e-12 and null <= 1e-10 and wmin >= -1e-12 and res <= 1e-9
        ok &= good
        lines.append(f"{name} ({mesh.n_nodes} nodes): asym {sym:.1e}, |A1| {null:.1e}, min eig {wmin:.1e}, "
                     f"max transfer residual {res:.1e} over {len(b)} rows")
    record(6, ok, "; ".join(lines))
    assert ok


def test_7_noise_generator():
    cfg = ExperimentConfig.from_dict({"config_version": 1, "mesh": {"file": "unused.tet"}, "seed": 11})
    S, n = 64, 1563  # 100032 samples
    rng = np.random.default_rng(0)
    L = rng.normal(size=(S, 3 * n))
    L -= L.mean(axis=0)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    clean = _measurements(ExperimentConfig.from_dict({**cfg.to_dict(), "noiseless": True}), L, dirs, 0, 3, 20.0, 0)
    noisy = _measurements(cfg, L, dirs, 0, 3, 20.0, 0)
    term = (noisy - clean).ravel()
    # Re-centring removes one degree of freedom per measurement.
    sd = term.std() * np.sqrt(S / (S - 1))
    ok = abs(sd - 0.1) <= 0.002 and term.size >= 100000
    record(7, ok, f"noise std at 20 dB {sd:.5f} over {term.size} samples (0.1 +- 2%)")
    assert ok


def test_8_metric_identities():
    rng = np.random.default_rng(8)
    L = rng.normal(size=(16, 30))
    same = rdm_mag(L, L)
    double = rdm_mag(2 * L, L)
    Ln, La = np.zeros((4, 3)), np.zeros((4, 3))
    Ln[0, 0], La[1, 1] = 3.0, 3.0
    perp = rdm_mag(Ln, La)
    e1 = max(np.abs(same.rdm).max(), np.abs(same.mag).max())
    e2 = max(np.abs(double.rdm).max(), np.abs(double.mag - 0.5).max())
    e3 = max(abs(perp.rdm[0] - np.sqrt(2)), perp.mag[0])
    r = 12.5
    sd, _ = spatial_dispersion(np.array([[0, 0, 1.0], [0, 1.0, 0]]), np.array([[0, 0, 0], [r, 0, 0.0]]), 0, 30)
    e4 = abs(sd - r / np.sqrt(2))
    # Hand counts: threshold mu + 2 sigma per SNR row of the reference table.
    deltas = [5.0, 18.5, 19.0, 19.6, 20.9, 21.0, 25.0]
    hand = {5: 2, 10: 1, 15: 4, 20: 5, 25: 6, 30: 6}  # thresholds 20.9, 21.2, 19.5, 18.8, 17.6, 17.0
    counts = {snr: outlier_count(deltas, *REFERENCE_ERROR_STATS[snr]) for snr in hand}
    ok = max(e1, e2, e3, e4) <= 1e-12 and counts == hand
    record(8, ok, f"RDM/MAG identity err {e1:.1e}, doubling err {e2:.1e}, orthogonal err {e3:.1e}, "
                  f"two-point SD err {e4:.1e}; outlier counts {counts} vs hand {hand}")
    assert ok


def test_9_determinism(tmp_path, monkeypatch):
    cfg = DATA / "small_study.yaml"
    outs = []
    for k, threads in enumerate(("1", "3", None)):
        out = tmp_path / f"run{k}"
        args = ["study", "--config", str(cfg), "--out", str(out)]
        if threads:
            args += ["--threads", threads]
        else:
            monkeypatch.setenv("LEADFIELD_THREADS", "8")
        assert main(args) == 0
        outs.append(out)
    names = ("localisation.csv", "dispersion.csv", "summary.csv")
    same = all((outs[0] / f).read_bytes() == (o / f).read_bytes() for o in outs[1:] for f in names)
    rows = sum(1 for _ in open(outs[0] / "localisation.csv")) - 1
    record(9, same, f"3 runs (threads 1, 3, LEADFIELD_THREADS=8): {len(names)} CSVs byte-identical, "
                    f"{rows} localisation rows")
    assert same
