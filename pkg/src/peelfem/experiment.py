"""Study orchestration: configuration, synthetic measurements, sweeps, reports."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial import cKDTree

from .exceptions import ConfigError, MeshError, NumericalError
from .forward import SensorArray, assemble_system, compose_leadfield, compute_transfer, fibonacci_sensors, \
    transfer_residuals
from .inverse import METHODS, DipoleScan, SLORETA
from .io import read_mesh, read_sensors
from .mesh import TetrahedralMesh, refine_compartments
from .metrics import REFERENCE_ERROR_STATS, ECCENTRICITY_BINS, ForwardComparison, describe, outlier_count, rdm_mag
from .peeling import PeelConfig, effective_depth, peel
from .sources import build_interpolation_pbo, enumerate_hdiv_dipoles, place_sources
from .sphere import ShellSpec, analytic_sphere_leadfield, generate_sphere_mesh

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
LAMBDA_RULE = "10**(-snr_db/10) * trace(L L^T) / n_sensors"
AMPLITUDE_POLICIES = ("unit_rms",)

# RNG substream tags
_DIRECTION = 0
_NOISE = 1
_COMPARE = 2


def _software_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# --- configuration ----------------------------------------------------------

@dataclass
class MeshSettings:
    file: str | None = None
    shell_radii_mm: list | None = None
    shell_conductivities: list | None = None
    edge_mm: float = 4.0


@dataclass
class RefineSettings:
    compartments: list = field(default_factory=list)
    rounds: int = 0


@dataclass
class SensorSettings:
    file: str | None = None
    count: int = 64
    z_min: float = -0.2


@dataclass
class CompareSettings:
    sources: int = 200
    max_eccentricity: float = 0.9
    pool: int = 2000
    self_compare: bool = False


@dataclass
class ExperimentConfig:
    """Validated experiment description; see ``ExperimentConfig.from_dict``."""

    mesh: MeshSettings = field(default_factory=MeshSettings)
    sensors: SensorSettings = field(default_factory=SensorSettings)
    refine: RefineSettings = field(default_factory=RefineSettings)
    active_compartments: list = field(default_factory=lambda: [1])
    peel_depths_mm: list = field(default_factory=lambda: [0.0])
    freeze_lattice: bool = True
    source_count: int = 500
    snr_db: list = field(default_factory=lambda: [5.0, 10.0, 15.0, 20.0, 25.0, 30.0])
    trials: int = 20
    noiseless: bool = False
    methods: list = field(default_factory=lambda: ["sloreta", "dipole_scan"])
    amplitude: str = "unit_rms"
    seed: int = 0
    sloreta_standardization: str = "block"
    dipole_scan_trunc_rtol: float = 1e-6
    solver_tol: float = 1e-9
    preconditioner: str = "jacobi"
    pbo_max_candidates: int = 30
    pbo_regularization: float = 1e-6
    dispersion_roi_mm: float = 30.0
    compare: CompareSettings = field(default_factory=CompareSettings)
    base_dir: str = field(default=".", repr=False)

    _SECTIONS = {"mesh": MeshSettings, "sensors": SensorSettings, "refine": RefineSettings,
                 "compare": CompareSettings}

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        data = dict(data)
        version = data.pop("config_version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {version!r}; expected {CONFIG_VERSION}")
        known = {f for f in cls.__dataclass_fields__ if not f.startswith("_") and f != "base_dir"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            section = cls._SECTIONS.get(key)
            if section is not None:
                if not isinstance(value, dict):
                    raise ConfigError(f"'{key}' must be a mapping")
                bad = sorted(set(value) - set(section.__dataclass_fields__))
                if bad:
                    raise ConfigError(f"unknown keys in '{key}': {', '.join(bad)}")
                value = section(**value)
            kwargs[key] = value
        cfg = cls(**kwargs, base_dir=str(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return {"config_version": CONFIG_VERSION, **d}

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def shell_spec(self) -> ShellSpec | None:
        m = self.mesh
        if m.shell_radii_mm is None:
            return None
        return ShellSpec(tuple(m.shell_radii_mm), tuple(m.shell_conductivities))

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        m = self.mesh
        need((m.file is None) != (m.shell_radii_mm is None), "mesh needs exactly one of 'file' or 'shell_radii_mm'")
        if m.shell_radii_mm is not None:
            need(m.shell_conductivities is not None, "mesh.shell_conductivities is required with shell_radii_mm")
            try:
                self.shell_spec()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid shell spec: {exc}") from exc
            need(np.isfinite(m.edge_mm) and m.edge_mm > 0, "mesh.edge_mm must be positive")
        need(self.refine.rounds >= 0, "refine.rounds must be >= 0")
        need(self.sensors.file is not None or self.sensors.count >= 1, "sensors.count must be >= 1")
        need(len(self.active_compartments) > 0, "active_compartments must be non-empty")
        need(len(self.peel_depths_mm) > 0, "peel_depths_mm must be non-empty")
        need(all(np.isfinite(d) and d >= 0 for d in self.peel_depths_mm), "peel depths must be finite and >= 0")
        need(self.source_count >= 1, "source_count must be >= 1")
        need(len(self.snr_db) > 0 and all(np.isfinite(s) for s in self.snr_db), "SNR values must be finite")
        need(self.trials >= 1, "trials must be >= 1")
        bad = [x for x in self.methods if x not in METHODS]
        need(not bad and self.methods, f"unknown methods: {bad}")
        need(self.amplitude in AMPLITUDE_POLICIES, f"amplitude policy must be one of {AMPLITUDE_POLICIES}")
        need(self.sloreta_standardization in ("block", "diagonal"), "sloreta_standardization: block or diagonal")
        need(0 <= self.dipole_scan_trunc_rtol < 1, "dipole_scan_trunc_rtol must lie in [0, 1)")
        need(self.solver_tol > 0, "solver_tol must be positive")
        need(self.preconditioner in ("jacobi", "amg"), "preconditioner must be jacobi or amg")
        need(self.dispersion_roi_mm > 0, "dispersion_roi_mm must be positive")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        c = self.compare
        need(c.sources >= 1 and c.pool >= c.sources, "compare.pool must be >= compare.sources >= 1")
        need(0 < c.max_eccentricity <= 1, "compare.max_eccentricity must lie in (0, 1]")


# --- synthetic measurements -------------------------------------------------

@dataclass(frozen=True, eq=False)
class SyntheticTrial:
    source_index: int
    position: np.ndarray
    direction: np.ndarray
    amplitude: float
    snr_db: float
    noise: np.ndarray
    measurement: np.ndarray
    substream: tuple = ()


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def source_direction(seed: int, source: int) -> np.ndarray:
    v = _rng(seed, _DIRECTION, source).standard_normal(3)
    return v / np.linalg.norm(v)


def noise_scale(snr_db: float) -> float:
    return 10.0 ** (-snr_db / 20.0)


def synthesize_measurement(L, source_index: int, d, snr_db: float, rng=None, *, noiseless: bool = False,
                           position=None, substream: tuple = ()) -> SyntheticTrial:
    """``M = a L_x d + 10**(-snr/20) N``, re-centred, with ``|a L_x d| = sqrt(n_sensors)``."""
    L = np.asarray(L, dtype=float)
    S = L.shape[0]
    if not 0 <= source_index < L.shape[1] // 3:
        raise IndexError(f"source index {source_index} out of range")
    d = np.asarray(d, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-12:
        raise ValueError("direction must be a unit vector")
    s = L[:, 3 * source_index:3 * source_index + 3] @ d
    ns = np.linalg.norm(s)
    if ns == 0:
        raise NumericalError(f"silent source {source_index}")
    a = np.sqrt(S) / ns
    if noiseless:
        noise = np.zeros(S)
    else:
        if rng is None:
            raise ValueError("an RNG is required unless noiseless")
        noise = rng.standard_normal(S)
    M = a * s + noise_scale(snr_db) * noise
    M = M - M.mean()
    pos = np.full(3, np.nan) if position is None else np.asarray(position, dtype=float)
    return SyntheticTrial(int(source_index), pos, d, float(a), float(snr_db), noise, M, tuple(substream))


# --- pipeline stages --------------------------------------------------------

@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside with the stage name, keeping their type."""
    try:
        yield
    except (ConfigError, MeshError, NumericalError, ValueError) as exc:
        if str(exc).startswith("["):
            raise
        raise type(exc)(f"[{name}] {exc}") from exc


@dataclass(eq=False)
class ForwardSetup:
    mesh: TetrahedralMesh
    sensors: SensorArray
    T: np.ndarray
    spec: ShellSpec | None
    max_residual: float


def build_mesh(cfg: ExperimentConfig) -> tuple[TetrahedralMesh, ShellSpec | None]:
    spec = cfg.shell_spec()
    with stage("mesh"):
        if spec is not None:
            mesh = generate_sphere_mesh(spec, cfg.mesh.edge_mm)
        else:
            path = cfg.resolve(cfg.mesh.file)
            if not path.exists():
                raise ConfigError(f"mesh file {path} does not exist")
            mesh = read_mesh(path)
    with stage("refine"):
        if cfg.refine.rounds and cfg.refine.compartments:
            mesh = refine_compartments(mesh, cfg.refine.compartments, cfg.refine.rounds)
    return mesh, spec


def build_sensors(cfg: ExperimentConfig, mesh: TetrahedralMesh, spec: ShellSpec | None) -> SensorArray:
    with stage("sensors"):
        if cfg.sensors.file is not None:
            path = cfg.resolve(cfg.sensors.file)
            if not path.exists():
                raise ConfigError(f"sensor file {path} does not exist")
            labels, pos = read_sensors(path)
            return SensorArray.attach(mesh, pos, labels)
        radius = spec.outer_radius if spec is not None else float(np.linalg.norm(mesh.nodes, axis=1).max())
        return SensorArray.attach(mesh, fibonacci_sensors(radius, cfg.sensors.count, cfg.sensors.z_min))


def build_forward(cfg: ExperimentConfig) -> ForwardSetup:
    mesh, spec = build_mesh(cfg)
    sensors = build_sensors(cfg, mesh, spec)
    with stage("transfer"):
        A = assemble_system(mesh)
        T = compute_transfer(A, sensors, tol=cfg.solver_tol, preconditioner=cfg.preconditioner,
                             boundary_nodes=mesh.boundary_nodes)
        res = float(transfer_residuals(A, T, sensors).max())
    log.info("transfer matrix %s, max relative residual %.2e", T.shape, res)
    return ForwardSetup(mesh, sensors, T, spec, res)


@dataclass(eq=False)
class DepthSetup:
    depth_mm: float
    sources: object
    L: np.ndarray
    effective_depth_mm: float
    n_kept_tetra: int


def build_depths(cfg: ExperimentConfig, fwd: ForwardSetup) -> list[DepthSetup]:
    out = []
    lattice = None
    for depth in sorted(cfg.peel_depths_mm):
        with stage(f"peel depth={depth}"):
            pr = peel(fwd.mesh, PeelConfig(depth, cfg.active_compartments))
            if pr.n_kept == 0:
                raise ValueError("peeled source space is empty")
        with stage(f"place depth={depth}"):
            if cfg.freeze_lattice and lattice is not None:
                src = place_sources(fwd.mesh, pr, cfg.source_count, spacing=lattice[0], origin=lattice[1])
            else:
                src = place_sources(fwd.mesh, pr, cfg.source_count)
                lattice = (src.spacing, src.origin)
            if len(src) == 0:
                raise ValueError("no source positions fall inside the kept elements")
        with stage(f"interpolate depth={depth}"):
            dip = enumerate_hdiv_dipoles(fwd.mesh, pr.kept_tetra)
            D = build_interpolation_pbo(fwd.mesh, dip, src, max_candidates=cfg.pbo_max_candidates,
                                        reg=cfg.pbo_regularization)
            L = compose_leadfield(fwd.T, D)
        eff, _ = effective_depth(fwd.mesh, pr)
        out.append(DepthSetup(float(depth), src, L, eff, pr.n_kept))
        log.info("depth %.3g mm: %d sources", depth, len(src))
    return out


# --- study ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def worker_count(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("LEADFIELD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"LEADFIELD_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _measurements(cfg, L, directions, depth_idx, snr_idx, snr, trial):
    """All sources' measurements for one (SNR, trial), one row per source."""
    S = L.shape[0]
    n = L.shape[1] // 3
    sig = np.einsum("snk,nk->ns", L.reshape(S, n, 3), directions)
    norms = np.linalg.norm(sig, axis=1)
    if np.any(norms == 0):
        raise NumericalError(f"silent source {int(np.argmax(norms == 0))}")
    M = sig * (np.sqrt(S) / norms)[:, None]
    if not cfg.noiseless:
        noise = np.stack([_rng(cfg.seed, _NOISE, depth_idx, i, trial, snr_idx).standard_normal(S)
                          for i in range(n)])
        M = M + noise_scale(snr) * noise
    return M - M.mean(axis=1, keepdims=True)


def _moments(est, M):
    if isinstance(est, SLORETA):
        return est._standardized(M).reshape(len(M), -1, 3)
    return np.einsum("nks,ms->mnk", est.filters_, M)


def _run_item(cfg, setup: DepthSetup, depth_idx, directions, neighbours, snr_idx, snr, method):
    if method == "sloreta":
        est = SLORETA(snr_db=snr, standardization=cfg.sloreta_standardization).fit(setup.L)
    else:
        est = DipoleScan(trunc_rtol=cfg.dipole_scan_trunc_rtol).fit(setup.L)
    pos = setup.sources.positions
    n = len(pos)
    loc_rows = []
    sd_sum = np.zeros(n)
    sd_deg = np.zeros(n, dtype=np.int64)
    for trial in range(cfg.trials):
        M = _measurements(cfg, setup.L, directions, depth_idx, snr_idx, snr, trial)
        I = est.predict(M)
        raw = np.linalg.norm(pos[I] - pos, axis=1)
        scaled = raw / np.sqrt(3.0)
        P2 = (_moments(est, M) ** 2).sum(axis=2)
        for i in range(n):
            loc_rows.append((i, snr, setup.depth_mm, method, trial, scaled[i], raw[i]))
            nb, dist = neighbours[i]
            w = P2[i, nb]
            tot = w.sum()
            if tot > 0:
                sd_sum[i] += np.sqrt((dist**2 * w).sum() / tot)
            else:
                sd_deg[i] += 1
    disp_rows = [(i, method, snr, setup.depth_mm, sd_sum[i] / cfg.trials, int(sd_deg[i])) for i in range(n)]
    params = {"lambda": est.lambda_} if method == "sloreta" else {}
    return loc_rows, disp_rows, params


@dataclass
class StudyReport:
    out_dir: Path
    summary: list
    manifest: dict


LOCALISATION_HEADER = ("source_id", "snr_db", "depth_mm", "method", "trial", "delta_mm_scaled", "delta_mm_raw")
DISPERSION_HEADER = ("source_id", "method", "snr_db", "depth_mm", "sd_mm", "degenerate_trials")
SUMMARY_HEADER = ("method", "snr_db", "depth_mm", "n", "mu", "sigma", "outliers", "ref_mu", "ref_sigma",
                  "mu_raw", "sigma_raw")


def summarize(loc_rows) -> list[tuple]:
    """Per (method, SNR, depth) statistics recomputed from localisation rows."""
    groups: dict = {}
    for r in loc_rows:
        groups.setdefault((r[3], r[1], r[2]), []).append((r[5], r[6]))
    out = []
    for (method, snr, depth), vals in groups.items():
        v = np.array(vals)
        n, mu, sd = describe(v[:, 0])
        _, mu_raw, sd_raw = describe(v[:, 1])
        ref = REFERENCE_ERROR_STATS.get(int(snr)) if float(snr).is_integer() else None
        count = outlier_count(v[:, 0], *ref) if ref else ""
        out.append((method, snr, depth, n, mu, sd, count, ref[0] if ref else "", ref[1] if ref else "",
                    mu_raw, sd_raw))
    return out


def run_study(cfg: ExperimentConfig, out_dir, *, threads: int | None = None,
              forward: ForwardSetup | None = None) -> StudyReport:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fwd = forward if forward is not None else build_forward(cfg)
    depths = build_depths(cfg, fwd)

    items = []
    prepared = []
    for di, setup in enumerate(depths):
        n = len(setup.sources)
        directions = np.stack([source_direction(cfg.seed, i) for i in range(n)])
        tree = cKDTree(setup.sources.positions)
        neighbours = []
        for i, nb in enumerate(tree.query_ball_point(setup.sources.positions, cfg.dispersion_roi_mm)):
            nb = np.array(sorted(nb), dtype=np.int64)
            neighbours.append((nb, np.linalg.norm(setup.sources.positions[nb] - setup.sources.positions[i], axis=1)))
        prepared.append((directions, neighbours))
        for si, snr in enumerate(cfg.snr_db):
            for method in cfg.methods:
                items.append((di, si, float(snr), method))

    def work(item):
        di, si, snr, method = item
        with stage(f"invert depth={depths[di].depth_mm} snr={snr} method={method}"):
            return _run_item(cfg, depths[di], di, *prepared[di], si, snr, method)

    with ThreadPoolExecutor(max_workers=worker_count(threads)) as pool:
        results = list(pool.map(work, items))

    loc_rows = [r for res in results for r in res[0]]
    disp_rows = [r for res in results for r in res[1]]
    summary = summarize(loc_rows)
    _write_csv(out_dir / "localisation.csv", LOCALISATION_HEADER, loc_rows)
    _write_csv(out_dir / "dispersion.csv", DISPERSION_HEADER, disp_rows)
    _write_csv(out_dir / "summary.csv", SUMMARY_HEADER, summary)

    lambdas = {f"{depths[di].depth_mm}:{snr}": res[2]["lambda"]
               for (di, _, snr, method), res in zip(items, results) if method == "sloreta"}
    manifest = {
        "software": {"package": "artifact", "version": _software_version()},
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "decisions": {
            "lambda_rule": LAMBDA_RULE,
            "lambda_values": lambdas,
            "sloreta_standardization": cfg.sloreta_standardization,
            "dipole_scan_trunc_rtol": cfg.dipole_scan_trunc_rtol,
            "amplitude_policy": "a = sqrt(n_sensors) / |L_x d| (unit RMS signal)",
            "measurement_recentred_after_noise": True,
            "directions": "fixed per source across trials and SNRs",
            "rng": "SeedSequence(seed, spawn_key=(1, depth, source, trial, snr)) per noise draw",
            "solver": {"tol": cfg.solver_tol, "preconditioner": cfg.preconditioner,
                       "max_transfer_residual": fwd.max_residual},
            "pbo": {"max_candidates": cfg.pbo_max_candidates, "regularization": cfg.pbo_regularization},
            "localisation_error": "delta_mm_scaled = |x_true - x_I| / sqrt(3); delta_mm_raw unscaled",
            "outliers": "count of delta_mm_scaled > mu_ref + 2 sigma_ref",
        },
        "mesh": {"nodes": fwd.mesh.n_nodes, "tetra": fwd.mesh.n_tetra, "sensors": len(fwd.sensors)},
        "depths": [{"depth_mm": s.depth_mm, "sources": len(s.sources), "spacing_mm": s.sources.spacing,
                    "kept_tetra": s.n_kept_tetra, "effective_depth_mm": s.effective_depth_mm} for s in depths],
        "outputs": ["localisation.csv", "dispersion.csv", "summary.csv"],
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return StudyReport(out_dir, summary, manifest)


# --- analytic comparison ----------------------------------------------------

def compare_forward(cfg: ExperimentConfig, out_dir=None, *, forward: ForwardSetup | None = None
                    ) -> ForwardComparison:
    """Per-source RDM and MAG of the FEM lead field against the analytic sphere."""
    spec = cfg.shell_spec()
    if spec is None:
        raise ConfigError("analytic comparison requires shell spec")
    if len(spec.radii) != 3:
        raise ConfigError("analytic comparison requires a 3-shell sphere")
    fwd = forward if forward is not None else build_forward(cfg)
    depth = min(cfg.peel_depths_mm)
    with stage("compare sources"):
        pr = peel(fwd.mesh, PeelConfig(depth, cfg.active_compartments))
        pool = place_sources(fwd.mesh, pr, cfg.compare.pool)
        ecc = np.linalg.norm(pool.positions, axis=1) / spec.radii[0]
        eligible = np.flatnonzero(ecc <= cfg.compare.max_eccentricity)
        if len(eligible) < cfg.compare.sources:
            raise ValueError(f"only {len(eligible)} positions within eccentricity {cfg.compare.max_eccentricity}")
        pick = np.sort(_rng(cfg.seed, _COMPARE).choice(eligible, cfg.compare.sources, replace=False))
        src = pool.subset(pick)
    with stage("compare lead fields"):
        L_a = analytic_sphere_leadfield(spec, fwd.sensors.positions, src)
        if cfg.compare.self_compare:
            L_n = L_a
        else:
            dip = enumerate_hdiv_dipoles(fwd.mesh, pr.kept_tetra)
            D = build_interpolation_pbo(fwd.mesh, dip, src, max_candidates=cfg.pbo_max_candidates,
                                        reg=cfg.pbo_regularization)
            L_n = compose_leadfield(fwd.T, D)
        cmp = rdm_mag(L_n, L_a, ecc[pick])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "rdm_mag.csv", ("source_id", "eccentricity", "rdm", "mag"),
                   zip(range(len(src)), cmp.eccentricity, cmp.rdm, cmp.mag))
        bins = cmp.binned(ECCENTRICITY_BINS)
        _write_csv(out_dir / "rdm_mag_bins.csv", tuple(bins[0]), (tuple(b.values()) for b in bins))
        med_rdm, med_mag = cmp.medians()
        manifest = {
            "software": {"package": "artifact", "version": _software_version()},
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "median_rdm": med_rdm,
            "median_mag": med_mag,
            "max_transfer_residual": fwd.max_residual,
            "mesh": {"nodes": fwd.mesh.n_nodes, "tetra": fwd.mesh.n_tetra, "sensors": len(fwd.sensors)},
        }
        with open(out_dir / "compare_manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return cmp
