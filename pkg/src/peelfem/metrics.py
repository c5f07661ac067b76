"""Forward-accuracy and localisation measures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Reference (mu, sigma) localisation errors in mm per SNR in dB.
REFERENCE_ERROR_STATS = {
    5: (10.3, 5.3),
    10: (10.4, 5.4),
    15: (10.3, 4.6),
    20: (10.6, 4.1),
    25: (10.2, 3.7),
    30: (9.8, 3.6),
}

ECCENTRICITY_BINS = (0.0, 0.5, 0.7, 0.8, 0.9, 0.95, 0.98, 1.0)


@dataclass(frozen=True, eq=False)
class ForwardComparison:
    rdm: np.ndarray
    mag: np.ndarray
    eccentricity: np.ndarray | None = None

    def medians(self, max_eccentricity: float | None = None) -> tuple[float, float]:
        sel = np.ones(len(self.rdm), dtype=bool)
        if max_eccentricity is not None:
            sel = self.eccentricity <= max_eccentricity
        return float(np.median(self.rdm[sel])), float(np.median(self.mag[sel]))

    def binned(self, edges=ECCENTRICITY_BINS) -> list[dict]:
        """Median, quartiles and count of RDM and MAG per eccentricity bin."""
        out = []
        e = self.eccentricity
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = (e >= lo) & (e < hi) if hi < edges[-1] else (e >= lo) & (e <= hi)
            row = {"ecc_lo": lo, "ecc_hi": hi, "n": int(sel.sum())}
            for name, v in (("rdm", self.rdm), ("mag", self.mag)):
                q = np.percentile(v[sel], [25, 50, 75]) if sel.any() else [np.nan] * 3
                row.update({f"{name}_q25": q[0], f"{name}_median": q[1], f"{name}_q75": q[2]})
            out.append(row)
        return out


def rdm_mag(L_n, L_a, eccentricity=None) -> ForwardComparison:
    """Per-source RDM and MAG between a numerical and a reference lead field.

    Source ``i`` is the sensor-stacked block of columns ``3i..3i+2``.
    """
    L_n = np.asarray(L_n, dtype=float)
    L_a = np.asarray(L_a, dtype=float)
    if L_n.shape != L_a.shape:
        raise ValueError(f"shape mismatch {L_n.shape} vs {L_a.shape}")
    if L_n.shape[1] % 3:
        raise ValueError("lead field must have 3 columns per source")
    n = L_n.shape[1] // 3

    def blocks(L):
        return L.reshape(L.shape[0], n, 3).transpose(1, 0, 2).reshape(n, -1)

    vn, va = blocks(L_n), blocks(L_a)
    nn = np.linalg.norm(vn, axis=1)
    na = np.linalg.norm(va, axis=1)
    for name, norms in (("numerical", nn), ("reference", na)):
        zero = np.flatnonzero(norms == 0)
        if len(zero):
            raise ValueError(f"source {int(zero[0])} has a zero {name} lead-field block")
    rdm = np.linalg.norm(vn / nn[:, None] - va / na[:, None], axis=1)
    mag = np.abs(1.0 - na / nn)
    ecc = None if eccentricity is None else np.asarray(eccentricity, dtype=float)
    return ForwardComparison(rdm, mag, ecc)


def localisation_error(true_pos, estimated_pos) -> tuple[float, float]:
    """``(scaled, raw)`` distance; the scaled value divides by sqrt(3)."""
    raw = float(np.linalg.norm(np.asarray(true_pos, float) - np.asarray(estimated_pos, float)))
    return raw / np.sqrt(3.0), raw


def spatial_dispersion(moments, positions, center_index: int, roi_mm: float) -> tuple[float, bool]:
    """Moment-weighted RMS distance to source ``center_index`` within ``roi_mm``.

    Returns ``(sd, degenerate)``; ``degenerate`` is set, with ``sd = 0``, when
    every moment inside the ROI vanishes.
    """
    if not roi_mm > 0:
        raise ValueError("roi_mm must be positive")
    positions = np.asarray(positions, dtype=float)
    d = np.linalg.norm(positions - positions[center_index], axis=1)
    inside = d <= roi_mm
    p2 = (np.asarray(moments, dtype=float)[inside] ** 2).sum(axis=1)
    total = p2.sum()
    if total == 0:
        return 0.0, True
    return float(np.sqrt((d[inside] ** 2 * p2).sum() / total)), False


def outlier_count(deltas, mu_ref: float, sigma_ref: float) -> int:
    """Number of errors strictly above ``mu_ref + 2 sigma_ref``."""
    if sigma_ref < 0:
        raise ValueError("sigma_ref must be non-negative")
    return int(np.count_nonzero(np.asarray(deltas, dtype=float) > mu_ref + 2.0 * sigma_ref))


def describe(deltas) -> tuple[int, float, float]:
    """``(n, mean, sample standard deviation)``; the deviation is NaN for n < 2."""
    x = np.asarray(deltas, dtype=float)
    n = len(x)
    mu = float(x.mean()) if n else float("nan")
    sd = float(x.std(ddof=1)) if n > 1 else float("nan")
    return n, mu, sd
