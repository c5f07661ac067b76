"""sLORETA and Dipole Scan as scikit-learn style estimators.

Both estimators are fitted on a lead field ``L`` (n_sensors, 3 * n_sources)
and then applied to measurements. ``transform`` maps measurement rows
(n_samples, n_sensors) to per-source scores, ``predict`` returns the index of
the best-scoring source (lowest index on ties) and ``reconstruct`` returns a
full :class:`Reconstruction` for a single measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import NumericalError

STANDARDIZATION_EPS = 1e-30


@dataclass(frozen=True, eq=False)
class Measurement:
    """Sensor potentials, optionally re-referenced to zero mean."""

    values: np.ndarray
    mean_free: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if self.mean_free:
            scale = max(float(np.abs(v).max(initial=0.0)), np.finfo(float).tiny)
            if abs(v.mean()) > 1e-12 * scale:
                raise ValueError("measurement flagged mean-free has non-zero mean")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def centered(cls, values) -> "Measurement":
        v = np.asarray(values, dtype=float).reshape(-1)
        return cls(v - v.mean(), True)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class Reconstruction:
    moments: np.ndarray  # (n_sources, 3)
    scores: np.ndarray  # (n_sources,)
    method: str
    params: dict = field(default_factory=dict)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.scores))

    def to_dict(self) -> dict:
        i = self.argmax
        return {
            "method": self.method,
            **self.params,
            "scores": self.scores.tolist(),
            "argmax": i,
            "moment": self.moments[i].tolist(),
        }


def _measurement_rows(M, n_sensors: int) -> np.ndarray:
    if isinstance(M, Measurement):
        M = M.values
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[None, :]
    M = check_array(M)
    if M.shape[1] != n_sensors:
        raise ValueError(f"measurement has {M.shape[1]} sensors, lead field has {n_sensors}")
    return M


def _check_leadfield(L) -> np.ndarray:
    L = check_array(L, ensure_min_samples=1)
    if L.shape[1] % 3:
        raise ValueError("lead field must have 3 columns per source")
    return L


class SLORETA(TransformerMixin, BaseEstimator):
    """Standardized low-resolution tomography.

    ``lambda = 10**(-snr_db/10) * trace(L L^T) / n_sensors``. The regularized
    solution ``J = L^T (L L^T + lambda I)^-1 M`` is standardized with the
    resolution matrix ``R = L^T (L L^T + lambda I)^-1 L``:

    * ``standardization="block"`` multiplies each source triplet by the
      inverse square root of its 3x3 diagonal block of ``R``;
    * ``standardization="diagonal"`` divides each entry of ``J`` by the square
      root of the matching diagonal entry of ``R``.

    A source's score is the norm of its standardized triplet. Only the block
    form is invariant to rotating the Cartesian frame, and only it localizes a
    noiseless single source exactly.
    """

    def __init__(self, snr_db: float = 20.0, standardization: str = "block"):
        self.snr_db = snr_db
        self.standardization = standardization

    def fit(self, L, y=None):
        if self.standardization not in ("block", "diagonal"):
            raise ValueError(f"unknown standardization {self.standardization!r}")
        L = _check_leadfield(L)
        S = L.shape[0]
        gram = L @ L.T
        lam = 10.0 ** (-float(self.snr_db) / 10.0) * np.trace(gram) / S
        if not np.isfinite(lam) or lam <= 0:
            raise ValueError(f"regularization parameter must be positive and finite, got {lam}")
        G = gram + lam * np.eye(S)
        try:
            cf = sla.cho_factor(G, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"sLORETA Gram matrix factorization failed: {exc}") from exc
        GiL = sla.cho_solve(cf, L)  # (S, 3n)
        self.lambda_ = float(lam)
        self.kernel_ = GiL.T  # L^T G^-1
        self.resolution_diag_ = np.einsum("ij,ij->j", L, GiL)
        n = L.shape[1] // 3
        if self.standardization == "block":
            Lb = L.reshape(S, n, 3).transpose(1, 0, 2)
            Gb = GiL.reshape(S, n, 3).transpose(1, 0, 2)
            R = np.einsum("nsa,nsb->nab", Lb, Gb)
            R = 0.5 * (R + R.transpose(0, 2, 1))
            w, V = np.linalg.eigh(R)
            ok = w > np.maximum(1e-12 * w[:, -1:], STANDARDIZATION_EPS)
            inv_sqrt = np.where(ok, 1.0 / np.sqrt(np.where(ok, w, 1.0)), 0.0)
            self.standardizer_ = np.einsum("nar,nr,nbr->nab", V, inv_sqrt, V)
        self.n_sensors_ = S
        self.n_sources_ = n
        return self

    def _standardized(self, M):
        check_is_fitted(self, "kernel_")
        M = _measurement_rows(M, self.n_sensors_)
        J = M @ self.kernel_.T
        if self.standardization == "block":
            J = J.reshape(len(J), -1, 3)
            return np.einsum("nab,knb->kna", self.standardizer_, J).reshape(len(J), -1)
        return J / np.sqrt(np.maximum(self.resolution_diag_, STANDARDIZATION_EPS))

    def transform(self, M):
        s = self._standardized(M)
        return np.linalg.norm(s.reshape(len(s), -1, 3), axis=2)

    def predict(self, M):
        return np.argmax(self.transform(M), axis=1)

    def reconstruct(self, M) -> Reconstruction:
        s = self._standardized(M)
        if len(s) != 1:
            raise ValueError("reconstruct expects a single measurement")
        moments = s[0].reshape(-1, 3)
        return Reconstruction(moments, np.linalg.norm(moments, axis=1), "sloreta",
                              {"snr_db": float(self.snr_db), "lambda": self.lambda_,
                               "standardization": self.standardization})


class DipoleScan(TransformerMixin, BaseEstimator):
    """Single-dipole scan scored by goodness of fit ``1 - RRV``.

    Each source's three columns are pseudo-inverted by truncated SVD,
    dropping singular values below ``trunc_rtol`` times the largest one.
    """

    def __init__(self, trunc_rtol: float = 1e-6):
        self.trunc_rtol = trunc_rtol

    def fit(self, L, y=None):
        if not 0 <= self.trunc_rtol < 1:
            raise ValueError("trunc_rtol must lie in [0, 1)")
        L = _check_leadfield(L)
        S, n = L.shape[0], L.shape[1] // 3
        blocks = L.reshape(S, n, 3).transpose(1, 0, 2)  # (n, S, 3)
        U, sv, Vt = np.linalg.svd(blocks, full_matrices=False)
        keep = sv >= self.trunc_rtol * sv[:, :1]
        keep &= sv > 0
        inv = np.where(keep, 1.0 / np.where(keep, sv, 1.0), 0.0)
        self.basis_ = U * keep[:, None, :]  # dropped directions zeroed
        # W = V diag(1/s) U^T restricted to kept singular values.
        self.filters_ = np.einsum("nkr,nr,nsr->nks", Vt.transpose(0, 2, 1), inv, U)
        self.rank_ = keep.sum(axis=1)
        self.n_sensors_ = S
        self.n_sources_ = n
        return self

    def residual_variance(self, M) -> np.ndarray:
        """RRV (n_samples, n_sources) from the explicit residual ``M - L_x W M``."""
        check_is_fitted(self, "basis_")
        M = _measurement_rows(M, self.n_sensors_)
        out = np.empty((len(M), self.n_sources_))
        for k, m in enumerate(M):
            mm = float(m @ m)
            if mm == 0.0:
                raise ValueError("RRV undefined for zero measurement")
            coef = np.einsum("nsr,s->nr", self.basis_, m)
            res = m[None, :] - np.einsum("nsr,nr->ns", self.basis_, coef)
            out[k] = np.einsum("ns,ns->n", res, res) / mm
        return np.clip(out, 0.0, 1.0)

    def transform(self, M):
        return 1.0 - self.residual_variance(M)

    def predict(self, M):
        return np.argmax(self.transform(M), axis=1)

    def reconstruct(self, M) -> Reconstruction:
        rrv = self.residual_variance(M)
        if len(rrv) != 1:
            raise ValueError("reconstruct expects a single measurement")
        m = _measurement_rows(M, self.n_sensors_)[0]
        moments = np.einsum("nks,s->nk", self.filters_, m)
        return Reconstruction(moments, 1.0 - rrv[0], "dipole_scan",
                              {"trunc_rtol": float(self.trunc_rtol)})


METHODS = {"sloreta": SLORETA, "dipole_scan": DipoleScan}
