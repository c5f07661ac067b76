import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from peelfem.exceptions import NumericalError
from peelfem.inverse import METHODS, SLORETA, DipoleScan, Measurement, Reconstruction


@pytest.fixture(scope="module")
def smooth_leadfield():
    # Lead field of a dipole grid in an unbounded medium seen by 32 distant
    # sensors: smooth and strongly correlated like a real one.
    rng = np.random.default_rng(4)
    sens = rng.normal(size=(32, 3))
    sens *= 100.0 / np.linalg.norm(sens, axis=1, keepdims=True)
    g = np.linspace(-40, 40, 5)
    src = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    d = sens[:, None, :] - src[None, :, :]
    r = np.linalg.norm(d, axis=2, keepdims=True)
    L = (d / r**3).reshape(32, -1)
    L -= L.mean(axis=0)
    return L, src


def _single(L, i, d):
    return L[:, 3 * i:3 * i + 3] @ d


class TestMeasurement:
    def test_centered(self):
        m = Measurement.centered([1.0, 2.0, 6.0])
        assert m.mean_free and abs(m.values.mean()) < 1e-15
        with pytest.raises(ValueError):
            m.values[0] = 3.0

    def test_mean_free_checked(self):
        with pytest.raises(ValueError, match="non-zero mean"):
            Measurement([1.0, 2.0], mean_free=True)


class TestSLORETA:
    def test_lambda_rule(self, smooth_leadfield):
        L, _ = smooth_leadfield
        est = SLORETA(snr_db=20).fit(L)
        assert est.lambda_ == pytest.approx(0.01 * np.trace(L @ L.T) / 32, rel=1e-12)

    def test_zero_measurement(self, smooth_leadfield):
        L, _ = smooth_leadfield
        rec = SLORETA().fit(L).reconstruct(np.zeros(32))
        assert np.all(rec.moments == 0) and np.all(rec.scores == 0)
        assert rec.argmax == 0

    @pytest.mark.parametrize("standardization", ["block", "diagonal"])
    def test_linearity(self, smooth_leadfield, standardization):
        L, _ = smooth_leadfield
        est = SLORETA(standardization=standardization).fit(L)
        m = _single(L, 17, np.array([0.2, -0.4, 0.9]))
        a, b = est.reconstruct(m), est.reconstruct(3.5 * m)
        np.testing.assert_allclose(b.moments, 3.5 * a.moments, rtol=1e-10, atol=1e-14)
        assert a.argmax == b.argmax

    def test_exact_localisation_noiseless(self, smooth_leadfield):
        L, _ = smooth_leadfield
        est = SLORETA().fit(L)
        rng = np.random.default_rng(0)
        for i in range(0, L.shape[1] // 3, 7):
            d = rng.normal(size=3)
            assert est.predict(_single(L, i, d))[0] == i

    def test_block_matches_dense_formula(self, smooth_leadfield):
        L, _ = smooth_leadfield
        est = SLORETA(snr_db=10).fit(L)
        m = _single(L, 40, np.array([1.0, 0.0, 0.0]))
        G = L @ L.T + est.lambda_ * np.eye(32)
        J = L.T @ np.linalg.solve(G, m)
        R = L.T @ np.linalg.solve(G, L)
        i = 40
        Rb = R[3 * i:3 * i + 3, 3 * i:3 * i + 3]
        w, V = np.linalg.eigh(Rb)
        ref = V @ np.diag(w ** -0.5) @ V.T @ J[3 * i:3 * i + 3]
        np.testing.assert_allclose(est.reconstruct(m).moments[i], ref, rtol=1e-8)
        diag = SLORETA(snr_db=10, standardization="diagonal").fit(L)
        np.testing.assert_allclose(diag.reconstruct(m).moments.ravel(), J / np.sqrt(np.diag(R)), rtol=1e-8)

    def test_gain_cancels(self, smooth_leadfield):
        L, _ = smooth_leadfield
        i = 33
        scaled = L.copy()
        scaled[:, 3 * i:3 * i + 3] *= 7.0
        m = _single(scaled, i, np.array([0.3, 0.3, -0.9]))
        assert SLORETA().fit(scaled).predict(m)[0] == i

    def test_rotation_invariance_of_scores(self, smooth_leadfield):
        from scipy.spatial.transform import Rotation
        L, _ = smooth_leadfield
        Q = Rotation.from_euler("xyz", [0.4, 1.0, -0.3]).as_matrix()
        n = L.shape[1] // 3
        Lr = (L.reshape(32, n, 3) @ Q).reshape(32, -1)
        m = _single(L, 5, np.array([1.0, 2.0, 0.5]))
        a = SLORETA().fit(L).transform(m)
        b = SLORETA().fit(Lr).transform(m)
        np.testing.assert_allclose(a, b, rtol=1e-8)

    def test_errors(self, smooth_leadfield):
        L, _ = smooth_leadfield
        with pytest.raises(ValueError):
            SLORETA(snr_db=np.inf).fit(L)
        with pytest.raises(ValueError):
            SLORETA(snr_db=20).fit(np.zeros((4, 6)))
        with pytest.raises(ValueError, match="standardization"):
            SLORETA(standardization="full").fit(L)
        with pytest.raises(ValueError, match="3 columns per source"):
            SLORETA().fit(L[:, :4])
        with pytest.raises(NotFittedError):
            SLORETA().transform(np.zeros(32))
        with pytest.raises(ValueError, match="sensors"):
            SLORETA().fit(L).transform(np.zeros(31))

    def test_factorization_failure(self, monkeypatch, smooth_leadfield):
        import scipy.linalg as sla

        def boom(*a, **k):
            raise np.linalg.LinAlgError("not positive definite")
        monkeypatch.setattr(sla, "cho_factor", boom)
        with pytest.raises(NumericalError, match="factorization failed"):
            SLORETA().fit(smooth_leadfield[0])

    def test_sklearn_api(self):
        est = SLORETA(snr_db=5.0, standardization="diagonal")
        assert est.get_params() == {"snr_db": 5.0, "standardization": "diagonal"}
        c = clone(est).set_params(snr_db=30.0)
        assert c.snr_db == 30.0 and est.snr_db == 5.0
        assert set(METHODS) == {"sloreta", "dipole_scan"}


def _rrv_bruteforce(L, m):
    n = L.shape[1] // 3
    out = np.empty(n)
    for i in range(n):
        A = L[:, 3 * i:3 * i + 3]
        coef, *_ = np.linalg.lstsq(A, m, rcond=None)
        r = m - A @ coef
        out[i] = (r @ r) / (m @ m)
    return out


class TestDipoleScan:
    def test_in_span_and_orthogonal(self):
        L = np.zeros((6, 6))
        L[:3, :3] = np.eye(3)
        L[3:, 3:] = np.diag([1.0, 2.0, 3.0])
        est = DipoleScan().fit(L)
        rrv = est.residual_variance(np.array([1.0, -2.0, 0.5, 0, 0, 0]))[0]
        assert rrv[0] <= 1e-20 and rrv[1] == 1.0
        np.testing.assert_array_equal(est.transform(np.array([1.0, -2.0, 0.5, 0, 0, 0]))[0], 1 - rrv)

    def test_matches_bruteforce(self, smooth_leadfield):
        L, _ = smooth_leadfield
        rng = np.random.default_rng(2)
        m = _single(L, 60, rng.normal(size=3)) + 0.05 * rng.normal(size=32) * np.abs(L).max()
        got = DipoleScan().fit(L).residual_variance(m)[0]
        np.testing.assert_allclose(got, _rrv_bruteforce(L, m), atol=1e-10)
        assert np.all((got >= 0) & (got <= 1))

    def test_noiseless_recovers_source_and_moment(self, smooth_leadfield):
        L, _ = smooth_leadfield
        d = np.array([0.7, -0.1, 0.2])
        est = DipoleScan().fit(L)
        for i in (0, 31, 124):
            rec = est.reconstruct(_single(L, i, 2.5 * d))
            assert rec.argmax == i
            np.testing.assert_allclose(rec.moments[i], 2.5 * d, atol=1e-8)

    def test_scale_invariant_argmax(self, smooth_leadfield):
        L, _ = smooth_leadfield
        rng = np.random.default_rng(9)
        m = rng.normal(size=32)
        m -= m.mean()
        est = DipoleScan().fit(L)
        assert est.predict(m)[0] == est.predict(1e-6 * m)[0]

    def test_truncation(self):
        L = np.zeros((4, 3))
        L[0, 0], L[1, 1], L[2, 2] = 1.0, 1.0, 1e-9
        est = DipoleScan(trunc_rtol=1e-6).fit(L)
        assert est.rank_[0] == 2
        assert est.residual_variance(np.array([0, 0, 1.0, 0]))[0, 0] == 1.0

    def test_errors(self, smooth_leadfield):
        L, _ = smooth_leadfield
        with pytest.raises(ValueError, match="RRV undefined for zero measurement"):
            DipoleScan().fit(L).transform(np.zeros(32))
        with pytest.raises(ValueError):
            DipoleScan(trunc_rtol=1.0).fit(L)

    def test_reconstruction_json(self, smooth_leadfield):
        L, _ = smooth_leadfield
        rec = DipoleScan().fit(L).reconstruct(_single(L, 3, np.ones(3)))
        d = rec.to_dict()
        assert d["method"] == "dipole_scan" and d["argmax"] == 3 and len(d["scores"]) == L.shape[1] // 3
        assert isinstance(rec, Reconstruction)

    def test_batch_predict(self, smooth_leadfield):
        L, _ = smooth_leadfield
        M = np.stack([_single(L, i, np.array([0, 0, 1.0])) for i in (2, 9, 77)])
        assert DipoleScan().fit(L).predict(M).tolist() == [2, 9, 77]
        assert SLORETA().fit(L).predict(M).tolist() == [2, 9, 77]
