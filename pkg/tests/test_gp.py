import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdiff import gp
from gpdiff.score import truncate_kernel

from conftest import make_spec


def _spec(N=4, d=2, **kw):
    return gp.GpSpec(d=d, N=N, sigma=np.eye(d), **kw)


def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(N=1)
    with pytest.raises(ValueError):
        _spec(nu=2.5)
    with pytest.raises(ValueError):
        _spec(ell=0.0)
    with pytest.raises(ValueError):
        _spec(kernel_mode="other")
    with pytest.raises(ValueError):
        _spec(N=10, period=17.0)
    with pytest.raises(gp.CovarianceError):
        gp.GpSpec(d=2, N=4, sigma=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        gp.GpSpec(d=2, N=4, sigma=np.array([[1.0, 0.5], [0.0, 1.0]]))
    assert _spec(N=10, period=18.0).period == 18.0
    assert _spec(N=5).period == 20.0


def test_spec_is_immutable():
    spec = _spec()
    with pytest.raises(ValueError):
        spec.sigma[0, 0] = 3.0


def test_embeddings_basic():
    emb = gp.build_embeddings(_spec(N=4, period=16.0))
    assert emb.f[1] == pytest.approx(0.390180644032256535696569736954, abs=1e-15)
    G = emb.gram()
    np.testing.assert_allclose(np.diag(G), 1.0, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(emb.e, axis=1), 1.0, rtol=1e-12)
    i, j = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    np.testing.assert_allclose(G, 1.0 - emb.f2[np.abs(i - j)] / 2, atol=1e-15)
    dist = np.linalg.norm(emb.e[:, None] - emb.e[None], axis=-1)
    np.testing.assert_allclose(dist, emb.f[np.abs(i - j)], atol=1e-15)
    assert emb.delta > 0


def test_embedding_c_bound_exhaustive():
    spec = gp.GpSpec(d=1, N=64, sigma=np.eye(1), kernel_mode="embedding", period=256.0)
    emb = gp.build_embeddings(spec)
    k = np.arange(64)
    assert spec.c == 4.0 / 256
    assert np.all(emb.f >= spec.c * k)
    assert np.all(np.diff(emb.f) > 0)


def test_delta_includes_first_gap():
    emb = gp.build_embeddings(_spec(N=8))
    gaps = np.diff(emb.f2)
    assert emb.delta == gaps.min() == gaps[0]


@settings(max_examples=50, deadline=None)
@given(N=st.integers(2, 64), r=st.floats(0.1, 5.0), slack=st.floats(0.0, 3.0))
def test_embedding_invariants_property(N, r, slack):
    period = 2.0 * (N - 1) * (1.0 + slack)
    emb = gp.build_embeddings(gp.GpSpec(d=1, N=N, sigma=np.eye(1), r=r, period=period))
    np.testing.assert_allclose(np.linalg.norm(emb.e, axis=1), r, rtol=1e-12)
    assert np.all(np.diff(emb.f) > 0)
    assert emb.delta > 0
    assert np.all(emb.f >= 4 * r / period * np.arange(N) * (1 - 1e-12))


def test_kernel_values():
    k = gp.build_kernel(_spec(N=4))
    assert k.gamma_diag[0] == 1.0
    assert k.gamma_diag[2] == pytest.approx(0.135335283236612691893999494972, rel=1e-15)
    tiny = gp.build_kernel(_spec(N=5, ell=1e-3))
    off = tiny.matrix - np.eye(5)
    assert np.all(off < 1e-300)


def test_kernel_embedding_formula_bitwise():
    spec = _spec(N=16, nu=1.3, ell=0.7, kernel_mode="embedding", r=1.5, period=40.0)
    k = gp.build_kernel(spec)
    m = np.arange(16)
    expected = np.exp(-((2 * 1.5 * np.sin(m * np.pi / 40.0)) ** 1.3) / 0.7)
    assert np.array_equal(k.gamma_diag, expected)


@pytest.mark.parametrize("mode", ["index", "embedding"])
def test_kernel_toeplitz_exhaustive(mode):
    spec = gp.GpSpec(d=1, N=256, sigma=np.eye(1), nu=1.5, ell=3.0, kernel_mode=mode)
    G = gp.build_kernel(spec).matrix
    i, j = np.meshgrid(np.arange(256), np.arange(256), indexing="ij")
    assert np.array_equal(G, G.T)
    assert np.array_equal(G, G[0][np.abs(i - j)])
    assert np.all(np.diag(G) == 1.0)


def test_diag_dominance():
    ok, margin = gp.check_diag_dominance(gp.TemporalKernel.identity(6))
    assert ok and margin == 1.0
    ok, margin = gp.check_diag_dominance(gp.build_kernel(_spec(N=128, ell=1.0)))
    assert not ok
    assert margin == pytest.approx(-0.163953413738652848770004010218, abs=1e-14)
    ok, margin = gp.check_diag_dominance(gp.build_kernel(_spec(N=128, ell=0.5)))
    assert ok
    assert margin == pytest.approx(0.686964714500668696363838753069, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(N=st.integers(2, 64), nu=st.floats(1.0, 2.0), frac=st.floats(0.05, 1.0),
       mode=st.sampled_from(["index", "embedding"]))
def test_dominance_implies_psd_truncations(N, nu, frac, mode):
    c = _spec(N=N, nu=nu, kernel_mode=mode).c
    kernel = gp.build_kernel(_spec(N=N, nu=nu, ell=frac * c**nu, kernel_mode=mode))
    ok, _ = gp.check_diag_dominance(kernel)
    if ok:
        for J in range(1, N + 1):
            assert np.linalg.eigvalsh(truncate_kernel(kernel, J)[0])[0] >= -1e-10


def test_kron_cov_blocks_and_spectrum(rng):
    spec = make_spec(N=3, d=2)
    kernel = gp.build_kernel(spec)
    op = gp.kron_cov(kernel, spec.sigma)
    dense = op.dense()
    G = kernel.matrix
    for i in range(3):
        for j in range(3):
            np.testing.assert_array_equal(dense[2 * i:2 * i + 2, 2 * j:2 * j + 2], G[i, j] * spec.sigma)
    np.testing.assert_allclose(op.eigvals(), np.linalg.eigvalsh(dense), rtol=1e-12, atol=1e-14)
    eye = gp.kron_cov(gp.TemporalKernel.identity(3), spec.sigma).dense()
    np.testing.assert_array_equal(eye, np.kron(np.eye(3), spec.sigma))


def test_kron_matvec_matches_dense(rng):
    spec = make_spec(N=4, d=2)
    op = gp.kron_cov(gp.build_kernel(spec), spec.sigma)
    v = rng.normal(size=(5, 8))
    np.testing.assert_allclose(op.matvec(v), v @ op.dense().T, atol=1e-12)


def test_kron_cap():
    op = gp.kron_cov(np.eye(100), np.eye(50), cap=4096)
    with pytest.raises(MemoryError):
        op.dense()
    assert op.matvec(np.ones(5000)).shape == (5000,)


def test_sample_gp_shapes_and_determinism():
    spec = make_spec(N=4, d=2)
    kernel = gp.build_kernel(spec)
    assert gp.sample_gp(spec, kernel, 0, 1).shape == (0, 4, 2)
    a = gp.sample_gp(spec, kernel, 1500, 11)
    b = gp.sample_gp(spec, kernel, 1500, 11, workers=3)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (1500, 4, 2)


def test_sample_gp_identity_variance():
    spec = gp.GpSpec(d=2, N=3, sigma=np.eye(2))
    x = gp.sample_gp(spec, gp.TemporalKernel.identity(3), 10_000, 5).reshape(10_000, -1)
    var = x.var(axis=0)
    assert np.all((var > 0.94) & (var < 1.06))


def test_sample_gp_cross_covariance():
    spec = make_spec(N=4, d=2, mean=False)
    kernel = gp.build_kernel(spec)
    n = 10_000
    x = gp.sample_gp(spec, kernel, n, 8)
    x = x - x.mean(axis=0)
    cross = x[:, 0].T @ x[:, 1] / n
    err = np.linalg.norm(cross - kernel.gamma_diag[1] * spec.sigma)
    assert err <= 5 * np.linalg.norm(spec.sigma) / np.sqrt(n)


def test_psd_sqrt_fallback_and_error():
    v = np.array([1.0, 1.0, 0.0])
    singular = np.outer(v, v)
    L = gp.psd_sqrt(singular)
    np.testing.assert_allclose(L @ L.T, singular, atol=1e-12)
    with pytest.raises(gp.CovarianceError, match="indefinite"):
        gp.psd_sqrt(np.diag([1.0, -1e-6]))


def test_random_spd_is_spd():
    s = gp.random_spd(5, 3)
    assert np.array_equal(s, s.T)
    assert np.linalg.eigvalsh(s)[0] > 0
