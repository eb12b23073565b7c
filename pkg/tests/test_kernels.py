import itertools

import numpy as np
import pytest

from dpmesh import _kernels_py, kernels


def test_backend_flag_matches_module():
    assert kernels.BACKEND in kernels.backends()


def test_compiled_backend_available():
    # the editable install builds the extension; the fallback still has to exist
    assert "python" in kernels.backends()
    assert "cython" in kernels.backends()


def _spd(rng, n, rank=None):
    M = rng.standard_normal((n, rank or n))
    return M @ M.T


@pytest.mark.parametrize("n", [1, 2, 5, 12])
def test_cholesky_matches_numpy(backend, rng, n):
    H = _spd(rng, n) + n * np.eye(n)
    R, bad = backend.cholesky_psd(H, 1e-12)
    assert bad == -1
    np.testing.assert_allclose(R, np.linalg.cholesky(H), atol=1e-10)


def test_cholesky_clamps_singular(backend, rng):
    H = _spd(rng, 6, rank=3)
    R, bad = backend.cholesky_psd(H, 1e-10 * np.linalg.norm(H))
    assert bad == -1
    np.testing.assert_allclose(R @ R.T, H, atol=1e-8)


def test_cholesky_reports_negative_pivot(backend):
    H = np.array([[1.0, 2.0], [2.0, 1.0]])
    _, bad = backend.cholesky_psd(H, 1e-12)
    assert bad == 1


@pytest.mark.parametrize("k", [1, 2, 3, 7, 10])
def test_max_sign_quadform_enumeration(backend, rng, k):
    A = rng.standard_normal((k, k))
    X = A + A.T
    want = max(float(np.array(v) @ X @ np.array(v)) for v in itertools.product([-1.0, 1.0], repeat=k))
    assert backend.max_sign_quadform(X) == pytest.approx(want, abs=1e-9)


def test_pattern_abs_sums(backend, rng):
    X = rng.standard_normal((8, 8))
    pats = [[0, 3], [1, 2, 7], [5]]
    idx = np.zeros((3, 3), dtype=np.int64)
    for i, p in enumerate(pats):
        idx[i, : len(p)] = p
    got = backend.pattern_abs_sums(X, idx, np.array([2, 3, 1], dtype=np.int64))
    want = [np.abs(X[np.ix_(p, p)]).sum() for p in pats]
    np.testing.assert_allclose(got, want, rtol=1e-14)


@pytest.mark.parametrize("T", [1, 2, 6, 13])
def test_toeplitz_gram_definition(backend, rng, T):
    A = rng.standard_normal((T, T + 2))
    G = A @ A.T
    H = backend.toeplitz_gram(G)
    want = np.zeros((T, T))
    for s in range(T):
        for u in range(T):
            d = abs(u - s)
            want[s, u] = sum(G[j + d, j] for j in range(T - max(s, u)))
    np.testing.assert_allclose(H, want, rtol=1e-12, atol=1e-12)


def test_backends_agree(rng):
    """The compiled kernels are a drop-in replacement for the numpy ones."""
    impls = kernels.backends()
    if len(impls) < 2:
        pytest.skip("compiled backend not built")
    c = impls["cython"]
    for k in range(1, 9):
        A = rng.standard_normal((k, k))
        X = A @ A.T
        assert c.max_sign_quadform(X) == pytest.approx(_kernels_py.max_sign_quadform(X), rel=1e-12)
        R1, _ = c.cholesky_psd(X + np.eye(k), 1e-12)
        R2, _ = _kernels_py.cholesky_psd(X + np.eye(k), 1e-12)
        np.testing.assert_allclose(R1, R2, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(c.toeplitz_gram(X), _kernels_py.toeplitz_gram(X), rtol=1e-12)
