"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` one-to-one and are used whenever the compiled
extension is unavailable or ``DPMESH_PURE_PYTHON=1`` is set.
"""

import numpy as np


def cholesky_psd(H, tol):
    """Lower ``R`` with ``R @ R.T == H``; pivots in ``[-tol, tol]`` are clamped to zero.

    Returns ``(R, bad)`` where ``bad`` is the index of the first pivot below
    ``-tol`` or ``-1`` on success.
    """
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    R = np.zeros((n, n))
    for j in range(n):
        d = H[j, j] - R[j, :j] @ R[j, :j]
        if d < -tol:
            return R, j
        if d <= tol:
            # zero pivot: the column is (numerically) null for a PSD input
            continue
        rjj = np.sqrt(d)
        R[j, j] = rjj
        if j + 1 < n:
            R[j + 1:, j] = (H[j + 1:, j] - R[j + 1:, :j] @ R[j, :j]) / rjj
    return R, -1


def max_sign_quadform(X):
    """max over v in {-1, +1}^k of v' X v, by Gray-code enumeration (v[0] fixed to +1)."""
    X = np.asarray(X, dtype=np.float64)
    k = X.shape[0]
    if k == 0:
        return 0.0
    v = np.ones(k)
    r = X.sum(axis=1)
    q = float(r.sum())
    best = q
    for i in range(1, 1 << (k - 1)):
        # coordinate to flip = lowest set bit of i, shifted past the fixed v[0]
        j = (i & -i).bit_length()
        q = q - 4.0 * v[j] * r[j] + 4.0 * X[j, j]
        r = r - 2.0 * v[j] * X[:, j]
        v[j] = -v[j]
        if q > best:
            best = q
    return best


def pattern_abs_sums(X, idx, lengths):
    """Sum of |X[s, t]| over s, t in each pattern (patterns are rows of ``idx``)."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(lengths))
    for p, m in enumerate(lengths):
        sel = idx[p, :m]
        out[p] = np.abs(X[np.ix_(sel, sel)]).sum()
    return out


def toeplitz_gram(G):
    """H[s, u] = sum_{j=0}^{T-1-max(s,u)} G[j + |u-s|, j] for symmetric G (T x T)."""
    G = np.asarray(G, dtype=np.float64)
    T = G.shape[0]
    H = np.empty((T, T))
    for d in range(T):
        c = np.cumsum(np.diagonal(G, -d))[::-1]
        s = np.arange(T - d)
        H[s, s + d] = c
        H[s + d, s] = c
    return H
