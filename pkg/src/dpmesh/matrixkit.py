"""Dense linear-algebra kernel.

Everything here is a pure function on float64 numpy arrays. The only state is
the memory budget for dense materialization, read from ``DPMESH_MEM_BUDGET_MB``
(default 2 GiB) at call time.
"""

from __future__ import annotations

import os

import numpy as np

from . import kernels
from .errors import (
    InputError,
    NotPSD,
    NotSymmetric,
    OutOfMemory,
    RankDeficient,
    ShapeMismatch,
    SvdNoConvergence,
)

DEFAULT_BUDGET_MB = 2048
_EPS = np.finfo(np.float64).eps


def mem_budget_bytes() -> int:
    mb = os.environ.get("DPMESH_MEM_BUDGET_MB")
    return int(float(mb) * 2**20) if mb else DEFAULT_BUDGET_MB * 2**20


def check_budget(*shape: int, what: str = "matrix") -> None:
    """Raise OutOfMemory if a float64 array of ``shape`` would exceed the budget."""
    nbytes = 8 * int(np.prod([int(s) for s in shape], dtype=object))
    budget = mem_budget_bytes()
    if nbytes > budget:
        raise OutOfMemory(
            f"{what} of shape {tuple(shape)} needs {nbytes / 2**20:.1f} MiB, "
            f"budget is {budget / 2**20:.1f} MiB (DPMESH_MEM_BUDGET_MB)"
        )


def _as_matrix(M, name="matrix") -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InputError(f"{name} has non-finite entries")
    return M


def is_lower_triangular(M, atol: float = 0.0) -> bool:
    M = np.asarray(M)
    return M.shape[0] == M.shape[1] and bool(np.all(np.abs(np.triu(M, 1)) <= atol))


def cholesky(H) -> np.ndarray:
    """Lower-triangular ``L`` with ``L.T @ L == H`` for symmetric PSD ``H``.

    The factor is obtained from the ordinary Cholesky factor of the
    index-reversed matrix: if ``J H J = R R^T`` then ``L = J R^T J``.
    Pivots within ``1e-10 * ||H||_F`` of zero are clamped so that singular PSD
    inputs (e.g. Gram matrices of rank-deficient workloads) still factor.
    """
    H = _as_matrix(H, "H")
    n, m = H.shape
    if n != m:
        raise ShapeMismatch(f"H must be square, got {H.shape}")
    scale = np.linalg.norm(H)
    tol = 1e-10 * scale
    if np.max(np.abs(H - H.T), initial=0.0) > tol:
        raise NotSymmetric("H is not symmetric within 1e-10 * ||H||_F")
    Hs = 0.5 * (H + H.T)
    R, bad = kernels.cholesky_psd(np.ascontiguousarray(Hs[::-1, ::-1]), tol)
    if bad >= 0:
        raise NotPSD(f"negative pivot at reversed index {bad}")
    return np.ascontiguousarray(R.T[::-1, ::-1])


def pseudoinverse(B) -> np.ndarray:
    """Moore-Penrose inverse via SVD with cutoff ``max(m, n) * eps * sigma_max``."""
    B = _as_matrix(B, "B")
    if B.size == 0:
        raise ShapeMismatch("B must be nonempty")
    try:
        U, s, Vt = np.linalg.svd(B, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdNoConvergence(str(exc)) from exc
    r = _svd_rank(s, B.shape)
    return (Vt[:r].T / s[:r]) @ U[:, :r].T


def _svd_rank(s, shape) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    cutoff = max(shape) * _EPS * s[0]
    return int(np.count_nonzero(s > cutoff))


def rank(B) -> int:
    B = _as_matrix(B, "B")
    if B.size == 0:
        return 0
    try:
        s = np.linalg.svd(B, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise SvdNoConvergence(str(exc)) from exc
    return _svd_rank(s, B.shape)


def projector(B) -> np.ndarray:
    """Orthogonal projector ``B^+ B`` onto the row space of ``B``.

    Assembled as ``V_r V_r^T`` from the same SVD the pseudoinverse uses, which
    is equal to ``B^+ B`` and exactly symmetric.
    """
    B = _as_matrix(B, "B")
    if B.size == 0:
        raise ShapeMismatch("B must be nonempty")
    try:
        _, s, Vt = np.linalg.svd(B, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdNoConvergence(str(exc)) from exc
    V = Vt[: _svd_rank(s, B.shape)]
    return V.T @ V


def kron(X, Y) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    check_budget(X.shape[0] * Y.shape[0], X.shape[1] * Y.shape[1], what="Kronecker product")
    return np.kron(X, Y)


def commutation(T: int, n: int) -> np.ndarray:
    """Permutation turning time-major stacking into node-major stacking.

    Entry ``[t*n + u, u*T + t]`` is one, so for ``M`` with time-major columns,
    ``(M @ P)[:, u*T + t] == M[:, t*n + u]``. The matrix satisfies
    ``P @ kron(X, Y) == kron(Y, X) @ P`` for ``X`` n-by-n and ``Y`` T-by-T, and
    ``commutation(n, T)`` is its inverse (and transpose).
    """
    if T < 1 or n < 1:
        raise InputError("T and n must be >= 1")
    check_budget(n * T, n * T, what="commutation matrix")
    t, u = np.meshgrid(np.arange(T), np.arange(n), indexing="ij")
    P = np.zeros((n * T, n * T))
    P[(t * n + u).ravel(), (u * T + t).ravel()] = 1.0
    return P


def lq_decompose(B):
    """``B = [L 0] Q`` for full-row-rank ``B`` (r <= m).

    Returns ``(L, Q)`` with ``L`` r-by-r lower triangular with positive
    diagonal and ``Q`` m-by-m orthonormal.
    """
    B = _as_matrix(B, "B")
    r, m = B.shape
    if r > m:
        raise RankDeficient(f"B has more rows than columns ({r} > {m})")
    Qc, Rc = np.linalg.qr(B.T, mode="complete")
    signs = np.sign(np.diag(Rc))
    signs[signs == 0] = 1.0
    L = (Rc[:r] * signs[:, None]).T
    Q = Qc.T.copy()
    Q[:r] *= signs[:, None]
    diag = np.abs(np.diag(L))
    if r and diag.min() <= max(r, m) * _EPS * max(diag.max(), np.linalg.norm(B)):
        raise RankDeficient("B does not have full row rank")
    return L, Q


def read_matrix_csv(path) -> np.ndarray:
    """Read a headerless comma-separated matrix."""
    try:
        M = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(M)):
        raise InputError(f"{path}: non-finite entries")
    return M


def write_matrix_csv(path, M) -> None:
    """Write a matrix with round-trip precision, one row per line, no header."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "w", newline="\n") as fh:
        for row in M:
            fh.write(",".join(repr(float(x)) for x in row))
            fh.write("\n")
