"""Workloads mapping per-node gradients (and noise) to the messages on the network.

Indexing is 0-based and time-major throughout: the gradient of node ``u`` at
step ``t`` sits at row ``t*n + u`` of the stacked gradient matrix ``G``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import matrixkit as mk
from .errors import InputError, MissingAveragingMatrix
from .graphs import Graph, GossipMatrix, gossip_from_graph

ALGORITHMS = ("dsgd", "muffliato", "antipgd", "decor", "zipdl")


@dataclass(frozen=True)
class WorkloadOperator:
    """Linear map ``X -> A @ X`` applied by streaming gossip steps.

    ``materialize`` returns the dense matrix, subject to the memory budget.
    """

    in_dim: int
    out_dim: int
    _apply: Callable
    _dense: Callable | None = None
    name: str = ""

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        vec = X.ndim == 1
        if vec:
            X = X[:, None]
        if X.shape[0] != self.in_dim:
            raise InputError(f"{self.name}: expected {self.in_dim} input rows, got {X.shape[0]}")
        Y = self._apply(X)
        return Y[:, 0] if vec else Y

    def materialize(self) -> np.ndarray:
        mk.check_budget(self.out_dim, self.in_dim, what=f"{self.name} workload")
        if self._dense is not None:
            return self._dense()
        return self.apply(np.eye(self.in_dim))

    @property
    def shape(self):
        return (self.out_dim, self.in_dim)


def _W(gossip) -> np.ndarray:
    W = gossip.W if isinstance(gossip, GossipMatrix) else gossip
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise InputError(f"gossip matrix must be square, got {W.shape}")
    return W


def _graph_of(gossip) -> Graph:
    if isinstance(gossip, GossipMatrix) and gossip.graph is not None:
        return gossip.graph
    W = _W(gossip)
    iu, ju = np.nonzero(np.triu((W > 0) | (W.T > 0), k=1))
    return Graph(W.shape[0], tuple(zip(iu.tolist(), ju.tolist())))


def matrix_powers(W, count: int) -> np.ndarray:
    """Stack ``[W^0, W^1, ..., W^(count-1)]`` with shape (count, n, n)."""
    W = _W(W)
    n = W.shape[0]
    mk.check_budget(count, n, n, what="stacked gossip powers")
    P = np.empty((count, n, n))
    if count:
        P[0] = np.eye(n)
    for i in range(1, count):
        P[i] = W @ P[i - 1]
    return P


def _toeplitz_blocks(powers, T, shift=0) -> np.ndarray:
    """Dense block lower-triangular matrix with block (t, tau) = powers[t - tau + shift]."""
    n = powers.shape[1]
    A = np.zeros((n * T, n * T))
    for t in range(T):
        for tau in range(t + 1):
            A[t * n:(t + 1) * n, tau * n:(tau + 1) * n] = powers[t - tau + shift]
    return A


def dsgd_workload(gossip, T: int) -> WorkloadOperator:
    """Block lower-triangular Toeplitz workload with block (t, tau) = W^(t - tau)."""
    if T < 1:
        raise InputError("T must be >= 1")
    W = _W(gossip)
    n = W.shape[0]

    def apply(X):
        Xb = X.reshape(T, n, -1)
        Y = np.empty_like(Xb)
        Y[0] = Xb[0]
        for t in range(1, T):
            Y[t] = W @ Y[t - 1] + Xb[t]
        return Y.reshape(n * T, -1)

    def dense():
        return _toeplitz_blocks(matrix_powers(W, T), T)

    return WorkloadOperator(n * T, n * T, apply, dense, name="dsgd")


def stacked_powers(gossip, T: int) -> np.ndarray:
    """``M = [I; W; ...; W^(T-1)]`` (nT x n), propagating the initial models."""
    W = _W(gossip)
    return matrix_powers(W, T).reshape(T * W.shape[0], W.shape[0])


def muffliato_workload(gossip, T: int, K: int) -> WorkloadOperator:
    """K gossip rounds per gradient step: ``A^grad_{KT} (I_T kron [I_n; 0])``.

    Output rows are indexed by communication round ``r`` (``K*T`` of them);
    the gradient of step ``tau`` enters at round ``tau*K``.
    """
    if K < 1:
        raise InputError("K must be >= 1")
    if T < 1:
        raise InputError("T must be >= 1")
    W = _W(gossip)
    n = W.shape[0]
    R = K * T

    def apply(X):
        Xb = X.reshape(T, n, -1)
        Y = np.empty((R, n, Xb.shape[2]))
        Y[0] = Xb[0]
        for r in range(1, R):
            Y[r] = W @ Y[r - 1]
            if r % K == 0:
                Y[r] += Xb[r // K]
        return Y.reshape(n * R, -1)

    def dense():
        P = matrix_powers(W, R)
        A = np.zeros((n * R, n * T))
        for r in range(R):
            for tau in range(T):
                if r >= tau * K:
                    A[r * n:(r + 1) * n, tau * n:(tau + 1) * n] = P[r - tau * K]
        return A

    return WorkloadOperator(n * T, n * R, apply, dense, name=f"muffliato(K={K})")


def prefix_sum_matrix(T: int) -> np.ndarray:
    """T x T all-ones lower triangle."""
    return np.tril(np.ones((T, T)))


def first_difference_matrix(T: int) -> np.ndarray:
    """Inverse of the all-ones lower triangle: 1 on the diagonal, -1 below it."""
    return np.eye(T) - np.eye(T, k=-1)


def antipgd_factorization(gossip, T: int):
    """``(A, B, C)`` for AntiPGD: C = ones-lower-triangle kron I_n, A = A^grad_T.

    B has identity diagonal blocks and ``W^(t-1-tau) (W - I)`` below them, so
    that the injected noise ``C^+ Z`` cancels one step later.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    W = _W(gossip)
    n = W.shape[0]
    A = dsgd_workload(W, T)
    mk.check_budget(n * T, n * T, what="AntiPGD decoder")
    P = matrix_powers(W, max(T - 1, 1))
    Wm = W - np.eye(n)
    B = np.zeros((n * T, n * T))
    for t in range(T):
        B[t * n:(t + 1) * n, t * n:(t + 1) * n] = np.eye(n)
        for tau in range(t):
            B[t * n:(t + 1) * n, tau * n:(tau + 1) * n] = P[t - 1 - tau] @ Wm
    C = mk.kron(prefix_sum_matrix(T), np.eye(n))
    return A, B, C


def decor_orientation(g: Graph, orientation_seed: int) -> list:
    """Orient each edge of the sorted edge list with a seeded coin flip."""
    rng = np.random.default_rng(int(orientation_seed))
    flips = rng.random(g.m) < 0.5
    return [(v, u) if f else (u, v) for (u, v), f in zip(g.edges, flips)]


def decor_incidence(g: Graph, orientation_seed: int) -> np.ndarray:
    """n x |E| secret-sharing matrix: +1 at the tail, -1 at the head of each oriented edge."""
    Cn = np.zeros((g.n, g.m))
    for e, (i, j) in enumerate(decor_orientation(g, orientation_seed)):
        Cn[i, e] = 1.0
        Cn[j, e] = -1.0
    return Cn


def decor_noise_map(g: Graph, T: int, orientation_seed: int) -> np.ndarray:
    """``S = [I_nT, I_T kron C+_nodes]`` mapping (local noise; edge secrets) to injected noise.

    Noise columns: the ``nT`` local noises (time-major), then the ``|E| T`` edge
    secrets (time-major, edge index minor).
    """
    Cn = decor_incidence(g, orientation_seed)
    n, E = Cn.shape
    mk.check_budget(n * T, n * T + E * T, what="DECOR noise map")
    return np.hstack([np.eye(n * T), np.kron(np.eye(T), Cn)])


def decor_factorization(g: Graph, T: int, orientation_seed: int = 0, gossip=None):
    """``(A, B, C)`` for DECOR under LDP.

    ``A = A^grad_T``, ``B = A S`` with ``S`` from :func:`decor_noise_map`, and
    ``C = S^+``, the pseudoinverse of the per-step ``[I_n, C+_nodes]``
    arranged in the same column layout. ``A = B [I_nT; 0]`` holds as well.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    if gossip is None:
        gossip = gossip_from_graph(g)
    W = _W(gossip)
    n = W.shape[0]
    if n != g.n:
        raise InputError("gossip matrix and graph disagree on n")
    A = dsgd_workload(W, T)
    Ad = A.materialize()
    S = decor_noise_map(g, T, orientation_seed)
    B = Ad @ S
    Cn = decor_incidence(g, orientation_seed)
    M = mk.pseudoinverse(np.hstack([np.eye(n), Cn]))
    C = np.vstack([np.kron(np.eye(T), M[:n]), np.kron(np.eye(T), M[n:])])
    return A, B, C


# --- Zip-DL -----------------------------------------------------------------
# Virtual slot n*i + j carries node i's message to node j.


def zipdl_message_matrix(gossip) -> np.ndarray:
    """``M~[n*i + j, n*j + i] = W[i, j]``: slot (i, j) receives j's message to i."""
    W = _W(gossip)
    n = W.shape[0]
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    M = np.zeros((n * n, n * n))
    M[(n * i + j).ravel(), (n * j + i).ravel()] = W.ravel()
    return M


def zipdl_active_slots(g: Graph) -> np.ndarray:
    """Sorted slot indices ``n*i + j`` with ``j`` a neighbor of ``i`` (the mask I~)."""
    return np.array(sorted(g.n * i + j for i in range(g.n) for j in g.neighbors(i)), dtype=np.int64)


def default_averaging(n: int) -> np.ndarray:
    """Aggregate node i's weighted incoming copies and hand the result to all of i's slots.

    ``(A M~ y)[n*i + k] = sum_j W[i, j] y[n*j + i]``: the incoming copies already
    carry the gossip weights, so aggregation is their sum.
    """
    return np.kron(np.eye(n), np.ones((n, n)))


def zipdl_noise_correlation(g: Graph) -> np.ndarray:
    """Per-node zero-sum noise over the node's sent messages and its retained copy.

    For node i with slot set S_i = {(i, j): j in neighbors} plus (i, i), the
    block is ``I - 11^T / (|S_i| + 1)``; all other slots get no noise.
    """
    n = g.n
    Ch = np.zeros((n * n, n * n))
    for i in range(n):
        slots = [n * i + j for j in g.neighbors(i)] + [n * i + i]
        k = len(slots)
        Ch[np.ix_(slots, slots)] = np.eye(k) - 1.0 / k
    return Ch


def zipdl_workload(gossip, averaging="default", T: int = 1) -> WorkloadOperator:
    """Message workload ``(I_T kron I~) [lower-triangular Toeplitz in (A M~)^k]``.

    Inputs are per-slot values (``n^2 T``); outputs are the active message
    slots only (``s T`` rows, ``s = 2|E|``), time-major.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    if averaging is None:
        raise MissingAveragingMatrix("Zip-DL needs an averaging matrix (or 'default')")
    W = _W(gossip)
    n = W.shape[0]
    g = _graph_of(gossip)
    Abar = default_averaging(n) if isinstance(averaging, str) else np.asarray(averaging, float)
    if Abar.shape != (n * n, n * n):
        raise InputError(f"averaging matrix must be {n*n}x{n*n}, got {Abar.shape}")
    mk.check_budget(n * n, n * n, what="Zip-DL round matrix")
    R = Abar @ zipdl_message_matrix(W)
    active = zipdl_active_slots(g)
    s = active.size
    N2 = n * n

    def apply(X):
        Xb = X.reshape(T, N2, -1)
        Y = np.empty((T, s, Xb.shape[2]))
        y = Xb[0].copy()
        Y[0] = y[active]
        for t in range(1, T):
            y = R @ y + Xb[t]
            Y[t] = y[active]
        return Y.reshape(s * T, -1)

    def dense():
        P = matrix_powers(R, T)
        A = np.zeros((s * T, N2 * T))
        for t in range(T):
            for tau in range(t + 1):
                A[t * s:(t + 1) * s, tau * N2:(tau + 1) * N2] = P[t - tau][active]
        return A

    return WorkloadOperator(N2 * T, s * T, apply, dense, name="zipdl")


def zipdl_replication(n: int, T: int) -> np.ndarray:
    """``I_nT kron 1_n``: copies node i's gradient to all of i's n virtual slots."""
    mk.check_budget(n * n * T, n * T, what="Zip-DL replication")
    return np.kron(np.eye(n * T), np.ones((n, 1)))


def zipdl_factorization(gossip, T: int, averaging="default"):
    """LDP ``(A, B, C)`` for Zip-DL with ``C`` solved from ``A = B C``."""
    from .trust import solve_C

    W = _W(gossip)
    n = W.shape[0]
    g = _graph_of(gossip)
    Wmsg = zipdl_workload(gossip, averaging, T).materialize()
    A = Wmsg @ zipdl_replication(n, T)
    B = Wmsg @ np.kron(np.eye(T), zipdl_noise_correlation(g))
    return A, B, solve_C(A, B)


def is_block_lower_triangular(A, row_block: int, col_block: int, atol: float = 0.0) -> bool:
    """True when no row block t depends on a column block tau > t."""
    A = np.asarray(A)
    Tr = A.shape[0] // row_block
    Tc = A.shape[1] // col_block
    for t in range(Tr):
        rows = A[t * row_block:(t + 1) * row_block]
        if np.any(np.abs(rows[:, (t + 1) * col_block:]) > atol):
            return False
    return Tr >= 1 and Tc >= 1
