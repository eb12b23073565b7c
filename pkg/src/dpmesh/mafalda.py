"""Local noise-correlation design for decentralized SGD under local DP.

The utility objective reduces to a T x T problem: with ``C = C_local kron I_n``
the loss is ``sens(C_local)^2 * ||L C_local^{-1}||_F^2`` where ``L^T L = H`` and
``H[s, u] = sum_{t >= max(s, u)} <W^(t-s+1), W^(t-u+1)>_F``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from . import matrixkit as mk
from . import workloads as wl
from .accounting import ParticipationScheme, local_patterns, sensitivity_sq_bound, _pack
from .errors import Diverged, InputError, SingularC

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GramWorkload:
    T: int
    H: np.ndarray
    provenance: dict = field(default_factory=dict)

    def cholesky(self) -> np.ndarray:
        return mk.cholesky(self.H)


@dataclass(frozen=True)
class CorrelationMatrix:
    """Lower-triangular local correlation with positive diagonal."""

    T: int
    C: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        C = np.asarray(self.C, dtype=np.float64)
        if C.shape != (self.T, self.T):
            raise InputError(f"C must be {self.T}x{self.T}, got {C.shape}")
        if not mk.is_lower_triangular(C):
            raise InputError("C must be lower triangular")
        if np.any(np.diag(C) <= 0):
            raise SingularC("C must have a strictly positive diagonal")
        object.__setattr__(self, "C", C)

    def inverse(self) -> np.ndarray:
        return solve_triangular(self.C, np.eye(self.T), lower=True)


def gram_workload(gossip, T: int) -> GramWorkload:
    """Streamed Gram workload; only the T x T Gram of W-powers is ever formed."""
    if T < 1:
        raise InputError("T must be >= 1")
    W = wl._W(gossip)
    n = W.shape[0]
    mk.check_budget(T, T, what="Gram workload")
    mk.check_budget(T, n * n, what="flattened gossip powers")
    F = np.empty((T, n * n))
    P = W.copy()
    for a in range(T):
        F[a] = P.ravel()
        P = W @ P
    G = F @ F.T
    H = kernels.toeplitz_gram(G)
    prov = {"n": n, "T": T}
    g = getattr(gossip, "graph", None)
    if g is not None:
        prov.update(graph=g.digest(), scheme=gossip.scheme)
    return GramWorkload(T, H, prov)


def gram_workload_dense(gossip, T: int) -> np.ndarray:
    """Reference H from the explicit nT x nT averaged workload (small sizes only)."""
    W = wl._W(gossip)
    n = W.shape[0]
    M = mk.kron(np.eye(T), W) @ wl.dsgd_workload(W, T).materialize() @ mk.commutation(T, n)
    H = np.zeros((T, T))
    for i in range(n):
        Ai = M[:, i * T:(i + 1) * T]
        H += Ai.T @ Ai
    return H


def centralized_gram(T: int) -> np.ndarray:
    """``A_pre^T A_pre`` for the prefix-sum workload: ``T - max(s, u)``."""
    A = wl.prefix_sum_matrix(T)
    return A.T @ A


def _inv_lower(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    d = np.abs(np.diag(C))
    if d.size == 0 or d.min() <= 1e-14 * max(d.max(), 1.0):
        raise SingularC("correlation matrix is singular")
    return solve_triangular(C, np.eye(C.shape[0]), lower=True)


def sens_sq(C, scheme: ParticipationScheme) -> float:
    C = np.asarray(C, dtype=np.float64)
    return sensitivity_sq_bound(C, None, local_patterns(scheme, C.shape[0]))


def utility(H, C) -> float:
    """``||L C^{-1}||_F^2 = tr(C^{-T} H C^{-1})``."""
    Y = _inv_lower(C)
    return float(np.sum(Y * (H @ Y)))


def objective(L, C, scheme: ParticipationScheme) -> float:
    """``sens^2 * ||L C^{-1}||_F^2`` on the local T x T problem."""
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if mk.is_lower_triangular(C):
        Y = _inv_lower(C)
    else:
        try:
            Y = np.linalg.inv(C)
        except np.linalg.LinAlgError as exc:
            raise SingularC(str(exc)) from exc
    return sens_sq(C, scheme) * float(np.linalg.norm(np.asarray(L) @ Y) ** 2)


def objective_from_gram(H, C, scheme: ParticipationScheme) -> float:
    return sens_sq(C, scheme) * utility(H, C)


def normalize(C, scheme: ParticipationScheme) -> np.ndarray:
    """Rescale so that the squared sensitivity is one."""
    C = np.asarray(C, dtype=np.float64)
    return C / math.sqrt(sens_sq(C, scheme))


def antipgd_local(T: int) -> CorrelationMatrix:
    return CorrelationMatrix(T, wl.prefix_sum_matrix(T))


def identity_local(T: int) -> CorrelationMatrix:
    return CorrelationMatrix(T, np.eye(T))


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 2000
    rel_tol: float = 1e-7
    smoothing: float = 1e-6
    tau_rel: float = 0.1
    anneal_every: int = 100
    anneal_factor: float = 0.5
    step: float = 0.1
    max_backtracks: int = 50
    inits: tuple = ("identity", "antipgd")


class _Smoothed:
    """log of the smoothed objective and its gradient in the (strict-lower, log-diag) parameters."""

    def __init__(self, H, scheme, T, cfg: OptimizerConfig):
        self.H = H
        self.T = T
        self.cfg = cfg
        self.idx, self.lengths = _pack(local_patterns(scheme, T))
        self.masks = np.zeros((len(self.lengths), T, T))
        for p, m in enumerate(self.lengths):
            sel = self.idx[p, :m]
            self.masks[p][np.ix_(sel, sel)] = 1.0
        self.il = np.tril_indices(T, -1)
        self.tau_rel = cfg.tau_rel

    def to_C(self, theta):
        T = self.T
        C = np.zeros((T, T))
        C[self.il] = theta[T:]
        C[np.diag_indices(T)] = np.exp(theta[:T])
        return C

    def from_C(self, C):
        return np.concatenate([np.log(np.diag(C)), C[self.il]])

    def value_grad(self, theta, need_grad=True):
        C = self.to_C(theta)
        mu = self.cfg.smoothing
        X = C.T @ C
        sa = np.sqrt(X * X + mu * mu)
        s = np.einsum("pij,ij->p", self.masks, sa)
        smax = s.max()
        tau = max(self.tau_rel * smax, 1e-300)
        w = np.exp((s - smax) / tau)
        S = smax + tau * math.log(w.sum())
        w /= w.sum()
        try:
            Y = solve_triangular(C, np.eye(self.T), lower=True)
        except (np.linalg.LinAlgError, ValueError):
            return math.inf, None
        HY = self.H @ Y
        U = float(np.sum(Y * HY))
        if not (U > 0 and math.isfinite(U) and math.isfinite(S)):
            return math.inf, None
        f = math.log(S) + math.log(U)
        if not need_grad:
            return f, None
        M = np.einsum("p,pij->ij", w, self.masks) * (X / sa)
        gS = 2.0 * C @ M
        gU = -2.0 * Y.T @ HY @ Y.T
        gC = gS / S + gU / U
        T = self.T
        gd = np.diag(gC) * np.diag(C)
        return f, np.concatenate([gd, gC[self.il]])


def _descend(obj: _Smoothed, C0, cfg: OptimizerConfig, trace: list):
    theta = obj.from_C(C0)
    f, g = obj.value_grad(theta)
    if not math.isfinite(f):
        raise Diverged("objective not finite at the starting point")
    step = cfg.step
    prev = f
    for it in range(1, cfg.max_iters + 1):
        if it % cfg.anneal_every == 0:
            obj.tau_rel *= cfg.anneal_factor
            f, g = obj.value_grad(theta)
            prev = f
        gg = float(g @ g)
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = theta - step * g
            fc, _ = obj.value_grad(cand, need_grad=False)
            if math.isfinite(fc) and fc <= f - 1e-4 * step * gg:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        theta = cand
        f, g = obj.value_grad(theta)
        step = min(step * 2.0, 1e3)
        trace.append(f)
        # f is a log-objective: a change of x in f is a relative change of ~x
        if abs(prev - f) < cfg.rel_tol and it % cfg.anneal_every > 1:
            break
        prev = f
    return obj.to_C(theta)


def optimize_correlation(H, scheme: ParticipationScheme, config: OptimizerConfig | None = None) -> CorrelationMatrix:
    """Minimize ``sens^2 ||L C^{-1}||^2`` over lower-triangular ``C`` with positive diagonal.

    Gradient descent with backtracking on a smoothed log-objective, run from
    each configured start; the best result on the exact objective is kept and
    never worse than the identity. The output is scaled to unit sensitivity.
    """
    cfg = config or OptimizerConfig()
    Hm = H.H if isinstance(H, GramWorkload) else np.asarray(H, dtype=np.float64)
    T = Hm.shape[0]
    if Hm.shape != (T, T):
        raise InputError("H must be square")
    mk.cholesky(Hm)  # validates symmetry and PSD-ness
    exact = lambda C: objective_from_gram(Hm, C, scheme)

    starts = {"identity": np.eye(T), "antipgd": wl.prefix_sum_matrix(T)}
    best_C, best_f, best_from = np.eye(T), exact(np.eye(T)), "identity"
    history = {}
    if T > 1:
        for name in cfg.inits:
            if name not in starts:
                raise InputError(f"unknown init {name!r}")
            trace: list = []
            obj = _Smoothed(Hm, scheme, T, cfg)
            C = _descend(obj, normalize(starts[name], scheme), cfg, trace)
            fC = exact(C)
            history[name] = {"iters": len(trace), "objective": fC, "trajectory": [math.exp(x) for x in trace]}
            log.debug("init %s: %d iterations, objective %.6g", name, len(trace), fC)
            if math.isfinite(fC) and fC < best_f:
                best_C, best_f, best_from = C, fC, name
    C = normalize(best_C, scheme)
    return CorrelationMatrix(
        T, C, info={"objective": exact(C), "identity_objective": exact(np.eye(T)),
                    "start": best_from, "runs": history, "utility": utility(Hm, C),
                    "sens_sq": sens_sq(C, scheme)},
    )


def dmf_baseline(T: int, scheme: ParticipationScheme, config: OptimizerConfig | None = None) -> CorrelationMatrix:
    """Correlation optimized for the centralized prefix-sum workload, ignoring the graph."""
    return optimize_correlation(centralized_gram(T), scheme, config)


def baseline(name: str, T: int, scheme: ParticipationScheme, config=None) -> CorrelationMatrix:
    if name == "identity":
        return identity_local(T)
    if name == "antipgd":
        return antipgd_local(T)
    if name == "dmf":
        return dmf_baseline(T, scheme, config)
    raise InputError(f"unknown baseline {name!r}")
