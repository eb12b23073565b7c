"""Participation schemes, generalized sensitivity and privacy-unit conversions.

The sensitivity bound ``max_pi sum_{s,t in pi} |X[s,t]|`` with
``X = C^T B^+ B C`` is treated as the *squared* sensitivity; the brute-force
oracle below agrees with that reading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.optimize import brentq
from scipy.special import log_ndtr

from . import kernels
from . import matrixkit as mk
from . import workloads as wl
from .errors import (
    AlphaOutOfRange,
    EmptyAttackerSet,
    InputError,
    NonPositive,
    PhaseOutOfRange,
    ShapeMismatch,
    TooLarge,
)
from .graphs import GossipMatrix, pairwise_distances

BRUTEFORCE_MAX = 16
SCHEME_KINDS = ("single", "kb", "full")


@dataclass(frozen=True)
class ParticipationScheme:
    """Which steps a single record may touch.

    ``single``: only ``step``. ``kb``: ``k`` uses spaced exactly ``b`` apart,
    one pattern per phase in ``[0, b)`` (or just ``phase`` if given).
    ``full``: every step.
    """

    kind: str
    step: int = 0
    k: int = 1
    b: int = 1
    phase: int | None = None
    node_localized: bool = True

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise InputError(f"unknown participation scheme {self.kind!r}")
        if self.kind == "kb" and (self.k < 1 or self.b < 1):
            raise InputError("(k, b)-participation needs k >= 1 and b >= 1")

    @classmethod
    def single(cls, step=0):
        return cls("single", step=int(step))

    @classmethod
    def cyclic(cls, k, b, phase=None):
        return cls("kb", k=int(k), b=int(b), phase=phase)

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def parse(cls, text: str) -> "ParticipationScheme":
        """``single:t``, ``kb:K,B`` (optionally ``kb:K,B,PHASE``) or ``full``."""
        head, _, rest = text.strip().partition(":")
        try:
            if head == "full" and not rest:
                return cls.full()
            if head == "single":
                return cls.single(int(rest or 0))
            if head == "kb":
                parts = [int(x) for x in rest.split(",")]
                if len(parts) == 2:
                    return cls.cyclic(*parts)
                if len(parts) == 3:
                    return cls.cyclic(parts[0], parts[1], parts[2])
        except ValueError:
            pass
        raise InputError(f"bad participation spec {text!r} (use single:t, kb:K,B or full)")

    def describe(self) -> str:
        if self.kind == "single":
            return f"single:{self.step}"
        if self.kind == "kb":
            return f"kb:{self.k},{self.b}" + ("" if self.phase is None else f",{self.phase}")
        return "full"


def local_patterns(scheme: ParticipationScheme, T: int) -> list:
    """Patterns as sets of local step indices in ``[0, T)``."""
    if T < 1:
        raise InputError("T must be >= 1")
    if scheme.kind == "full":
        return [np.arange(T)]
    if scheme.kind == "single":
        if not 0 <= scheme.step < T:
            raise PhaseOutOfRange(f"step {scheme.step} not in [0, {T})")
        return [np.array([scheme.step])]
    phases = range(scheme.b) if scheme.phase is None else [scheme.phase]
    out = []
    for s in phases:
        if not 0 <= s < scheme.b:
            raise PhaseOutOfRange(f"phase {s} not in [0, {scheme.b})")
        p = np.arange(s, s + scheme.k * scheme.b, scheme.b)
        p = p[p < T]
        if p.size:
            out.append(p)
    if not out:
        raise PhaseOutOfRange("no phase yields a nonempty pattern")
    return out


def enumerate_patterns(scheme: ParticipationScheme, T: int, node: int = 0, n: int = 1) -> list:
    """Node-localized global-row patterns: local step t maps to row ``t*n + node``."""
    if not 0 <= node < n:
        raise InputError(f"node {node} out of range for n={n}")
    pats = local_patterns(scheme, T)
    if not scheme.node_localized:
        return pats
    return [p * n + node for p in pats]


def _pack(patterns):
    """Patterns as a zero-padded index matrix plus lengths (the kernel layout)."""
    lengths = np.array([len(p) for p in patterns], dtype=np.int64)
    idx = np.zeros((len(patterns), max(int(lengths.max()), 1)), dtype=np.int64)
    for i, p in enumerate(patterns):
        idx[i, : len(p)] = p
    return idx, lengths


def pattern_sums_of(X, patterns) -> np.ndarray:
    """``sum_{s,t in pi} |X[s,t]|`` for every pattern."""
    idx, lengths = _pack(patterns)
    return kernels.pattern_abs_sums(np.ascontiguousarray(X, dtype=np.float64), idx, lengths)


def sensitivity_sq_bound(C, projector=None, patterns=(), clip: float = 1.0) -> float:
    """``clip^2 * max_pi sum_{s,t in pi} |(C^T P C)[s,t]|`` (``P = I`` when ``projector`` is None).

    Only the columns of ``C`` touched by some pattern enter the product.
    """
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if not len(patterns):
        raise InputError("need at least one participation pattern")
    used = np.unique(np.concatenate([np.asarray(p, dtype=np.int64) for p in patterns]))
    if used.min() < 0 or used.max() >= C.shape[1]:
        raise ShapeMismatch(f"pattern index out of range for C with {C.shape[1]} columns")
    Cs = C[:, used]
    if projector is None:
        Xs = Cs.T @ Cs
    else:
        P = np.asarray(projector, dtype=np.float64)
        if P.shape != (C.shape[0], C.shape[0]):
            raise ShapeMismatch(f"projector {P.shape} does not match C rows {C.shape[0]}")
        Xs = Cs.T @ (P @ Cs)
    remap = np.full(C.shape[1], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    local = [remap[np.asarray(p, dtype=np.int64)] for p in patterns]
    return float(clip) ** 2 * float(pattern_sums_of(Xs, local).max())


def pattern_spectral_bounds(X, patterns) -> np.ndarray:
    """``|pi| * lambda_max(X[pi, pi])`` per pattern: another valid bound on the squared sensitivity."""
    out = np.empty(len(patterns))
    for i, p in enumerate(patterns):
        p = np.asarray(p, dtype=np.int64)
        out[i] = p.size * max(float(np.linalg.eigvalsh(X[np.ix_(p, p)])[-1]), 0.0)
    return out


def pattern_bound(X, patterns, bound: str = "abs") -> float:
    """Squared-sensitivity bound of ``X`` over ``patterns``.

    ``abs`` is the entrywise bound ``max_pi sum |X[pi, pi]|``; ``tight`` takes,
    per pattern, the smaller of that and the spectral bound.
    """
    sums = pattern_sums_of(X, patterns)
    if bound == "abs":
        return float(sums.max())
    if bound == "tight":
        return float(np.minimum(sums, pattern_spectral_bounds(X, patterns)).max())
    raise InputError(f"unknown bound {bound!r}")


def qr_projector(B, rel_tol: float = 1e-10) -> np.ndarray:
    """Row-space projector of ``B`` from a column-pivoted QR of ``B^T``."""
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    Q, R, _ = sla.qr(B.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    r = int(np.count_nonzero(d > rel_tol * d[0])) if d.size and d[0] > 0 else 0
    Qr = Q[:, :r]
    return Qr @ Qr.T


def sensitivity_bruteforce(C, B=None, patterns=(), clip: float = 1.0) -> float:
    """Exact sensitivity for scalar gradients by enumerating sign vectors on each pattern.

    Maximizes ``||C d||_{B^+ B}`` over ``d`` supported on a pattern with
    entries ``+-clip``. ``B=None`` means the identity projector.
    """
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if C.shape[1] > BRUTEFORCE_MAX:
        raise TooLarge(f"brute force limited to {BRUTEFORCE_MAX} gradient rows, got {C.shape[1]}")
    P = np.eye(C.shape[0]) if B is None else qr_projector(B)
    if P.shape[0] != C.shape[0]:
        raise ShapeMismatch(f"B has {P.shape[0]} columns, C has {C.shape[0]} rows")
    best = 0.0
    for p in patterns:
        Cp = C[:, np.asarray(p, dtype=np.int64)]
        Xp = np.ascontiguousarray(Cp.T @ P @ Cp)
        best = max(best, kernels.max_sign_quadform(Xp))
    return float(clip) * math.sqrt(max(best, 0.0))


def generalized_gram(C, B, method: str = "svd") -> np.ndarray:
    """``X = C^T B^+ B C``; ``method='lq'`` goes through row selection and an LQ factorization."""
    from .trust import row_selection

    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if B.shape[1] != C.shape[0]:
        raise ShapeMismatch(f"B has {B.shape[1]} columns, C has {C.shape[0]} rows")
    if method == "svd":
        P = mk.projector(B)
    elif method == "lq":
        Bs = row_selection(B) @ B
        _, Q = mk.lq_decompose(Bs)
        Qr = Q[: Bs.shape[0]]
        P = Qr.T @ Qr
    else:
        raise InputError(f"unknown method {method!r}")
    return C.T @ P @ C


# --- unit conversions -----------------------------------------------------------


def gdp(sens: float, sigma: float | None = None, *, nu: float | None = None) -> float:
    """GDP parameter ``mu = sens / nu``; with only ``sigma`` given, ``nu = sigma * sens`` and ``mu = 1/sigma``."""
    if not sens > 0:
        raise NonPositive(f"sensitivity must be positive, got {sens}")
    if nu is not None:
        if not nu > 0:
            raise NonPositive(f"noise scale must be positive, got {nu}")
        return float(sens) / float(nu)
    if sigma is None or not sigma > 0:
        raise NonPositive(f"sigma must be positive, got {sigma}")
    return 1.0 / float(sigma)


def gdp_to_rdp(mu: float, alpha: float) -> float:
    if not alpha > 1:
        raise AlphaOutOfRange(f"alpha must exceed 1, got {alpha}")
    if mu < 0:
        raise NonPositive(f"mu must be >= 0, got {mu}")
    return alpha * mu * mu / 2.0


def delta_of_eps(eps: float, mu: float) -> float:
    """Tightest delta at a given eps for a mu-GDP mechanism."""
    if mu <= 0:
        return 0.0
    a = -eps / mu + mu / 2.0
    b = -eps / mu - mu / 2.0
    return float(np.exp(log_ndtr(a)) - np.exp(eps + log_ndtr(b)))


def gdp_to_eps_delta(mu: float, delta: float) -> float:
    """Smallest ``eps >= 0`` with ``delta_of_eps(eps, mu) <= delta``; ``inf`` when out of range."""
    if not 0.0 < delta < 1.0:
        raise InputError(f"delta must lie in (0, 1), got {delta}")
    if mu < 0:
        raise NonPositive(f"mu must be >= 0, got {mu}")
    if mu == 0 or delta_of_eps(0.0, mu) <= delta:
        return 0.0
    hi = mu * mu / 2.0 + mu * math.sqrt(2.0 * math.log(1.0 / delta)) + 10.0
    if delta_of_eps(hi, mu) > delta:
        return math.inf
    return float(brentq(lambda e: delta_of_eps(e, mu) - delta, 0.0, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps))


# --- reports ----------------------------------------------------------------------


@dataclass
class PrivacyReport:
    mu_gdp: float
    sens: float
    sigma: float
    sens_sq: float
    rdp: list = field(default_factory=list)
    eps_delta: list = field(default_factory=list)
    attackers: tuple = ()
    target: int | None = None
    distance: int | None = None

    def eps_rdp(self, alpha: float = 2.0) -> float:
        for a, e in self.rdp:
            if a == alpha:
                return e
        return gdp_to_rdp(self.mu_gdp, alpha)

    def eps_at(self, delta: float) -> float:
        for d, e in self.eps_delta:
            if d == delta:
                return e
        return gdp_to_eps_delta(self.mu_gdp, delta)

    def to_dict(self) -> dict:
        return {
            "mu_gdp": self.mu_gdp,
            "sens": self.sens,
            "sens_sq": self.sens_sq,
            # the same bound read as unsquared sensitivity, for reference
            "sens_if_unsquared": self.sens_sq,
            "sigma": self.sigma,
            "rdp": [[a, e] for a, e in self.rdp],
            "eps_delta": [[d, _json_float(e)] for d, e in self.eps_delta],
            "attackers": list(self.attackers),
            "target": self.target,
            "distance": self.distance,
        }


def _json_float(x):
    return x if math.isfinite(x) else "inf"


def make_report(sens_sq, sigma, clip=1.0, alphas=(2.0,), deltas=(1e-6,), **pair) -> PrivacyReport:
    """Report for noise std ``sigma * clip`` and squared sensitivity ``sens_sq``."""
    if not sigma > 0:
        raise NonPositive(f"sigma must be positive, got {sigma}")
    sens = math.sqrt(max(sens_sq, 0.0))
    mu = sens / (sigma * clip)
    return PrivacyReport(
        mu_gdp=mu,
        sens=sens,
        sigma=float(sigma),
        sens_sq=float(sens_sq),
        rdp=[(float(a), gdp_to_rdp(mu, a)) for a in alphas],
        eps_delta=[(float(d), gdp_to_eps_delta(mu, d)) for d in deltas],
        **pair,
    )


def _distances_to(g, attackers) -> np.ndarray:
    D = pairwise_distances(g)
    return D[list(attackers)].min(axis=0)


def pndp_account_dsgd(
    gossip: GossipMatrix,
    T: int,
    attackers,
    sigma: float,
    scheme: ParticipationScheme,
    clip: float = 1.0,
    alphas=(2.0,),
    deltas=(1e-6,),
    include_attackers: bool = True,
    bound: str = "abs",
) -> list:
    """Per-target reports for plain decentralized SGD against a coalition of nodes.

    Uses ``C = I`` and ``B_a = P_a A^grad`` so that ``X`` is the row-space
    projector of the observed messages.
    """
    from .trust import message_projector

    attackers = sorted({int(a) for a in attackers})
    if not attackers:
        raise EmptyAttackerSet("PNDP accounting needs at least one attacker")
    g = wl._graph_of(gossip)
    n = g.n
    P = message_projector(g, attackers, T, include_attackers)
    Ba = wl.dsgd_workload(gossip, T).apply(P.T).T
    X = mk.projector(Ba)
    dist = _distances_to(g, attackers)
    reports = []
    for u in range(n):
        if u in attackers:
            continue
        pats = enumerate_patterns(scheme, T, u, n)
        s2 = float(clip) ** 2 * pattern_bound(X, pats, bound)
        reports.append(
            make_report(s2, sigma, clip, alphas, deltas,
                        attackers=tuple(attackers), target=u, distance=int(dist[u]))
        )
    return reports


def pndp_account(view, n: int, sigma: float, scheme: ParticipationScheme, clip=1.0,
                 alphas=(2.0,), deltas=(1e-6,), graph=None, bound: str = "abs") -> list:
    """Per-target reports from any attacker view (``X = C^T B^+ B C``)."""
    X = generalized_gram(view.C, view.B)
    T = view.n_gradients // n
    dist = _distances_to(graph, view.attackers) if graph is not None else None
    reports = []
    for u in range(n):
        if u in view.attackers:
            continue
        pats = enumerate_patterns(scheme, T, u, n)
        s2 = float(clip) ** 2 * pattern_bound(X, pats, bound)
        reports.append(
            make_report(s2, sigma, clip, alphas, deltas, attackers=tuple(view.attackers), target=u,
                        distance=None if dist is None else int(dist[u]))
        )
    return reports


def ldp_account(algo, C=None, sigma: float = 1.0, scheme: ParticipationScheme | None = None,
                clip: float = 1.0, alphas=(2.0,), deltas=(1e-6,)) -> PrivacyReport:
    """Worst-case report over all nodes when every message is public.

    ``C`` overrides the algorithm's own encoder: a T x T local matrix is
    expanded to ``C kron I_n``, and the decoder becomes ``B = A C^+``.
    """
    from .trust import TrustModel, build_view

    scheme = scheme or ParticipationScheme.full()
    n, T = algo.n, algo.T
    view = build_view(algo, TrustModel.ldp())
    if C is None:
        Cf, B = view.C, view.B
    else:
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        Cf = mk.kron(C, np.eye(n)) if C.shape == (T, T) else C
        if Cf.shape[1] != view.A.shape[1]:
            raise ShapeMismatch(f"C has {Cf.shape[1]} columns, expected {view.A.shape[1]}")
        B = view.A @ mk.pseudoinverse(Cf)
    P = None if mk.rank(B) == B.shape[1] else mk.projector(B)
    pats = [p for u in range(n) for p in enumerate_patterns(scheme, T, u, n)]
    s2 = sensitivity_sq_bound(Cf, P, pats, clip)
    return make_report(s2, sigma, clip, alphas, deltas)


def distance_buckets(reports, key=lambda r: r.eps_rdp(2.0)) -> dict:
    """``{distance: (min, mean, max)}`` of ``key`` over targets at that hop distance."""
    by = {}
    for r in reports:
        by.setdefault(r.distance, []).append(key(r))
    return {d: (min(v), float(np.mean(v)), max(v)) for d, v in sorted(by.items())}
