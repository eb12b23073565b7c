"""Attacker views ``O = A G + B Z`` with ``A = B C`` for each algorithm and trust model.

Views keep the natural (time-major, node-minor) ordering of gradients and
noise. Attacker indices are recorded in the view instead of physically moving
the attackers' rows first; :meth:`AttackerView.attacker_first_permutation`
produces that reordering when a comparison needs it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import matrixkit as mk
from . import workloads as wl
from .errors import (
    EmptyAttackerSet,
    FactorizationFailed,
    InputError,
    NoExactFactorization,
    ShapeMismatch,
    UnsupportedCombination,
)
from .graphs import Graph, GossipMatrix

RESIDUAL_TOL = 1e-8
TRUST_KINDS = ("ldp", "pndp", "secldp")

SUPPORTED = {
    "ldp": set(wl.ALGORITHMS),
    "pndp": {"dsgd", "antipgd", "muffliato", "zipdl"},
    "secldp": {"decor"},
}


@dataclass(frozen=True)
class TrustModel:
    kind: str
    attackers: tuple = ()
    known_noise_columns: tuple = ()

    def __post_init__(self):
        if self.kind not in TRUST_KINDS:
            raise InputError(f"unknown trust model {self.kind!r}")
        att = tuple(sorted({int(a) for a in self.attackers}))
        if self.kind != "ldp" and not att:
            raise EmptyAttackerSet(f"{self.kind} needs at least one attacker")
        object.__setattr__(self, "attackers", att)
        object.__setattr__(self, "known_noise_columns", tuple(sorted({int(c) for c in self.known_noise_columns})))

    @classmethod
    def ldp(cls):
        return cls("ldp")

    @classmethod
    def pndp(cls, attackers):
        return cls("pndp", tuple(attackers))

    @classmethod
    def secldp(cls, attackers, known_noise_columns=()):
        return cls("secldp", tuple(attackers), tuple(known_noise_columns))


@dataclass(frozen=True)
class AlgorithmSpec:
    kind: str
    gossip: GossipMatrix
    T: int
    K: int = 1
    orientation_seed: int = 0
    averaging: object = "default"

    def __post_init__(self):
        if self.kind not in wl.ALGORITHMS:
            raise InputError(f"unknown algorithm {self.kind!r}")
        if self.T < 1:
            raise InputError("T must be >= 1")
        if self.kind == "muffliato" and self.K < 1:
            raise InputError("Muffliato needs K >= 1")

    @property
    def n(self) -> int:
        return self.gossip.n

    @property
    def graph(self) -> Graph:
        return wl._graph_of(self.gossip)


@dataclass
class AttackerView:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    row_labels: list
    attackers: tuple = ()
    raw_A: np.ndarray | None = None
    known_gradients: np.ndarray | None = None
    residual: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_gradients(self) -> int:
        return self.A.shape[1]

    def attacker_first_permutation(self, n: int) -> np.ndarray:
        """Gradient-index permutation placing the attackers' rows first (time-major within each group)."""
        T = self.n_gradients // n
        att = set(self.attackers)
        first = [t * n + a for a in sorted(att) for t in range(T)]
        rest = [t * n + u for u in range(n) if u not in att for t in range(T)]
        return np.array(first + rest, dtype=np.int64)


def factorization_residual(A, B, C) -> float:
    A = np.asarray(A)
    return float(np.linalg.norm(A - B @ C) / max(1.0, np.linalg.norm(A)))


def message_projector(g: Graph, attackers, T: int, include_attackers: bool = True) -> np.ndarray:
    """``I_T kron K_A`` selecting the messages seen by the attacker set.

    ``K_A`` has one row per node in the sorted union of the attackers'
    neighborhoods; with ``include_attackers`` (default) the attackers' own
    rows are added too, which carries no extra information since an
    attacker's own message is a combination of what it received and its own
    gradient and noise.
    """
    attackers = sorted({int(a) for a in attackers})
    if not attackers:
        raise EmptyAttackerSet("message projector needs at least one attacker")
    seen = set()
    for a in attackers:
        seen.update(g.neighbors(a))
        if include_attackers:
            seen.add(a)
    rows = sorted(seen)
    K = np.zeros((len(rows), g.n))
    K[np.arange(len(rows)), rows] = 1.0
    return mk.kron(np.eye(T), K)


def observed_nodes(g: Graph, attackers, include_attackers: bool = True) -> list:
    seen = set()
    for a in attackers:
        seen.update(g.neighbors(a))
        if include_attackers:
            seen.add(a)
    return sorted(seen)


def reduce_view(A, B, known_gradients) -> np.ndarray:
    """Remove known gradient directions: ``A (I - K^+ K)``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != A.shape[0]:
        raise ShapeMismatch(f"A has {A.shape[0]} rows, B has {B.shape[0]}")
    K = np.asarray(known_gradients, dtype=np.float64)
    if K.size == 0:
        return A.copy()
    K = np.atleast_2d(K)
    if K.shape[1] != A.shape[1]:
        raise ShapeMismatch(f"K_G has {K.shape[1]} columns, A has {A.shape[1]}")
    return A - (A @ mk.pseudoinverse(K)) @ K


def row_selection(B, rel_tol: float = 1e-10) -> np.ndarray:
    """Selector ``P`` keeping, in order, each row of ``B`` independent of those already kept.

    Independence is decided by the residual of the row after projection on
    the kept rows (Gram-Schmidt, re-orthogonalized once) against
    ``rel_tol * ||row||``.
    """
    B = np.asarray(B, dtype=np.float64)
    if B.size == 0:
        raise ShapeMismatch("B must be nonempty")
    basis = np.empty((0, B.shape[1]))
    picked = []
    for i, row in enumerate(B):
        norm = np.linalg.norm(row)
        if norm == 0.0:
            continue
        r = row - basis.T @ (basis @ row)
        r = r - basis.T @ (basis @ r)
        res = np.linalg.norm(r)
        if res > rel_tol * norm:
            basis = np.vstack([basis, r / res])
            picked.append(i)
    P = np.zeros((len(picked), B.shape[0]))
    P[np.arange(len(picked)), picked] = 1.0
    return P


def solve_C(A, B) -> np.ndarray:
    """Least-squares ``C = B^+ A``; raises unless ``A = B C`` holds to 1e-8 relative."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise ShapeMismatch(f"A has {A.shape[0]} rows, B has {B.shape[0]}")
    C = mk.pseudoinverse(B) @ A
    res = factorization_residual(A, B, C)
    if res > RESIDUAL_TOL:
        raise NoExactFactorization(f"no C with A = BC (relative residual {res:.3e})")
    return C


# --- view assembly ------------------------------------------------------------


def _select_rows(idx, size) -> np.ndarray:
    S = np.zeros((len(idx), size))
    S[np.arange(len(idx)), idx] = 1.0
    return S


def _attacker_rows(attackers, n, T, per_node=1):
    """Indices (time-major) of the attackers' entries in a per-node stacked vector."""
    return [(t * n + a) * per_node + k for t in range(T) for a in attackers for k in range(per_node)]


def _ldp_parts(algo: AlgorithmSpec):
    W, T, n = algo.gossip.W, algo.T, algo.n
    if algo.kind == "dsgd":
        A = wl.dsgd_workload(W, T).materialize()
        return A, A.copy(), np.eye(n * T)
    if algo.kind == "muffliato":
        A = wl.muffliato_workload(W, T, algo.K).materialize()
        return A, A.copy(), np.eye(n * T)
    if algo.kind == "antipgd":
        A, B, C = wl.antipgd_factorization(W, T)
        return A.materialize(), B, C
    if algo.kind == "decor":
        A, B, C = wl.decor_factorization(algo.graph, T, algo.orientation_seed, algo.gossip)
        return A.materialize(), B, C
    A, B, C = wl.zipdl_factorization(algo.gossip, T, algo.averaging)
    return A, B, C


def _msg_labels(algo: AlgorithmSpec, nodes, rounds):
    return [f"msg[t={t},node={v}]" for t in range(rounds) for v in nodes]


def build_view(algo: AlgorithmSpec, trust: TrustModel, include_attackers: bool = True) -> AttackerView:
    """Attacker view for one (algorithm, trust model) pair, reduced and verified."""
    if algo.kind not in SUPPORTED[trust.kind]:
        raise UnsupportedCombination(f"{algo.kind} under {trust.kind} is not supported")
    n, T = algo.n, algo.T
    for a in trust.attackers:
        if not 0 <= a < n:
            raise InputError(f"attacker {a} out of range for n={n}")

    if trust.kind == "ldp":
        A, B, C = _ldp_parts(algo)
        if algo.kind == "zipdl":
            g = algo.graph
            labels = [f"msg[t={t},{s // n}->{s % n}]" for t in range(T) for s in wl.zipdl_active_slots(g)]
        else:
            labels = _msg_labels(algo, range(n), A.shape[0] // n)
        view = AttackerView(A, B, C, labels, raw_A=A, meta={"algorithm": algo.kind, "trust": "ldp"})
    elif trust.kind == "pndp":
        view = _pndp_view(algo, trust.attackers, include_attackers)
    else:
        view = _secldp_decor_view(algo, trust, include_attackers)

    view.residual = factorization_residual(view.A, view.B, view.C)
    if view.residual > RESIDUAL_TOL:
        raise FactorizationFailed(
            f"{algo.kind}/{trust.kind}: residual {view.residual:.3e} exceeds {RESIDUAL_TOL}"
        )
    view.meta.update(
        residual=view.residual,
        rank_A=mk.rank(view.A) if view.A.size else 0,
        rank_B=mk.rank(view.B) if view.B.size else 0,
        shape_A=list(view.A.shape),
        shape_B=list(view.B.shape),
        shape_C=list(view.C.shape),
    )
    return view


def _pndp_view(algo: AlgorithmSpec, attackers, include_attackers) -> AttackerView:
    n, T = algo.n, algo.T
    g = algo.graph
    att = list(attackers)
    nG = n * T
    A_ldp, B_ldp, _ = _ldp_parts(algo)

    if algo.kind == "zipdl":
        active = wl.zipdl_active_slots(g)
        pos = {int(s): k for k, s in enumerate(active)}
        slots = sorted(
            {n * j + a for a in att for j in g.neighbors(a)}
            | ({n * a + j for a in att for j in g.neighbors(a)} if include_attackers else set())
        )
        s = active.size
        msg_rows = [t * s + pos[sl] for t in range(T) for sl in slots]
        labels = [f"msg[t={t},{sl // n}->{sl % n}]" for t in range(T) for sl in slots]
        noise_rows = _attacker_rows(att, n, T, per_node=n)
        nZ = n * n * T
    else:
        nodes = observed_nodes(g, att, include_attackers)
        rounds = A_ldp.shape[0] // n
        msg_rows = [r * n + v for r in range(rounds) for v in nodes]
        labels = _msg_labels(algo, nodes, rounds)
        noise_rows = _attacker_rows(att, n, T)
        nZ = n * T

    grad_rows = _attacker_rows(att, n, T)
    KG = _select_rows(grad_rows, nG)
    KZ = _select_rows(noise_rows, nZ)
    m = len(msg_rows)
    A_raw = np.vstack([A_ldp[msg_rows], KG, np.zeros((KZ.shape[0], nG))])
    B = np.vstack([B_ldp[msg_rows], np.zeros((KG.shape[0], nZ)), KZ])
    A = reduce_view(A_raw, B, np.hstack([np.zeros((KG.shape[0], 0)), KG]))

    keep = np.ones(nG)
    keep[grad_rows] = 0.0
    if algo.kind in ("dsgd", "muffliato"):
        C = np.diag(keep)
    elif algo.kind == "antipgd":
        # C = D^{-1} diag(0, I) with D the first-difference matrix (kron I_n)
        C = mk.kron(wl.prefix_sum_matrix(T), np.eye(n)) * keep[None, :]
    else:
        C = solve_C(A, B)

    labels = labels + [f"grad[t={t},node={a}]" for t in range(T) for a in att]
    labels += [f"noise[{r}]" for r in noise_rows]
    return AttackerView(
        A, B, C, labels, attackers=tuple(att), raw_A=A_raw, known_gradients=KG,
        meta={"algorithm": algo.kind, "trust": "pndp", "attackers": att, "n_messages": m},
    )


def decor_known_secrets(g: Graph, attackers, T: int) -> list:
    """Secret columns (offset into the secret block) on edges incident to any attacker."""
    att = set(attackers)
    edges = [e for e, (u, v) in enumerate(g.edges) if u in att or v in att]
    return [t * g.m + e for t in range(T) for e in edges]


def _secldp_decor_view(algo: AlgorithmSpec, trust: TrustModel, include_attackers) -> AttackerView:
    n, T = algo.n, algo.T
    g = algo.graph
    att = list(trust.attackers)
    nG = n * T
    Agrad = wl.dsgd_workload(algo.gossip.W, T).materialize()
    S = wl.decor_noise_map(g, T, algo.orientation_seed)
    nZ = S.shape[1]

    nodes = observed_nodes(g, att, include_attackers)
    msg_rows = [t * n + v for t in range(T) for v in nodes]
    grad_rows = _attacker_rows(att, n, T)
    secrets = sorted(set(decor_known_secrets(g, att, T)) | {c - nG for c in trust.known_noise_columns if c >= nG})
    local_known = sorted(set(grad_rows) | {c for c in trust.known_noise_columns if c < nG})

    KG = _select_rows(grad_rows, nG)
    KZ = _select_rows(local_known, nZ)
    E = _select_rows([nG + c for c in secrets], nZ)
    A_raw = np.vstack([Agrad[msg_rows], KG, np.zeros((KZ.shape[0] + E.shape[0], nG))])
    B = np.vstack([Agrad[msg_rows] @ S, np.zeros((KG.shape[0], nZ)), KZ, E])
    A = reduce_view(A_raw, B, KG)

    keep = np.ones(nG)
    keep[grad_rows] = 0.0
    C = np.vstack([np.diag(keep), np.zeros((nZ - nG, nG))])
    if len(local_known) > len(grad_rows):
        # extra known local noise beyond the attackers' own: no closed form
        C = solve_C(A, B)

    labels = [f"msg[t={t},node={v}]" for t in range(T) for v in nodes]
    labels += [f"grad[t={t},node={a}]" for t in range(T) for a in att]
    labels += [f"noise[{r}]" for r in local_known]
    labels += [f"secret[t={c // g.m},edge={g.edges[c % g.m]}]" for c in secrets]
    return AttackerView(
        A, B, C, labels, attackers=tuple(att), raw_A=A_raw, known_gradients=KG,
        meta={
            "algorithm": "decor", "trust": "secldp", "attackers": att,
            "known_secrets": len(secrets), "n_messages": len(msg_rows),
        },
    )
