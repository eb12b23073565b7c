"""Decentralized SGD with locally correlated Gaussian noise on a regression task.

Each step every node clips its gradient, adds ``sum_{tau<=t} Cinv[t, tau] z^tau``
with ``z ~ N(0, (sigma*clip)^2 I)`` drawn from its own counter-based stream,
takes a local step and then gossips with ``W``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import matrixkit as mk
from .accounting import ParticipationScheme, make_report
from .errors import InputError, MissingColumn, NonNumeric, ParseError, SingularC, TooManyNodes
from .graphs import GossipMatrix

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
_STD_GUARD = 1e-12

# stream purposes for the counter-based RNG
_NOISE, _SAMPLE, _INIT = 1, 2, 3


# --- data ---------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    train: np.ndarray
    test: np.ndarray
    columns: tuple = ()

    @property
    def d_in(self) -> int:
        return self.X.shape[1]


def _standardize(X, y, train):
    mean = X[train].mean(axis=0)
    std = X[train].std(axis=0)
    flat = std < _STD_GUARD
    if flat.any():
        log.warning("%d constant feature column(s) standardized to zero", int(flat.sum()))
    std = np.where(flat, 1.0, std)
    Xs = (X - mean) / std
    Xs[:, flat] = 0.0
    ym, ys = y[train].mean(), y[train].std()
    ys = ys if ys >= _STD_GUARD else 1.0
    return Xs, (y - ym) / ys


def _split(N, test_fraction, seed):
    if not 0.0 <= test_fraction < 1.0:
        raise InputError(f"test_fraction must be in [0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(N)
    n_test = int(round(N * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def make_dataset(X, y, test_fraction=0.2, seed=0, columns=()) -> Dataset:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    train, test = _split(len(y), test_fraction, seed)
    Xs, ys = _standardize(X, y, train)
    return Dataset(Xs, ys, train, test, tuple(columns))


def load_csv_dataset(path, target_column: str, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Numeric CSV with a header row; every non-target column is a feature."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(1, "empty file") from None
        if target_column not in header:
            raise MissingColumn(f"column {target_column!r} not in header {header}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(line_no, f"expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise NonNumeric(f"line {line_no}: non-numeric value in {row}") from None
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    if not np.all(np.isfinite(data)):
        raise NonNumeric("missing or non-finite values")
    if data.shape[0] < 2:
        raise InputError("need at least two data rows")
    j = header.index(target_column)
    feats = [c for i, c in enumerate(header) if i != j]
    return make_dataset(np.delete(data, j, axis=1), data[:, j], test_fraction, seed, feats)


def synthetic_linear_dataset(N=2000, d_in=8, noise=0.1, seed=0, test_fraction=0.2) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, d_in))
    w = rng.standard_normal(d_in)
    y = X @ w + noise * rng.standard_normal(N)
    return make_dataset(X, y, test_fraction, seed)


def partition_uniform(ds: Dataset, n: int, seed: int = 0) -> list:
    """Random near-equal shards of the training indices (larger shards first)."""
    if n < 1:
        raise InputError("n must be >= 1")
    if n > ds.train.size:
        raise TooManyNodes(f"{n} nodes but only {ds.train.size} training points")
    perm = np.random.default_rng(seed).permutation(ds.train)
    return [np.asarray(s) for s in np.array_split(perm, n)]


# --- models ---------------------------------------------------------------------


class LinearModel:
    """``y = w.x + b``; parameters ``[w, b]``."""

    def __init__(self, d_in: int):
        self.d_in = d_in
        self.size = d_in + 1

    def init(self, rng) -> np.ndarray:
        return np.zeros(self.size)

    def predict(self, theta, X):
        return X @ theta[:-1] + theta[-1]

    def per_sample_grads(self, theta, X, y):
        r = 2.0 * (self.predict(theta, X) - y)
        return np.hstack([r[:, None] * X, r[:, None]])


class MLPModel:
    """One ReLU hidden layer; parameters laid out as ``[W1 (h x d), b1, w2, b2]``."""

    def __init__(self, d_in: int, hidden: int = 64):
        self.d_in = d_in
        self.hidden = hidden
        self.size = hidden * d_in + 2 * hidden + 1

    def unpack(self, theta):
        h, d = self.hidden, self.d_in
        W1 = theta[: h * d].reshape(h, d)
        b1 = theta[h * d: h * d + h]
        w2 = theta[h * d + h: h * d + 2 * h]
        return W1, b1, w2, theta[-1]

    def init(self, rng) -> np.ndarray:
        h, d = self.hidden, self.d_in
        W1 = rng.standard_normal((h, d)) * math.sqrt(2.0 / d)
        w2 = rng.standard_normal(h) * math.sqrt(1.0 / h)
        return np.concatenate([W1.ravel(), np.zeros(h), w2, [0.0]])

    def predict(self, theta, X):
        W1, b1, w2, b2 = self.unpack(theta)
        return np.maximum(X @ W1.T + b1, 0.0) @ w2 + b2

    def per_sample_grads(self, theta, X, y):
        W1, b1, w2, b2 = self.unpack(theta)
        pre = X @ W1.T + b1
        act = np.maximum(pre, 0.0)
        r = 2.0 * (act @ w2 + b2 - y)
        dpre = (r[:, None] * w2[None, :]) * (pre > 0)
        gW1 = dpre[:, :, None] * X[:, None, :]
        return np.hstack([gW1.reshape(len(y), -1), dpre, r[:, None] * act, r[:, None]])


def make_model(kind: str, d_in: int, hidden: int = 64):
    if kind == "linear":
        return LinearModel(d_in)
    if kind == "mlp":
        return MLPModel(d_in, hidden)
    raise InputError(f"unknown model {kind!r}")


def clip_rows(G, clip: float) -> np.ndarray:
    """Scale each row to norm at most ``clip``."""
    norms = np.linalg.norm(G, axis=1)
    scale = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
    return G * scale[:, None]


# --- randomness -------------------------------------------------------------------


def stream(seed: int, purpose: int, node: int = 0, step: int = 0) -> np.random.Generator:
    """Independent generator for one (purpose, node, step) counter."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose, node, step))
    return np.random.Generator(np.random.Philox(ss))


def node_noise(seed, node, step, size, scale) -> np.ndarray:
    return scale * stream(seed, _NOISE, node, step).standard_normal(size)


def correlated_noise(Cinv, Z, t: int) -> np.ndarray:
    """``sum_{tau <= t} Cinv[t, tau] Z[tau]`` for stacked draws ``Z`` (steps first)."""
    return np.tensordot(Cinv[t, : t + 1], Z[: t + 1], axes=1)


# --- training ------------------------------------------------------------------------


@dataclass
class SimConfig:
    gossip: GossipMatrix
    T: int
    eta: float = 0.05
    clip: float = 1.0
    sigma: float = 0.0
    C_local: np.ndarray | None = None
    scheme: ParticipationScheme | None = None
    seed: int = 0
    batch: int = 1
    model: str = "linear"
    hidden: int = 64
    sampling: str = "cyclic"
    partition_seed: int = 0

    def snapshot(self) -> dict:
        C = np.eye(self.T) if self.C_local is None else np.asarray(self.C_local)
        return {
            "W": np.asarray(self.gossip.W).tolist(),
            "T": self.T, "eta": self.eta, "clip": self.clip, "sigma": self.sigma,
            "C_local": hashlib.sha256(np.ascontiguousarray(C, dtype=np.float64).tobytes()).hexdigest(),
            "scheme": None if self.scheme is None else self.scheme.describe(),
            "seed": self.seed, "batch": self.batch, "model": self.model, "hidden": self.hidden,
            "sampling": self.sampling, "partition_seed": self.partition_seed,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainingTrace:
    test_loss: np.ndarray
    train_loss: np.ndarray
    node_test_loss: np.ndarray
    final_models: np.ndarray
    config_hash: str
    seed: int
    diverged: bool = False
    wallclock_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def final_loss(self, last: int = 50) -> float:
        if self.diverged:
            return math.inf
        return float(np.mean(self.test_loss[-last:]))

    def write_csv(self, path, wallclock: bool = False) -> None:
        """Trace CSV; ``wallclock_ms`` is written as 0 unless asked for, keeping files reproducible."""
        with open(path, "w", newline="\n") as fh:
            fh.write("step,test_mse,train_mse,wallclock_ms\n")
            for t, (a, b) in enumerate(zip(self.test_loss, self.train_loss)):
                w = self.wallclock_ms[t] if wallclock and t < self.wallclock_ms.size else 0.0
                fh.write(f"{t},{float(a)!r},{float(b)!r},{w:.3f}\n")


def _mse(model, theta, X, y) -> float:
    r = model.predict(theta, X) - y
    return float(np.mean(r * r))


def run_mf_dsgd(config: SimConfig, ds: Dataset) -> TrainingTrace:
    W = np.asarray(config.gossip.W, dtype=np.float64)
    n, T = W.shape[0], config.T
    if T < 1:
        raise InputError("T must be >= 1")
    if config.eta <= 0 or config.clip <= 0 or config.sigma < 0 or config.batch < 1:
        raise InputError("eta and clip must be positive, sigma non-negative, batch >= 1")
    C = np.eye(T) if config.C_local is None else np.asarray(config.C_local, dtype=np.float64)
    if C.shape != (T, T):
        raise InputError(f"C_local must be {T}x{T}, got {C.shape}")
    if np.any(np.abs(np.diag(C)) < 1e-14):
        raise SingularC("C_local is singular")
    Cinv = np.linalg.inv(C)
    model = make_model(config.model, ds.d_in, config.hidden)
    P = model.size
    shards = partition_uniform(ds, n, config.partition_seed)
    orders = [stream(config.seed, _SAMPLE, u, 0).permutation(s) for u, s in enumerate(shards)]
    Xte, yte = ds.X[ds.test], ds.y[ds.test]
    Xtr, ytr = ds.X[ds.train], ds.y[ds.train]

    theta = np.tile(model.init(stream(config.seed, _INIT)), (n, 1))
    noisy = config.sigma > 0
    if noisy:
        mk.check_budget(T, n, P, what="noise history")
        Z = np.zeros((T, n, P))
    scale = config.sigma * config.clip
    test_loss = np.full(T, np.nan)
    train_loss = np.full(T, np.nan)
    node_test = np.full((T, n), np.nan)
    wall = np.zeros(T)
    diverged = False
    grads = np.empty((n, P))
    t0 = time.perf_counter()
    for t in range(T):
        for u in range(n):
            order = orders[u]
            if config.sampling == "cyclic":
                pick = order[(t * config.batch + np.arange(config.batch)) % order.size]
            else:
                pick = stream(config.seed, _SAMPLE, u, t + 1).choice(order, config.batch, replace=False)
            g = model.per_sample_grads(theta[u], ds.X[pick], ds.y[pick])
            grads[u] = clip_rows(g, config.clip).mean(axis=0)
        if noisy:
            for u in range(n):
                Z[t, u] = node_noise(config.seed, u, t, P, scale)
            half = theta - config.eta * (grads + correlated_noise(Cinv, Z, t))
        else:
            half = theta - config.eta * grads
        theta = W @ half
        avg = theta.mean(axis=0)
        test_loss[t] = _mse(model, avg, Xte, yte)
        train_loss[t] = _mse(model, avg, Xtr, ytr)
        node_test[t] = [_mse(model, theta[u], Xte, yte) for u in range(n)]
        wall[t] = (time.perf_counter() - t0) * 1e3
        if not math.isfinite(test_loss[t]) or test_loss[t] > DIVERGENCE_LOSS:
            diverged = True
            log.warning("diverged at step %d (test loss %.3g)", t, test_loss[t])
            test_loss, train_loss, node_test, wall = test_loss[: t + 1], train_loss[: t + 1], node_test[: t + 1], wall[: t + 1]
            break
    return TrainingTrace(test_loss, train_loss, node_test, theta, config.digest(), config.seed, diverged, wall)


# --- comparisons -----------------------------------------------------------------------

METHODS = ("nonprivate", "dpdsgd", "antipgd", "mafalda", "dmf")


def method_correlations(gossip, T, scheme, methods=METHODS, optimizer=None) -> dict:
    """Local correlation per method, each scaled to unit squared sensitivity under ``scheme``."""
    from . import mafalda as mf

    out = {}
    for m in methods:
        if m in ("nonprivate", "dpdsgd"):
            C = np.eye(T)
        elif m == "antipgd":
            C = mf.antipgd_local(T).C
        elif m == "mafalda":
            C = mf.optimize_correlation(mf.gram_workload(gossip, T), scheme, optimizer).C
        elif m == "dmf":
            C = mf.dmf_baseline(T, scheme, optimizer).C
        else:
            raise InputError(f"unknown method {m!r}")
        out[m] = mf.normalize(C, scheme)
    return out


def run_comparison(gossip, ds: Dataset, T: int, sigma: float, seeds, scheme: ParticipationScheme,
                   methods=METHODS, correlations=None, delta=1e-6, last=50, **sim_kw) -> dict:
    """Final test loss (mean over the last ``last`` steps) per method, mean and std over seeds."""
    from .mafalda import sens_sq

    Cs = correlations or method_correlations(gossip, T, scheme, methods)
    rows, traces = [], {}
    for m in methods:
        sig = 0.0 if m == "nonprivate" else sigma
        finals = []
        for s in seeds:
            cfg = SimConfig(gossip, T, sigma=sig, C_local=Cs[m], scheme=scheme, seed=int(s), **sim_kw)
            tr = run_mf_dsgd(cfg, ds)
            traces[(m, int(s))] = tr
            finals.append(tr.final_loss(last))
        finals = np.array(finals)
        eps = math.inf
        if sig > 0:
            eps = make_report(sens_sq(Cs[m], scheme), sig, 1.0, deltas=(delta,)).eps_at(delta)
        rows.append({
            "method": m, "sigma": sig, "mean_final": float(np.mean(finals)),
            "std_final": float(np.std(finals)), "diverged": int(np.sum(~np.isfinite(finals))),
            "eps_ldp": eps, "delta": delta,
        })
    return {"rows": rows, "traces": traces, "correlations": Cs}
