"""Command-line entry point.

Exit codes: 0 ok, 2 usage, 3 bad input, 4 numerical failure, 5 memory budget,
6 replay mismatch. Every command writes a run manifest next to its primary
output; JSON outputs carry the manifest hash.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import accounting as acc
from . import graphs as gr
from . import mafalda as mf
from . import matrixkit as mk
from . import simulator as sim
from . import trust as tr
from . import workloads as wl
from .errors import DpmeshError, InputError, NumericError, OutOfMemory

log = logging.getLogger("dpmesh")

EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC, EXIT_MEMORY, EXIT_REPLAY = 2, 3, 4, 5, 6
# settings that never change results and are left out of the manifest hash
_NON_SEMANTIC = {"threads", "config", "manifest", "log_level", "func", "cmd", "sub"}


# --- helpers ---------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _seed_list(text):
    """``1..5`` or ``1,2,3``."""
    if ".." in text:
        a, b = text.split("..", 1)
        try:
            return list(range(int(a), int(b) + 1))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed range {text!r}") from None
    return _int_list(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _finite(x):
    """JSON has no infinity; spell it as a string."""
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def write_csv_rows(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


class Run:
    """Collects inputs/outputs of one command and writes its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs: dict = {}
        self.outputs: list = []
        self.t0 = time.time()

    def config(self) -> dict:
        return {k: v for k, v in sorted(vars(self.args).items()) if k not in _NON_SEMANTIC}

    def add_input(self, path):
        if path and path != "florentine" and not str(path).startswith("synthetic") and Path(path).is_file():
            self.inputs[str(path)] = sha256_file(path)

    @property
    def hash(self) -> str:
        body = {
            "command": self.args.cmd + ("/" + self.args.sub if getattr(self.args, "sub", None) else ""),
            "config": self.config(),
            "versions": _versions(),
            "inputs": self.inputs,
        }
        return hashlib.sha256(json.dumps(body, sort_keys=True, default=_json_default).encode()).hexdigest()

    def out(self, path) -> str:
        self.outputs.append(str(path))
        return str(path)

    def finish(self, primary) -> str:
        path = self.args.manifest or f"{primary}.manifest.json"
        manifest = {
            "kind": "manifest",
            "manifest_hash": self.hash,
            "command": self.argv,
            "config": self.config(),
            "versions": _versions(),
            "inputs": self.inputs,
            "outputs": {p: sha256_file(p) for p in self.outputs},
            "wallclock_s": round(time.time() - self.t0, 3),
        }
        write_json(path, manifest)
        return path


def _versions() -> dict:
    import scipy

    return {"dpmesh": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _gossip(args):
    g = gr.resolve_graph(args.graph)
    return g, gr.gossip_from_graph(g, args.gossip_scheme)


def _algo(args, gossip):
    return tr.AlgorithmSpec(args.algo, gossip, args.T, K=args.K, orientation_seed=args.orientation_seed)


# --- commands --------------------------------------------------------------------------


def cmd_graph_gen(args, run):
    if args.kind == "er":
        g = gr.erdos_renyi(args.n, args.p, args.seed)
    elif args.kind == "complete":
        g = gr.complete_graph(args.n)
    else:
        g = gr.ring_graph(args.n)
    gr.save_edge_list(g, run.out(args.out))
    return args.out


def cmd_graph_info(args, run):
    g = gr.resolve_graph(args.graph)
    run.add_input(args.graph)
    D = gr.pairwise_distances(g) if g.is_connected() else None
    info = {
        "kind": "graph_info", "manifest_hash": run.hash, "n": g.n, "m": g.m,
        "connected": g.is_connected(), "degrees": g.degrees().tolist(),
        "diameter": None if D is None else int(D.max()), "digest": g.digest(),
        "labels": list(g.labels), "dropped_self_loops": g.dropped_self_loops,
    }
    if args.out:
        write_json(run.out(args.out), info)
        return args.out
    json.dump(info, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return None


def cmd_workload(args, run):
    g, W = _gossip(args)
    run.add_input(args.graph)
    if args.gram:
        M = mf.gram_workload(W, args.T).H
    else:
        M, _, _ = tr._ldp_parts(_algo(args, W))
    mk.write_matrix_csv(run.out(args.out), M)
    return args.out


def cmd_trust_view(args, run):
    g, W = _gossip(args)
    run.add_input(args.graph)
    trust = _trust_model(args)
    view = tr.build_view(_algo(args, W), trust, include_attackers=not args.strict)
    pfx = args.out_prefix
    for name, M in (("A", view.A), ("B", view.B), ("C", view.C)):
        mk.write_matrix_csv(run.out(f"{pfx}_{name}.csv"), M)
    meta = {"kind": "view_meta", "manifest_hash": run.hash, "row_labels": view.row_labels,
            "attackers": list(view.attackers)}
    meta.update({k: v for k, v in view.meta.items() if k not in ("attackers",)})
    write_json(run.out(f"{pfx}_meta.json"), meta)
    return f"{pfx}_meta.json"


def _trust_model(args):
    if args.trust == "ldp":
        return tr.TrustModel.ldp()
    if not args.attackers:
        raise InputError(f"--trust {args.trust} needs --attackers")
    if args.trust == "pndp":
        return tr.TrustModel.pndp(args.attackers)
    return tr.TrustModel.secldp(args.attackers)


def cmd_account(args, run):
    g, W = _gossip(args)
    run.add_input(args.graph)
    scheme = acc.ParticipationScheme.parse(args.participation)
    alphas, deltas = tuple(args.alphas), (args.delta,)
    algo = _algo(args, W)
    if args.trust == "ldp":
        reports = [acc.ldp_account(algo, None, args.sigma, scheme, args.clip, alphas, deltas)]
    else:
        coalitions = [[a] for a in range(g.n)] if args.each_attacker else [args.attackers]
        if not args.each_attacker and not args.attackers:
            raise InputError(f"--trust {args.trust} needs --attackers (or --each-attacker)")
        reports = []
        for att in coalitions:
            if args.algo == "dsgd" and args.trust == "pndp":
                reports += acc.pndp_account_dsgd(W, args.T, att, args.sigma, scheme, args.clip,
                                                 alphas, deltas, include_attackers=not args.strict,
                                                 bound=args.bound)
            else:
                trust = tr.TrustModel.pndp(att) if args.trust == "pndp" else tr.TrustModel.secldp(att)
                view = tr.build_view(algo, trust, include_attackers=not args.strict)
                reports += acc.pndp_account(view, g.n, args.sigma, scheme, args.clip, alphas, deltas, g,
                                            bound=args.bound)
    buckets = {}
    if args.trust != "ldp":
        b = acc.distance_buckets(reports, key=lambda r: r.eps_rdp(2.0))
        buckets = {str(d): {"min": v[0], "mean": v[1], "max": v[2]} for d, v in b.items()}
    report = {
        "kind": "account_report", "manifest_hash": run.hash, "algo": args.algo, "trust": args.trust,
        "T": args.T, "sigma": args.sigma, "clip": args.clip, "participation": scheme.describe(),
        "graph": g.digest(), "n": g.n,
        "reports": [{k: _finite(v) for k, v in r.to_dict().items()} for r in reports],
        "distance_buckets_rdp2": buckets,
    }
    write_json(run.out(args.out), report)
    if args.csv:
        rows = []
        for r in reports:
            rows.append([
                " ".join(str(a) for a in r.attackers), "" if r.target is None else r.target,
                "" if r.distance is None else r.distance, r.mu_gdp, r.eps_rdp(2.0), r.eps_at(args.delta),
            ])
        write_csv_rows(run.out(args.csv), ["attacker_set", "target", "distance", "mu", "eps_rdp_2", "eps_delta"], rows)
    if args.buckets_csv and buckets:
        write_csv_rows(run.out(args.buckets_csv), ["distance", "eps_rdp_2_min", "eps_rdp_2_mean", "eps_rdp_2_max"],
                       [[int(d), v["min"], v["mean"], v["max"]] for d, v in buckets.items()])
    return args.out


def _optimizer_config(args):
    return mf.OptimizerConfig(max_iters=args.max_iters)


def cmd_optimize(args, run):
    g, W = _gossip(args)
    run.add_input(args.graph)
    scheme = acc.ParticipationScheme.parse(args.participation)
    H = mf.gram_workload(W, args.T)
    if args.baseline:
        C = mf.baseline(args.baseline, args.T, scheme, _optimizer_config(args))
        trajectory = C.info.get("runs", {})
    else:
        C = mf.optimize_correlation(H, scheme, _optimizer_config(args))
        trajectory = C.info["runs"]
    mk.write_matrix_csv(run.out(args.out), C.C)
    side = {
        "kind": "optimize_sidecar", "manifest_hash": run.hash, "T": args.T,
        "participation": scheme.describe(), "baseline": args.baseline or "mafalda",
        "objective": mf.objective_from_gram(H.H, C.C, scheme),
        "identity_objective": mf.objective_from_gram(H.H, np.eye(args.T), scheme),
        "sens_sq": mf.sens_sq(C.C, scheme), "utility": mf.utility(H.H, C.C),
        "runs": {k: {"iters": v["iters"], "objective": v["objective"], "trajectory": v["trajectory"]}
                 for k, v in trajectory.items()},
    }
    write_json(run.out(args.out + ".json"), side)
    return args.out


def _dataset(args, run):
    if args.dataset.startswith("synthetic"):
        _, _, spec = args.dataset.partition(":")
        N, d = (int(x) for x in spec.split(",")) if spec else (2000, 8)
        return sim.synthetic_linear_dataset(N, d, seed=args.data_seed)
    if not args.target:
        raise InputError("--target is required with a CSV dataset")
    run.add_input(args.dataset)
    return sim.load_csv_dataset(args.dataset, args.target, args.test_fraction, args.data_seed)


def cmd_simulate(args, run):
    g, W = _gossip(args)
    run.add_input(args.graph)
    ds = _dataset(args, run)
    T = args.T
    scheme = acc.ParticipationScheme.parse(args.participation) if args.participation else acc.ParticipationScheme.cyclic(1, T)
    seeds = args.seeds or [args.seed]
    out = Path(args.out)
    stem = out.with_suffix("")
    kw = dict(eta=args.eta, clip=args.clip, batch=args.batch, model=args.model, hidden=args.hidden)
    if args.algo == "all":
        res = sim.run_comparison(W, ds, T, args.sigma, seeds, scheme, **kw)
        write_csv_rows(run.out(out), ["method", "sigma", "mean_final", "std_final", "diverged", "eps_ldp", "delta"],
                       [[r[k] for k in ("method", "sigma", "mean_final", "std_final", "diverged", "eps_ldp", "delta")]
                        for r in res["rows"]])
        for (m, s), trace in res["traces"].items():
            trace.write_csv(run.out(f"{stem}_{m}_seed{s}.csv"), wallclock=args.wallclock)
        write_json(run.out(f"{stem}.json"), {
            "kind": "simulate_summary", "manifest_hash": run.hash,
            "rows": [{k: _finite(v) for k, v in r.items()} for r in res["rows"]],
        })
        return str(out)

    if args.c_matrix:
        run.add_input(args.c_matrix)
        C = mk.read_matrix_csv(args.c_matrix)
    else:
        name = {"none": "nonprivate"}.get(args.algo, args.algo)
        C = sim.method_correlations(W, T, scheme, (name,))[name]
    C = mf.normalize(C, scheme)
    sigma = 0.0 if args.algo == "none" else args.sigma
    finals = []
    multi = len(seeds) > 1
    for s in seeds:
        cfg = sim.SimConfig(W, T, sigma=sigma, C_local=C, scheme=scheme, seed=s, **kw)
        trace = sim.run_mf_dsgd(cfg, ds)
        path = f"{stem}_seed{s}.csv" if multi else str(out)
        trace.write_csv(run.out(path), wallclock=args.wallclock)
        finals.append([s, trace.final_loss(), int(trace.diverged), len(trace.test_loss)])
    eps = math.inf if sigma == 0 else acc.make_report(mf.sens_sq(C, scheme), sigma, 1.0, deltas=(args.delta,)).eps_at(args.delta)
    if multi:
        write_csv_rows(run.out(f"{stem}_aggregate.csv"), ["seed", "final_test_mse", "diverged", "steps"], finals)
    vals = np.array([f[1] for f in finals])
    write_json(run.out(f"{stem}.json"), {
        "kind": "simulate_summary", "manifest_hash": run.hash,
        "rows": [{"method": args.algo, "sigma": sigma, "mean_final": _finite(float(np.mean(vals))),
                  "std_final": _finite(float(np.std(vals))), "diverged": int(sum(f[2] for f in finals)),
                  "eps_ldp": _finite(eps), "delta": args.delta}],
    })
    return str(out)


def cmd_replay(args, run):
    with open(args.manifest_file, encoding="utf-8") as fh:
        manifest = json.load(fh)
    argv = list(manifest["command"])
    if args.threads is not None:
        argv = _strip_threads(argv) + ["--threads", str(args.threads)]
    code = main(argv)
    if code != 0:
        return code
    bad = [p for p, h in manifest["outputs"].items() if not Path(p).is_file() or sha256_file(p) != h]
    for p in bad:
        log.error("output differs from manifest: %s", p)
    print(json.dumps({"replayed": len(manifest["outputs"]), "mismatched": bad}))
    return EXIT_REPLAY if bad else 0


def _thread_cap(threads):
    """Requested thread count clamped to usable CPUs (OpenBLAS can crash when oversubscribed)."""
    if threads is None:
        return None
    if threads < 1:
        raise InputError("--threads must be >= 1")
    try:
        cpus = len(os.sched_getaffinity(0))
    except AttributeError:
        cpus = os.cpu_count() or 1
    return min(threads, cpus)


def _strip_threads(argv):
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--threads":
            skip = True
            continue
        if a.startswith("--threads="):
            continue
        out.append(a)
    return out


# --- parser -------------------------------------------------------------------------------


def _common(p, graph=True):
    p.add_argument("--config", help="JSON file of option defaults (flags override it)")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/worker threads")
    p.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
    p.add_argument("--log-level", default="WARNING")
    if graph:
        p.add_argument("--graph", help="edge-list file or 'florentine'")
        p.add_argument("--gossip-scheme", default="metropolis-hastings", choices=gr.GOSSIP_SCHEMES)


def _algo_opts(p, algos=wl.ALGORITHMS):
    p.add_argument("--algo", choices=algos)
    p.add_argument("--T", type=int)
    p.add_argument("--K", type=int, default=1, help="gossip rounds per step (muffliato)")
    p.add_argument("--orientation-seed", type=int, default=0, help="edge orientation seed (decor)")


REQUIRED = {
    ("graph", "gen"): ("out", "n"),
    ("graph", "info"): ("graph",),
    ("workload", "build"): ("graph", "T", "out"),
    ("trust", "view"): ("graph", "algo", "trust", "T", "out_prefix"),
    ("account", None): ("graph", "algo", "trust", "T", "sigma", "participation", "out"),
    ("optimize", None): ("graph", "T", "participation", "out"),
    ("simulate", None): ("graph", "dataset", "algo", "T", "out"),
    ("replay", None): ("manifest_file",),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="dpmesh", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dpmesh {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)
    subs = {}

    p = sub.add_parser("graph", help="generate or inspect graphs")
    gsub = p.add_subparsers(dest="sub", required=True)
    q = gsub.add_parser("gen", help="generate a graph")
    _common(q, graph=False)
    q.add_argument("--kind", choices=("er", "complete", "ring"), default="er")
    q.add_argument("--n", type=int)
    q.add_argument("--p", type=float, default=0.25)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_graph_gen)
    subs[("graph", "gen")] = q
    q = gsub.add_parser("info", help="summarize a graph")
    _common(q)
    q.add_argument("--out")
    q.set_defaults(func=cmd_graph_info)
    subs[("graph", "info")] = q

    p = sub.add_parser("workload", help="materialize workload matrices")
    wsub = p.add_subparsers(dest="sub", required=True)
    q = wsub.add_parser("build", help="write the message workload (or Gram workload) as CSV")
    _common(q)
    _algo_opts(q)
    q.set_defaults(algo="dsgd")
    q.add_argument("--gram", action="store_true", help="emit the T x T Gram workload instead")
    q.add_argument("--out")
    q.set_defaults(func=cmd_workload)
    subs[("workload", "build")] = q

    p = sub.add_parser("trust", help="attacker views")
    tsub = p.add_subparsers(dest="sub", required=True)
    q = tsub.add_parser("view", help="write A, B, C and metadata for one attacker view")
    _common(q)
    _algo_opts(q)
    q.add_argument("--trust", choices=tr.TRUST_KINDS)
    q.add_argument("--attackers", type=_int_list, default=[])
    q.add_argument("--strict", action="store_true", help="leave attackers' own messages out of the view")
    q.add_argument("--out-prefix")
    q.set_defaults(func=cmd_trust_view)
    subs[("trust", "view")] = q

    q = sub.add_parser("account", help="privacy accounting report")
    _common(q)
    _algo_opts(q)
    q.add_argument("--trust", choices=tr.TRUST_KINDS)
    q.add_argument("--attackers", type=_int_list, default=[])
    q.add_argument("--each-attacker", action="store_true", help="every node in turn as a single attacker")
    q.add_argument("--strict", action="store_true")
    q.add_argument("--bound", choices=("abs", "tight"), default="abs",
                   help="entrywise bound, or its minimum with the spectral bound")
    q.add_argument("--sigma", type=float)
    q.add_argument("--clip", type=float, default=1.0)
    q.add_argument("--participation", help="single:t | kb:K,B | full")
    q.add_argument("--alphas", type=_float_list, default=[2.0])
    q.add_argument("--delta", type=float, default=1e-6)
    q.add_argument("--out")
    q.add_argument("--csv")
    q.add_argument("--buckets-csv")
    q.set_defaults(func=cmd_account)
    subs[("account", None)] = q

    q = sub.add_parser("optimize", help="optimize the local noise correlation")
    _common(q)
    q.add_argument("--T", type=int)
    q.add_argument("--participation")
    q.add_argument("--baseline", choices=("antipgd", "dmf", "identity"))
    q.add_argument("--max-iters", type=int, default=2000)
    q.add_argument("--out")
    q.set_defaults(func=cmd_optimize)
    subs[("optimize", None)] = q

    q = sub.add_parser("simulate", help="run decentralized training")
    _common(q)
    q.add_argument("--dataset", help="CSV path or synthetic[:N,d]")
    q.add_argument("--target")
    q.add_argument("--test-fraction", type=float, default=0.2)
    q.add_argument("--data-seed", type=int, default=0)
    q.add_argument("--algo", choices=("none", "dpdsgd", "antipgd", "mafalda", "dmf", "all"))
    q.add_argument("--c-matrix")
    q.add_argument("--T", type=int)
    q.add_argument("--sigma", type=float, default=1.0)
    q.add_argument("--clip", type=float, default=1.0)
    q.add_argument("--eta", type=float, default=0.05)
    q.add_argument("--batch", type=int, default=1)
    q.add_argument("--model", choices=("linear", "mlp"), default="linear")
    q.add_argument("--hidden", type=int, default=64)
    q.add_argument("--participation", help="accounting scheme (default: each record once)")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--seeds", type=_seed_list)
    q.add_argument("--delta", type=float, default=1e-6)
    q.add_argument("--wallclock", action="store_true", help="record per-step wall-clock times (not reproducible)")
    q.add_argument("--out")
    q.set_defaults(func=cmd_simulate)
    subs[("simulate", None)] = q

    q = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    q.add_argument("manifest_file")
    q.add_argument("--threads", type=int, default=None)
    q.add_argument("--log-level", default="WARNING")
    q.set_defaults(func=cmd_replay, manifest=None, config=None)
    subs[("replay", None)] = q
    return parser, subs


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    key = (args.cmd, getattr(args, "sub", None))
    sp = subs[key]
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            sp.error(f"cannot read --config: {exc}")
        if not isinstance(cfg, dict):
            sp.error("--config must hold a JSON object")
        known = {a.dest for a in sp._actions}
        unknown = set(cfg) - known
        if unknown:
            sp.error(f"unknown keys in --config: {sorted(unknown)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [n for n in REQUIRED[key] if getattr(args, n, None) in (None, "")]
    if missing:
        sp.error("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "replay":
            return args.func(args, None)
        from threadpoolctl import threadpool_limits

        run = Run(args, argv)
        with threadpool_limits(limits=_thread_cap(args.threads)):
            primary = args.func(args, run)
        if primary is not None:
            run.finish(primary)
        return 0
    except OutOfMemory as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except NumericError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DpmeshError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
