import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from dpmesh import cli
from dpmesh import graphs as gr
from dpmesh import mafalda as mf
from dpmesh import accounting as acc


@pytest.fixture(scope="module")
def schema():
    return json.loads(resources.files("dpmesh").joinpath("data/outputs.schema.json").read_text())


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _json(path):
    with open(path) as fh:
        return json.load(fh)


def test_usage_errors(work, capsys):
    assert cli.main([]) == 2
    assert cli.main(["account", "--graph", "florentine", "--algo", "dsgd", "--trust", "ldp", "--T", "3",
                     "--participation", "full", "--out", "a.json"]) == 2
    assert "--sigma" in capsys.readouterr().err
    assert cli.main(["optimize", "--bogus"]) == 2


def test_input_numeric_memory_codes(work, monkeypatch):
    assert cli.main(["graph", "info", "--graph", "missing.txt"]) == 3
    (work / "bad.txt").write_text("0 1\n1 2 3\n")
    assert cli.main(["graph", "info", "--graph", "bad.txt"]) == 3
    assert cli.main(["account", "--graph", "florentine", "--algo", "dsgd", "--trust", "pndp", "--T", "3",
                     "--sigma", "1", "--participation", "full", "--out", "a.json"]) == 3
    np.savetxt("c.csv", np.diag([1.0, 0.0, 1.0]), delimiter=",")
    assert cli.main(["simulate", "--graph", "florentine", "--dataset", "synthetic:100,3", "--algo", "dpdsgd",
                     "--c-matrix", "c.csv", "--T", "3", "--out", "s.csv"]) == 4
    monkeypatch.setenv("DPMESH_MEM_BUDGET_MB", "0.001")
    assert cli.main(["workload", "build", "--graph", "florentine", "--algo", "dsgd", "--T", "20",
                     "--out", "w.csv"]) == 5


def test_graph_and_workload_commands(work, schema):
    assert cli.main(["graph", "gen", "--kind", "er", "--n", "12", "--p", "0.3", "--seed", "1", "--out", "g.txt"]) == 0
    g, ref = gr.load_edge_list("g.txt"), gr.erdos_renyi(12, 0.3, 1)
    assert (g.n, g.m) == (ref.n, ref.m)
    assert sorted(g.degrees()) == sorted(ref.degrees())
    assert cli.main(["graph", "info", "--graph", "g.txt", "--out", "info.json"]) == 0
    info = _json("info.json")
    jsonschema.validate(info, schema)
    assert info["n"] == 12 and info["connected"]
    jsonschema.validate(_json("info.json.manifest.json"), schema)

    assert cli.main(["workload", "build", "--graph", "g.txt", "--algo", "dsgd", "--T", "3", "--out", "w.csv"]) == 0
    assert np.loadtxt("w.csv", delimiter=",").shape == (36, 36)
    assert cli.main(["workload", "build", "--graph", "g.txt", "--T", "5", "--gram", "--out", "h.csv"]) == 0
    H = np.loadtxt("h.csv", delimiter=",")
    np.testing.assert_allclose(H, mf.gram_workload(gr.gossip_from_graph(gr.load_edge_list("g.txt")), 5).H)


def test_trust_view(work, schema):
    argv = ["trust", "view", "--graph", "florentine", "--algo", "dsgd", "--trust", "pndp",
            "--attackers", "0,3", "--T", "3", "--out-prefix", "v"]
    assert cli.main(argv) == 0
    meta = _json("v_meta.json")
    jsonschema.validate(meta, schema)
    A, B, C = (np.loadtxt(f"v_{x}.csv", delimiter=",", ndmin=2) for x in "ABC")
    np.testing.assert_allclose(B @ C, A, atol=1e-10)
    assert meta["attackers"] == [0, 3]
    assert cli.main(argv[:-2] + ["--out-prefix", "s", "--strict"]) == 0
    assert np.loadtxt("s_B.csv", delimiter=",", ndmin=2).shape[0] < B.shape[0]


def test_account_outputs(work, schema):
    assert cli.main(["account", "--graph", "florentine", "--algo", "dsgd", "--trust", "ldp", "--T", "4",
                     "--sigma", "2", "--participation", "full", "--out", "ldp.json"]) == 0
    rep = _json("ldp.json")
    jsonschema.validate(rep, schema)
    assert rep["reports"][0]["mu_gdp"] == pytest.approx(1.0)

    assert cli.main(["account", "--graph", "florentine", "--algo", "dsgd", "--trust", "pndp", "--T", "4",
                     "--sigma", "2", "--participation", "kb:2,2", "--each-attacker", "--alphas", "2,4",
                     "--out", "p.json", "--csv", "p.csv", "--buckets-csv", "b.csv"]) == 0
    rep = _json("p.json")
    jsonschema.validate(rep, schema)
    n = gr.builtin_florentine().n
    assert len(rep["reports"]) == n * (n - 1)
    with open("p.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == n * (n - 1) and set(rows[0]) >= {"attacker_set", "target", "distance", "mu"}
    assert len(rep["distance_buckets_rdp2"]) == len(open("b.csv").read().splitlines()) - 1


def test_optimize_and_baseline(work, schema):
    assert cli.main(["optimize", "--graph", "florentine", "--T", "6", "--participation", "kb:2,3",
                     "--max-iters", "100", "--out", "c.csv"]) == 0
    side = _json("c.csv.json")
    jsonschema.validate(side, schema)
    C = np.loadtxt("c.csv", delimiter=",")
    assert mf.sens_sq(C, acc.ParticipationScheme.cyclic(2, 3)) == pytest.approx(1.0)
    assert side["objective"] <= side["identity_objective"]
    assert cli.main(["optimize", "--graph", "florentine", "--T", "6", "--participation", "kb:2,3",
                     "--baseline", "antipgd", "--out", "a.csv"]) == 0
    jsonschema.validate(_json("a.csv.json"), schema)


def test_config_file_precedence(work):
    (work / "cfg.json").write_text(json.dumps({"graph": "florentine", "T": 5, "participation": "full", "out": "x.csv"}))
    assert cli.main(["optimize", "--config", "cfg.json", "--T", "4", "--max-iters", "20"]) == 0
    assert np.loadtxt("x.csv", delimiter=",").shape == (4, 4)
    (work / "bad.json").write_text(json.dumps({"nope": 1}))
    assert cli.main(["optimize", "--config", "bad.json"]) == 2


def test_simulate_and_replay(work, schema, capsys):
    argv = ["simulate", "--graph", "florentine", "--dataset", "synthetic:200,3", "--algo", "all", "--T", "12",
            "--sigma", "1", "--seeds", "1..2", "--out", "sim.csv"]
    assert cli.main(argv) == 0
    summary = _json("sim.json")
    jsonschema.validate(summary, schema)
    assert {r["method"] for r in summary["rows"]} == {"nonprivate", "dpdsgd", "antipgd", "mafalda", "dmf"}
    man = _json("sim.csv.manifest.json")
    jsonschema.validate(man, schema)
    assert man["manifest_hash"] == summary["manifest_hash"]
    first = {p: cli.sha256_file(p) for p in man["outputs"]}

    assert cli.main(["replay", "sim.csv.manifest.json", "--threads", "2"]) == 0
    assert {p: cli.sha256_file(p) for p in man["outputs"]} == first
    assert _json("sim.csv.manifest.json")["manifest_hash"] == man["manifest_hash"]

    with open("sim_dpdsgd_seed1.csv", "a") as fh:
        fh.write("tampered\n")
    man["outputs"]["sim_dpdsgd_seed1.csv"] = "0" * 64
    (work / "tampered.json").write_text(json.dumps(man))
    assert cli.main(["replay", "tampered.json"]) == 6


def test_simulate_single_method(work, schema):
    assert cli.main(["simulate", "--graph", "florentine", "--dataset", "synthetic:200,3", "--algo", "dpdsgd",
                     "--T", "10", "--out", "one.csv"]) == 0
    lines = open("one.csv").read().splitlines()
    assert lines[0] == "step,test_mse,train_mse,wallclock_ms" and len(lines) == 11
    s = _json("one.json")
    jsonschema.validate(s, schema)
    assert s["rows"][0]["eps_ldp"] == pytest.approx(acc.gdp_to_eps_delta(1.0, 1e-6))


def test_thread_cap():
    assert cli._thread_cap(None) is None or cli._thread_cap(None) >= 1
    assert 1 <= cli._thread_cap(1000) <= 1000
    assert cli._thread_cap(1) == 1
