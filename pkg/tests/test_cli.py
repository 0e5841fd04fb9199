"""Command-line interface: schemas, determinism and exit codes."""

import json

import numpy as np
import pytest

from sisinvest import DependenceGraph, build_graph
from sisinvest.cli import (
    EXIT_INPUT,
    EXIT_OK,
    ExperimentConfig,
    generate_network,
    main,
)


@pytest.fixture
def small_cfg(tmp_path):
    cfg = {"sizes": [8, 12], "cross_edges": 3, "seed": 4,
           "eps_grid": [1e-2, 1e-3]}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_config_roundtrip_and_hash():
    cfg = ExperimentConfig(sizes=(8, 12), seed=4)
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.hash() == cfg.hash()
    assert ExperimentConfig(seed=5).hash() != cfg.hash()
    with pytest.raises(Exception):
        ExperimentConfig.from_dict({"unknown_key": 1})


def test_generate_network_structure():
    cfg = ExperimentConfig(sizes=(8, 12), cross_edges=3, seed=4,
                           attacked_count=4)
    g = generate_network(cfg)
    assert g.n == 20
    # attacks confined to the second part
    assert np.all(g.lam[:8] == 0.0)
    assert np.count_nonzero(g.lam[8:]) == 4
    np.testing.assert_allclose(g.lam[g.lam > 0], cfg.attack_rate)
    # cost follows c = (nu + 0.2 xi) B^T 1 with xi in [0, 1]
    B = g.infection_matrix()
    col = B.T @ np.ones(g.n)
    ratio = g.c[col > 0] / col[col > 0]
    assert np.all(ratio >= cfg.nu - 1e-12)
    assert np.all(ratio <= cfg.nu + cfg.c_rand_weight + 1e-12)
    # determinism
    h = generate_network(cfg)
    assert h.edges == g.edges and np.array_equal(h.lam, g.lam)


def test_gen_solve_equilibrium_flow(tmp_path, small_cfg):
    net = tmp_path / "net.json"
    assert main(["gen", "--config", str(small_cfg), "--out", str(net)]) == EXIT_OK
    data = json.loads(net.read_text())
    assert "provenance" in data and "config_hash" in data["provenance"]
    g = DependenceGraph.load(net)
    assert g.n == 20

    rep_path = tmp_path / "rep.json"
    assert main(["solve", "--network", str(net), "--config", str(small_cfg),
                 "--epsilon", "1e-3", "--out", str(rep_path)]) == EXIT_OK
    rep = json.loads(rep_path.read_text())
    b = rep["bounds"]
    assert b["lower"] <= b["upper_recovered"] + 1e-8
    assert b["lower"] <= b["upper_rgm"] + 1e-6
    assert len(rep["s_rgm"]) == g.n

    eq_path = tmp_path / "eq.json"
    assert main(["equilibrium", "--network", str(net), "--epsilon", "1e-3",
                 "--out", str(eq_path)]) == EXIT_OK
    eq = json.loads(eq_path.read_text())
    assert eq["residual_inf"] <= 1e-10
    assert len(eq["p_bar"]) == g.n
    assert len(eq["regimes"]) == len(eq["msccs"])


def test_gen_is_deterministic(tmp_path, small_cfg):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["gen", "--config", str(small_cfg), "--out", str(a)])
    main(["gen", "--config", str(small_cfg), "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_sweep_csv(tmp_path, small_cfg):
    net = tmp_path / "net.json"
    main(["gen", "--config", str(small_cfg), "--out", str(net)])
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--network", str(net), "--config", str(small_cfg),
                 "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == ("epsilon,lower_per_node,upper_recovered_per_node,"
                       "upper_rgm_per_node,gap_rel")
    assert len(lines) == 3     # header + two grid points
    eps_col = [float(l.split(",")[0]) for l in lines[1:]]
    assert eps_col == [1e-2, 1e-3]


def test_exit_codes(tmp_path):
    # missing network file
    assert main(["solve", "--network", str(tmp_path / "nope.json"),
                 "--epsilon", "1e-3"]) == EXIT_INPUT
    # epsilon must be positive
    g = build_graph(2, [(0, 1, 0.1), (1, 0, 0.1)], lam=0.1, delta=0.1)
    net = tmp_path / "net.json"
    g.save(net)
    assert main(["solve", "--network", str(net),
                 "--epsilon", "0"]) == EXIT_INPUT
    # ascending sweep grid is rejected
    assert main(["sweep", "--network", str(net),
                 "--eps-grid", "1e-3,1e-2"]) == EXIT_INPUT


def test_solve_chain_closed_form(tmp_path):
    # lam = (0.1, 0), delta = 0.1, rate 0.1, zero cost: optimum is s = 0
    g = build_graph(2, [(0, 1, 0.1)], lam=[0.1, 0.0], delta=0.1)
    net = tmp_path / "net.json"
    g.save(net)
    out = tmp_path / "rep.json"
    assert main(["solve", "--network", str(net), "--method", "rgm",
                 "--epsilon", "1e-6", "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    np.testing.assert_allclose(rep["s_rgm"], [0.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(rep["p_rgm"], [0.5, 1.0 / 3.0], atol=1e-4)
