from __future__ import annotations

import itertools
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from txnet.netgraph import (ContradictoryEdge, Network, Node, assemble, cluster_modules, export,
                            load_edgelist, louvain, modularity_score, summarize_modules)
from txnet.netinfer import GeneEdge


def _two_k4():
    ids = [f"n{i}" for i in range(8)]
    pairs = [(ids[a], ids[b]) for blk in (range(4), range(4, 8)) for a, b in itertools.combinations(blk, 2)]
    return ids, pairs


def _sbm(seed, blocks=4, size=40, p_in=0.3, p_out=0.01):
    rng = np.random.default_rng(seed)
    n = blocks * size
    lab = np.repeat(np.arange(blocks), size)
    ids = [f"v{i:03d}" for i in range(n)]
    pairs = [(ids[a], ids[b]) for a in range(n) for b in range(a + 1, n)
             if rng.random() < (p_in if lab[a] == lab[b] else p_out)]
    return ids, pairs, lab


def test_two_cliques():
    ids, pairs = _two_k4()
    part = louvain(ids, pairs, check=True)
    assert len(set(part.values())) == 2
    assert modularity_score(pairs, part) == 0.5


def test_complete_graph_single_module():
    ids = [f"n{i}" for i in range(6)]
    pairs = list(itertools.combinations(ids, 2))
    part = louvain(ids, pairs, check=True)
    assert set(part.values()) == {0}
    assert modularity_score(pairs, part) == pytest.approx(0.0, abs=1e-15)


def test_triangle_scores():
    pairs = [("a", "b"), ("b", "c"), ("a", "c")]
    assert modularity_score(pairs, {"a": 0, "b": 1, "c": 2}) == pytest.approx(-1 / 3, abs=1e-12)
    assert modularity_score(pairs, {"a": 0, "b": 0, "c": 0}) == 0.0


def test_gamma_changes_resolution():
    ids, pairs = _two_k4()
    pairs = pairs + [("n3", "n4")]
    part = {x: 0 for x in ids}
    # all-in-one: 1 - gamma
    assert modularity_score(pairs, part, gamma=0.5) == pytest.approx(0.5)
    assert len(set(louvain(ids, pairs, gamma=0.01).values())) == 1


def test_sbm_recovery():
    from sklearn.metrics import adjusted_rand_score
    scores = []
    for seed in range(5):
        ids, pairs, lab = _sbm(seed)
        part = louvain(ids, pairs, seed=seed)
        scores.append(adjusted_rand_score(lab, [part[x] for x in ids]))
    assert np.median(scores) >= 0.9


def test_every_move_increases_modularity():
    ids, pairs, _ = _sbm(11, blocks=3, size=15, p_in=0.4, p_out=0.05)
    louvain(ids, pairs, seed=3, check=True)  # asserts inside on every accepted move


def test_partition_properties():
    ids, pairs, _ = _sbm(12)
    part = louvain(ids, pairs, seed=1)
    labels = sorted(set(part.values()))
    assert labels == list(range(len(labels)))
    singletons = {x: i for i, x in enumerate(ids)}
    assert modularity_score(pairs, part) >= max(0.0, modularity_score(pairs, singletons))
    # same seed, shuffled input order
    rng = np.random.default_rng(0)
    again = louvain(list(rng.permutation(ids)), [pairs[i] for i in rng.permutation(len(pairs))], seed=1)
    assert again == part


def test_empty_graph_errors():
    with pytest.raises(ValueError):
        cluster_modules(Network())


def _edges():
    ge = [GeneEdge("G1", "G2", 0.4), GeneEdge("G2", "G3", -0.3), GeneEdge("G4", "G5", 0.2)]
    ce = [("G1", "bmi", -0.7), ("G3", "bmi", 0.5)]
    de = {"G1": 1.2, "G2": 0.8, "G3": -0.9, "G4": 1.0, "G5": 0.5, "G9": 2.0}
    return ge, ce, de


def test_assemble_examples():
    ge, ce, de = _edges()
    only_genes = assemble(ge, [], de)
    assert all(n.kind == "gene" for n in only_genes.nodes.values())
    net = assemble(ge, ce, de)
    assert "G9" not in net.nodes  # isolated nodes never enter
    assert net.nodes["bmi"].kind == "clinical"
    assert net.edges[("G1", "bmi")].sign == -1
    assert net.edges[("G2", "G3")].kind == "gene-gene"
    assert net.nodes["G3"].de_direction == "down"
    assert len(net.edges) == 5


def test_assemble_contradictions():
    with pytest.raises(ContradictoryEdge):
        assemble([GeneEdge("A", "B", 0.3), GeneEdge("B", "A", -0.3)], [], {})
    same = assemble([GeneEdge("A", "B", 0.3), GeneEdge("B", "A", 0.3)], [], {})
    assert len(same.edges) == 1
    with pytest.raises(ValueError):
        assemble([GeneEdge("A", "A", 0.3)], [], {})


def test_planted_block_edge_count():
    from txnet.simulate import planted_precision, stream, true_edges
    theta = planted_precision(20, "block", stream(0, "b"), block_size=10)
    truth = true_edges(theta, [f"G{i}" for i in range(20)])
    rho = -theta
    edges = [GeneEdge(a, b, float(rho[int(a[1:]), int(b[1:])])) for a, b in sorted(truth)]
    assert len(assemble(edges, [], {}).edges) == len(truth)


def test_summaries():
    ge, ce, de = _edges()
    net = assemble(ge, ce, de)
    part = cluster_modules(net, seed=0)
    summ = summarize_modules(net, part)
    assert [s.size for s in summ] == sorted((s.size for s in summ), reverse=True)
    assert sum(s.size for s in summ) == len(net.nodes)
    for s in summ:
        if s.frac_upregulated is not None:
            assert s.frac_upregulated + s.frac_downregulated == pytest.approx(1.0)
    with_bmi = [s for s in summ if "bmi" in s.clinical_members]
    assert len(with_bmi) == 1
    assert any(s.clinical_members == [] for s in summ)


def test_up_fraction_counting():
    edges = [GeneEdge(f"G{i}", f"G{i + 1}", 0.3) for i in range(9)]
    de = {f"G{i}": (1.0 if i < 9 else -1.0) for i in range(10)}
    net = assemble(edges, [], de)
    summ = summarize_modules(net, {x: 0 for x in net.nodes})
    assert summ[0].frac_upregulated == pytest.approx(0.9)


def test_exports(tmp_path):
    ge, ce, de = _edges()
    net = assemble(ge, ce, de)
    part = cluster_modules(net, seed=0)
    for fmt, name in [("edgelist", "e.tsv"), ("graphml", "n.graphml"), ("modules-tsv", "m.tsv"),
                      ("summary-json", "s.json")]:
        export(net, part, fmt, tmp_path / name)
        first = (tmp_path / name).read_bytes()
        export(net, part, fmt, tmp_path / name)
        assert (tmp_path / name).read_bytes() == first
    assert load_edgelist(tmp_path / "e.tsv") == net
    root = ET.parse(tmp_path / "n.graphml").getroot()
    assert root.tag == "{http://graphml.graphdrawing.org/xmlns}graphml"
    import networkx as nx
    g = nx.read_graphml(tmp_path / "n.graphml")
    assert g.number_of_nodes() == len(net.nodes) and g.number_of_edges() == len(net.edges)
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert lines[0] == "node\tkind\tmodule_id" and len(lines) == len(net.nodes) + 1
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["module_sizes"] == sorted(doc["module_sizes"], reverse=True)
    with pytest.raises(ValueError):
        export(net, part, "png", tmp_path / "x")
    with pytest.raises(OSError):
        export(net, part, "modules-tsv", tmp_path / "missing" / "m.tsv")
