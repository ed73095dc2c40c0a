from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from txnet.diffexpr import bh_adjust
from txnet.ingest import (ClinicalTable, CountMatrix, SampleMeta, cpm, load_clinical, load_counts,
                          load_meta, write_clinical, write_counts, write_meta)
from txnet.netgraph import Network, Node, load_edgelist, modularity_score, write_edgelist

pvalues = arrays(float, st.integers(1, 60), elements=st.floats(0.0, 1.0))
ident = st.text("abcdefgXYZ_0123456789", min_size=1, max_size=8)


@given(pvalues)
def test_bh_bounds_and_order(p):
    q = bh_adjust(p)
    assert np.all(q >= p) and np.all(q <= 1.0)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(q[order]) >= 0)


@given(pvalues, st.randoms(use_true_random=False))
def test_bh_permutation_equivariant(p, rnd):
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    np.testing.assert_array_equal(bh_adjust(p)[perm], bh_adjust(p[perm]))


@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=st.integers(1, 10_000)),
       st.integers(2, 50))
def test_cpm_scale_free_without_prior(counts, k):
    genes = tuple(f"g{i}" for i in range(counts.shape[0]))
    samples = tuple(f"s{j}" for j in range(counts.shape[1]))
    a = cpm(CountMatrix(genes, samples, counts), prior=0.0)
    b = cpm(CountMatrix(genes, samples, counts * k), prior=0.0)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_allclose(a.sum(axis=0), 1e6)


@settings(max_examples=50)
@given(st.lists(ident, min_size=1, max_size=6, unique=True),
       st.lists(ident, min_size=1, max_size=5, unique=True), st.data())
def test_counts_round_trip(tmp_path_factory, genes, samples, data):
    counts = data.draw(arrays(np.int64, (len(genes), len(samples)), elements=st.integers(0, 10**9)))
    m = CountMatrix(tuple(genes), tuple(samples), counts)
    path = tmp_path_factory.mktemp("c") / "counts.tsv"
    write_counts(m, path)
    back = load_counts(path)
    assert back.gene_ids == m.gene_ids and back.sample_ids == m.sample_ids
    np.testing.assert_array_equal(back.counts, m.counts)


@settings(max_examples=50)
@given(st.lists(st.tuples(ident, st.sampled_from([1, 2, 3])), min_size=1, max_size=8, unique=True),
       st.data())
def test_meta_and_clinical_round_trip(tmp_path_factory, keys, data):
    n = len(keys)
    ages = data.draw(st.lists(st.floats(0, 120, allow_nan=False), min_size=n, max_size=n))
    meta = SampleMeta(tuple(f"S{i}" for i in range(n)), tuple(k[0] for k in keys), tuple(k[1] for k in keys),
                      tuple(data.draw(st.sampled_from(["C1", "C2"])) for _ in keys),
                      tuple(data.draw(st.sampled_from(["M", "F"])) for _ in keys), tuple(ages),
                      ("B1",) * n)
    bmi = data.draw(arrays(float, n, elements=st.floats(10, 60) | st.just(np.nan)))
    clin = ClinicalTable(meta.subject_id, meta.cid, {"bmi": bmi})
    root = tmp_path_factory.mktemp("m")
    write_meta(meta, root / "meta.tsv")
    write_clinical(clin, root / "clin.tsv")
    assert load_meta(root / "meta.tsv") == meta
    back = load_clinical(root / "clin.tsv")
    assert back.subject_id == clin.subject_id and back.cid == clin.cid
    np.testing.assert_array_equal(back.values["bmi"], bmi)


graphs = st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11)).filter(lambda e: e[0] != e[1]),
                  min_size=1, max_size=30)


@given(graphs, st.lists(st.integers(0, 3), min_size=12, max_size=12), st.permutations(range(4)))
def test_modularity_ignores_label_names(edges, labels, relabel):
    pairs = list({tuple(sorted((f"n{a:02d}", f"n{b:02d}"))) for a, b in edges})
    part = {f"n{i:02d}": labels[i] for i in range(12)}
    renamed = {k: relabel[v] + 10 for k, v in part.items()}
    q = modularity_score(pairs, part)
    assert abs(q - modularity_score(pairs, renamed)) <= 1e-12
    assert -0.5 - 1e-12 <= q <= 1.0


@settings(max_examples=50)
@given(graphs, st.lists(st.floats(-1, 1).filter(lambda w: w != 0), min_size=30, max_size=30))
def test_edgelist_round_trip(tmp_path_factory, edges, weights):
    net = Network()
    for (a, b), w in zip(edges, weights):
        u, v = (Node(f"G{x:02d}", "gene", ("up", "down", "n/a")[x % 3]) for x in (a, b))
        if tuple(sorted((u.id, v.id))) not in net.edges:
            net.add_edge(u, v, w, 1 if w > 0 else -1, "gene-gene")
    path = tmp_path_factory.mktemp("e") / "edges.tsv"
    write_edgelist(net, path)
    assert load_edgelist(path) == net
