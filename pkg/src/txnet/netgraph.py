"""Heterogeneous gene/clinical networks, modularity clustering and export."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class ContradictoryEdge(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: str                 # "gene" | "clinical"
    de_direction: str = "n/a"  # "up" | "down" | "n/a"


@dataclass(frozen=True)
class Edge:
    u: str
    v: str
    weight: float
    sign: int
    kind: str                 # "gene-gene" | "gene-clinical"


@dataclass
class Network:
    """Simple undirected graph; edge keys are sorted (u, v) pairs."""

    nodes: dict[str, Node] = field(default_factory=dict)
    edges: dict[tuple[str, str], Edge] = field(default_factory=dict)

    def add_edge(self, u: Node, v: Node, weight: float, sign: int, kind: str) -> None:
        if u.id == v.id:
            raise ValueError(f"self-loop on {u.id!r}")
        if u.kind == "clinical" and v.kind == "clinical":
            raise ValueError("clinical-clinical edges are not part of the model")
        for node in (u, v):
            old = self.nodes.get(node.id)
            if old is not None and old.kind != node.kind:
                raise ContradictoryEdge(f"node {node.id!r} used as both {old.kind} and {node.kind}")
            if old is None or (old.de_direction == "n/a" and node.de_direction != "n/a"):
                self.nodes[node.id] = node
        a, b = sorted((u.id, v.id))
        edge = Edge(a, b, float(weight), int(sign), kind)
        old = self.edges.get((a, b))
        if old is not None:
            if old.sign != edge.sign or old.kind != edge.kind:
                raise ContradictoryEdge(f"contradictory duplicate edge {a!r} -- {b!r}")
            return
        self.edges[(a, b)] = edge

    def sorted_nodes(self) -> list[str]:
        return sorted(self.nodes)

    def sorted_edges(self) -> list[Edge]:
        return [self.edges[k] for k in sorted(self.edges)]

    def __eq__(self, other) -> bool:
        return isinstance(other, Network) and self.nodes == other.nodes and self.edges == other.edges


def _direction(log2_fc: float) -> str:
    if log2_fc is None or not math.isfinite(log2_fc) or log2_fc == 0:
        return "n/a"
    return "up" if log2_fc > 0 else "down"


def assemble(gene_edges: Iterable, clinical_edges: Iterable,
             de_table: Mapping[str, float] | Sequence = ()) -> Network:
    """Union of gene-gene and gene-clinical edges; nodes enter only through edges.

    ``gene_edges`` yields objects with ``source``, ``target``,
    ``partial_corr``; ``clinical_edges`` yields objects with ``gene_id``,
    ``clinical_var``, ``slope`` (or ``(gene, var, slope, sign)`` tuples).
    ``de_table`` maps gene -> log2 fold change, or is a list of DE results.
    """
    if isinstance(de_table, Mapping):
        lfc = dict(de_table)
    else:
        lfc = {r.gene_id: r.log2_fc for r in de_table}

    def gene(g):
        return Node(g, "gene", _direction(lfc.get(g, math.nan)))

    net = Network()
    for e in gene_edges:
        rho = float(e.partial_corr)
        net.add_edge(gene(e.source), gene(e.target), rho, 1 if rho > 0 else -1, "gene-gene")
    for e in clinical_edges:
        if isinstance(e, tuple):
            g, var, slope = e[0], e[1], float(e[2])
        else:
            g, var, slope = e.gene_id, e.clinical_var, float(e.slope)
        net.add_edge(gene(g), Node(var, "clinical"), slope, 1 if slope > 0 else -1, "gene-clinical")
    return net


# --------------------------------------------------------------------------
# modularity

def modularity_score(net: Network | Sequence[tuple[str, str]], partition: Mapping[str, int],
                     gamma: float = 1.0) -> float:
    """Q = sum over modules of (internal edges / m) - gamma * (degree sum / 2m)^2, unweighted."""
    pairs = [(e.u, e.v) for e in net.sorted_edges()] if isinstance(net, Network) else list(net)
    m = len(pairs)
    if m == 0:
        return 0.0
    internal: dict[int, int] = {}
    degree: dict[int, int] = {}
    for u, v in pairs:
        cu, cv = partition[u], partition[v]
        degree[cu] = degree.get(cu, 0) + 1
        degree[cv] = degree.get(cv, 0) + 1
        if cu == cv:
            internal[cu] = internal.get(cu, 0) + 1
    q = 0.0
    for c, d in degree.items():
        q += internal.get(c, 0) / m - gamma * (d / (2.0 * m)) ** 2
    return q


@dataclass
class _Level:
    loops: list[float]                 # internal edge weight per node
    adj: list[dict[int, float]]        # neighbour weights, no self entries

    @property
    def n(self) -> int:
        return len(self.loops)

    def degrees(self) -> np.ndarray:
        return np.array([2.0 * self.loops[i] + sum(self.adj[i].values()) for i in range(self.n)])


def _level_modularity(level: _Level, comm: Sequence[int], m: float, gamma: float) -> float:
    k = level.degrees()
    inside: dict[int, float] = {}
    tot: dict[int, float] = {}
    for i in range(level.n):
        c = comm[i]
        tot[c] = tot.get(c, 0.0) + k[i]
        inside[c] = inside.get(c, 0.0) + level.loops[i]
        for j, w in level.adj[i].items():
            if j > i and comm[j] == c:
                inside[c] += w
    return sum(inside.get(c, 0.0) / m - gamma * (t / (2 * m)) ** 2 for c, t in tot.items())


def _one_level(level: _Level, m: float, gamma: float, order: np.ndarray,
               check: bool) -> tuple[list[int], bool]:
    comm = list(range(level.n))
    k = level.degrees()
    tot = k.copy()
    improved = False
    moved = True
    while moved:
        moved = False
        for i in order:
            i = int(i)
            own = comm[i]
            links: dict[int, float] = {}
            for j, w in level.adj[i].items():
                links[comm[j]] = links.get(comm[j], 0.0) + w
            tot[own] -= k[i]
            base = links.get(own, 0.0) / m - gamma * tot[own] * k[i] / (2.0 * m * m)
            best_c, best_gain = own, base
            for c in sorted(links):
                gain = links[c] / m - gamma * tot[c] * k[i] / (2.0 * m * m)
                if gain > best_gain + 1e-12 or (abs(gain - best_gain) <= 1e-12 and c < best_c
                                                and gain > base + 1e-12):
                    best_c, best_gain = c, gain
            if best_c != own:
                delta = best_gain - base
                assert delta > 0, "local move must strictly increase modularity"
                if check:
                    before = _level_modularity(level, comm, m, gamma)
                comm[i] = best_c
                if check:
                    after = _level_modularity(level, comm, m, gamma)
                    assert after > before, f"modularity fell from {before} to {after}"
                    assert abs((after - before) - delta) < 1e-9
                moved = improved = True
            tot[comm[i]] += k[i]
    return comm, improved


def _aggregate(level: _Level, comm: Sequence[int]) -> tuple[_Level, list[int]]:
    relabel: dict[int, int] = {}
    for c in comm:
        relabel.setdefault(c, len(relabel))
    new = [relabel[c] for c in comm]
    n = len(relabel)
    loops = [0.0] * n
    adj: list[dict[int, float]] = [dict() for _ in range(n)]
    for i in range(level.n):
        ci = new[i]
        loops[ci] += level.loops[i]
        for j, w in level.adj[i].items():
            if j <= i:
                continue
            cj = new[j]
            if ci == cj:
                loops[ci] += w
            else:
                adj[ci][cj] = adj[ci].get(cj, 0.0) + w
                adj[cj][ci] = adj[cj].get(ci, 0.0) + w
    return _Level(loops, adj), new


def louvain(node_ids: Sequence[str], pairs: Iterable[tuple[str, str]], gamma: float = 1.0,
            seed: int = 0, *, check: bool = False) -> dict[str, int]:
    """Greedy modularity optimization by local moves and graph aggregation.

    Nodes are sorted by id and visited in an order shuffled once per level
    by a generator seeded with ``seed``.  Each node moves to the neighbouring
    community with the largest modularity gain (ties go to the lowest
    community id) and only when the gain is strictly positive.  With
    ``check=True`` every move is verified against a full recomputation of Q.
    """
    ids = sorted(set(node_ids))
    if not ids:
        raise ValueError("cannot cluster an empty graph")
    index = {x: i for i, x in enumerate(ids)}
    adj: list[dict[int, float]] = [dict() for _ in ids]
    m = 0.0
    for u, v in pairs:
        a, b = index[u], index[v]
        if a == b or b in adj[a]:
            continue
        adj[a][b] = adj[b][a] = 1.0
        m += 1.0
    membership = list(range(len(ids)))
    if m == 0:
        return {x: i for i, x in enumerate(ids)}
    rng = np.random.default_rng(seed)
    level = _Level([0.0] * len(ids), adj)
    while True:
        order = rng.permutation(level.n)
        comm, improved = _one_level(level, m, gamma, order, check)
        if not improved:
            break
        level, new = _aggregate(level, comm)
        membership = [new[c] for c in membership]
    return _contiguous(ids, membership)


def _contiguous(ids: Sequence[str], labels: Sequence[int]) -> dict[str, int]:
    """Relabel to 0..k-1 by decreasing module size, ties by smallest member id."""
    groups: dict[int, list[str]] = {}
    for x, c in zip(ids, labels):
        groups.setdefault(c, []).append(x)
    ordered = sorted(groups.values(), key=lambda g: (-len(g), min(g)))
    return {x: k for k, g in enumerate(ordered) for x in g}


def cluster_modules(net: Network, gamma: float = 1.0, seed: int = 0, *,
                    check: bool = False) -> dict[str, int]:
    """Module label per node, from modularity optimization on the unweighted graph."""
    if not net.nodes:
        raise ValueError("cannot cluster an empty graph")
    return louvain(net.sorted_nodes(), [(e.u, e.v) for e in net.sorted_edges()], gamma, seed,
                   check=check)


# --------------------------------------------------------------------------
# summaries and export

@dataclass
class ModuleSummary:
    module_id: int
    size: int
    n_genes: int
    clinical_members: list[str]
    frac_upregulated: float | None
    frac_downregulated: float | None
    genes: list[str]

    def to_dict(self) -> dict:
        return {
            "module_id": self.module_id,
            "size": self.size,
            "n_genes": self.n_genes,
            "clinical_members": self.clinical_members,
            "frac_upregulated": self.frac_upregulated,
            "frac_downregulated": self.frac_downregulated,
            "genes": self.genes,
        }


def summarize_modules(net: Network, partition: Mapping[str, int],
                      de_table: Mapping[str, float] | Sequence | None = None) -> list[ModuleSummary]:
    """Per-module size, clinical members and up/down fractions, largest first.

    Directions come from ``de_table`` when given, otherwise from the nodes.
    """
    if de_table is None:
        direction = {n.id: n.de_direction for n in net.nodes.values()}
    else:
        lfc = dict(de_table) if isinstance(de_table, Mapping) else {r.gene_id: r.log2_fc for r in de_table}
        direction = {g: _direction(lfc.get(g, math.nan)) for g in net.nodes}
    members: dict[int, list[str]] = {}
    for node in sorted(partition):
        members.setdefault(partition[node], []).append(node)
    out = []
    for mod, ids in members.items():
        genes = [x for x in ids if net.nodes[x].kind == "gene"]
        clin = [x for x in ids if net.nodes[x].kind == "clinical"]
        up = sum(direction.get(g) == "up" for g in genes)
        down = sum(direction.get(g) == "down" for g in genes)
        known = up + down
        out.append(ModuleSummary(mod, len(ids), len(genes), clin,
                                 up / known if known else None,
                                 down / known if known else None, genes))
    out.sort(key=lambda s: (-s.size, s.module_id))
    return out


EDGELIST_COLUMNS = ("source", "target", "source_kind", "target_kind", "source_de", "target_de",
                    "weight", "sign", "kind")


def write_edgelist(net: Network, path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("\t".join(EDGELIST_COLUMNS) + "\n")
    for e in net.sorted_edges():
        a, b = net.nodes[e.u], net.nodes[e.v]
        buf.write(f"{a.id}\t{b.id}\t{a.kind}\t{b.kind}\t{a.de_direction}\t{b.de_direction}\t"
                  f"{e.weight!r}\t{e.sign}\t{e.kind}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_edgelist(path: str | Path) -> Network:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if tuple(lines[0].split("\t")) != EDGELIST_COLUMNS:
        raise ValueError(f"{path}: not an edge list")
    net = Network()
    for line in lines[1:]:
        s, t, sk, tk, sd, td, w, sign, kind = line.split("\t")
        net.add_edge(Node(s, sk, sd), Node(t, tk, td), float(w), int(sign), kind)
    return net


def write_graphml(net: Network, partition: Mapping[str, int] | None, path: str | Path) -> None:
    import networkx as nx

    g = nx.Graph()
    for x in net.sorted_nodes():
        node = net.nodes[x]
        attrs = {"kind": node.kind, "de_direction": node.de_direction}
        if partition is not None:
            attrs["module"] = int(partition[x])
        g.add_node(x, **attrs)
    for e in net.sorted_edges():
        g.add_edge(e.u, e.v, weight=e.weight, sign=e.sign, kind=e.kind)
    nx.write_graphml(g, str(path), encoding="utf-8", prettyprint=True)


def write_modules_tsv(net: Network, partition: Mapping[str, int], path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("node\tkind\tmodule_id\n")
    for x in net.sorted_nodes():
        buf.write(f"{x}\t{net.nodes[x].kind}\t{partition[x]}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def summary_dict(net: Network, partition: Mapping[str, int], summaries: Sequence[ModuleSummary],
                 gamma: float, seed: int) -> dict:
    return {
        "n_nodes": len(net.nodes),
        "n_edges": len(net.edges),
        "n_gene_gene_edges": sum(e.kind == "gene-gene" for e in net.edges.values()),
        "n_gene_clinical_edges": sum(e.kind == "gene-clinical" for e in net.edges.values()),
        "gamma": gamma,
        "seed": seed,
        "modularity": modularity_score(net, partition, gamma) if net.edges else 0.0,
        "module_sizes": [s.size for s in summaries],
        "modules": [s.to_dict() for s in summaries],
    }


EXPORT_FORMATS = ("edgelist", "graphml", "modules-tsv", "summary-json")


def export(net: Network, partition: Mapping[str, int], fmt: str, path: str | Path, *,
           gamma: float = 1.0, seed: int = 0, extra: Mapping | None = None) -> Path:
    """Write one export format; output bytes depend only on the inputs."""
    path = Path(path)
    if fmt == "edgelist":
        write_edgelist(net, path)
    elif fmt == "graphml":
        write_graphml(net, partition, path)
    elif fmt == "modules-tsv":
        write_modules_tsv(net, partition, path)
    elif fmt == "summary-json":
        doc = summary_dict(net, partition, summarize_modules(net, partition), gamma, seed)
        if extra:
            doc.update(extra)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown export format {fmt!r}; choose from {EXPORT_FORMATS}")
    return path
