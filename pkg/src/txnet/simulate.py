"""Synthetic datasets with planted truth, and small dense reference solvers.

Every generator takes a master seed; independent components draw from
streams derived from ``(seed, component name)`` so that regenerating one
piece does not perturb the others.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffexpr import FoldChangeMatrix
from .ingest import ClinicalTable, CountMatrix, SampleMeta


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# --------------------------------------------------------------------------
# precision patterns

def _dominant(theta_off: np.ndarray, ratio: float = 0.9) -> np.ndarray:
    """Unit-diagonal precision whose rows satisfy sum |off-diagonal| <= ratio."""
    off = theta_off.copy()
    np.fill_diagonal(off, 0.0)
    rows = np.abs(off).sum(1)
    worst = rows.max() if rows.size else 0.0
    if worst > ratio:
        off *= ratio / worst
    theta = off + np.eye(off.shape[0])
    return theta


def planted_precision(p: int, pattern: str, rng: np.random.Generator, *,
                      edge_min: float = 0.2, edge_max: float = 0.4,
                      block_size: int = 10, degree: float = 3.0,
                      positive_fraction: float = 0.8) -> np.ndarray:
    """Sparse diagonally dominant precision matrix.

    ``chain``: off-diagonal ``-edge_max`` between consecutive variables.
    ``block``: random sparse graphs inside consecutive blocks of
    ``block_size`` (mean degree ``degree``), none across blocks.
    ``random``: Erdos-Renyi graph with mean degree ``degree``.
    Edge magnitudes are uniform in [edge_min, edge_max]; a fraction
    ``positive_fraction`` of edges carry positive partial correlation
    (negative precision entry).  Rows are rescaled if needed so that the
    off-diagonal absolute row sum is at most 0.9.
    """
    off = np.zeros((p, p))
    if pattern == "identity":
        return np.eye(p)
    if pattern == "chain":
        for i in range(p - 1):
            off[i, i + 1] = off[i + 1, i] = -edge_max
        return _dominant(off)
    if pattern == "block":
        groups = [np.arange(s, min(s + block_size, p)) for s in range(0, p, block_size)]
    elif pattern == "random":
        groups = [np.arange(p)]
    else:
        raise ValueError(f"unknown precision pattern {pattern!r}")
    for g in groups:
        k = g.size
        if k < 2:
            continue
        prob = min(1.0, degree / (k - 1))
        # spanning path keeps each block connected
        order = rng.permutation(g)
        pairs = {tuple(sorted((int(order[i]), int(order[i + 1])))) for i in range(k - 1)}
        for a in range(k):
            for b in range(a + 1, k):
                if rng.random() < prob:
                    pairs.add((int(g[a]), int(g[b])))
        for a, b in sorted(pairs):
            mag = rng.uniform(edge_min, edge_max)
            sign = -1.0 if rng.random() < positive_fraction else 1.0
            off[a, b] = off[b, a] = sign * mag
    return _dominant(off)


def true_edges(theta: np.ndarray, gene_ids=None) -> set[tuple[str, str]]:
    p = theta.shape[0]
    ids = gene_ids if gene_ids is not None else [str(i) for i in range(p)]
    i, j = np.nonzero(np.triu(theta != 0, k=1))
    return {(ids[a], ids[b]) for a, b in zip(i, j)}


def partial_correlation(theta: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(theta))
    rho = -theta / np.outer(d, d)
    np.fill_diagonal(rho, 1.0)
    return rho


def gaussian_from_precision(theta: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rows drawn from N(0, theta^-1) through a Cholesky factor of the covariance."""
    try:
        np.linalg.cholesky(theta)
    except np.linalg.LinAlgError:
        raise AssertionError("planted precision matrix is not positive definite") from None
    cov = np.linalg.inv(theta)
    cov = 0.5 * (cov + cov.T)
    L = np.linalg.cholesky(cov)
    return rng.standard_normal((n, theta.shape[0])) @ L.T


def simulate_fc_from_precision(p: int, pattern: str, n: int, seed: int, **pattern_kw
                               ) -> tuple[FoldChangeMatrix, set[tuple[str, str]], np.ndarray]:
    """Fold-change matrix with rows from N(0, theta^-1) for a planted sparse theta."""
    theta = planted_precision(p, pattern, stream(seed, "precision"), **pattern_kw)
    X = gaussian_from_precision(theta, n, stream(seed, "rows"))
    genes = tuple(f"G{i:04d}" for i in range(p))
    subjects = tuple(f"S{i:04d}" for i in range(n))
    return FoldChangeMatrix(subjects, genes, X, "sim"), true_edges(theta, genes), theta


# --------------------------------------------------------------------------
# reference graphical lasso

def oracle_glasso(S: np.ndarray, lam: float, *, tol: float = 1e-10,
                  max_iter: int = 200_000) -> np.ndarray:
    """Dense reference solver for the unpenalized-diagonal graphical lasso.

    Proximal gradient on -log det(T) + tr(S T) + lam * |offdiag(T)|_1 with
    backtracking that keeps every iterate positive definite.  Stops when the
    objective changes by less than ``tol`` and the prox-gradient step is tiny.
    Meant for p <= 8.
    """
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    off_mask = ~np.eye(p, dtype=bool)

    def smooth(T):
        try:
            L = np.linalg.cholesky(T)
        except np.linalg.LinAlgError:
            return math.inf
        return -2.0 * np.log(np.diag(L)).sum() + np.sum(S * T)

    def total(T):
        return smooth(T) + lam * np.abs(T[off_mask]).sum()

    T = np.diag(1.0 / np.diag(S))
    f_old = total(T)
    t = 1.0
    for _ in range(max_iter):
        Tinv = np.linalg.inv(T)
        G = S - Tinv
        g0 = smooth(T)
        t = min(t * 2.0, 1e3)
        while True:
            Z = T - t * G
            Z[off_mask] = np.sign(Z[off_mask]) * np.maximum(np.abs(Z[off_mask]) - t * lam, 0.0)
            Z = 0.5 * (Z + Z.T)
            D = Z - T
            gz = smooth(Z)
            if math.isfinite(gz) and gz <= g0 + np.sum(G * D) + np.sum(D * D) / (2 * t) + 1e-15:
                break
            t *= 0.5
            if t < 1e-20:
                return T
        T = Z
        f_new = total(T)
        if abs(f_old - f_new) < tol and np.max(np.abs(D)) / t < 1e-8:
            break
        f_old = f_new
    return T


# --------------------------------------------------------------------------
# count scenarios

@dataclass
class ScenarioSpec:
    """Planted-truth count scenario; every field maps to a key=value line."""

    seed: int
    n_subjects: int = 50
    n_genes: int = 1000
    n_centers: int = 4
    n_timepoints: int = 2
    lib_size_min: float = 2e6
    lib_size_max: float = 6e6
    dispersion: float = 0.1
    subject_sd: float = 0.3
    n_de: int = 0
    de_log2_fold: float = 1.0
    de_down_fraction: float = 0.0
    fc_sd: float = 0.0
    precision_pattern: str = "identity"
    block_size: int = 10
    edge_min: float = 0.2
    edge_max: float = 0.4
    edge_degree: float = 3.0
    clinical_links: str = ""
    clinical_noise_sd: float = 0.5
    center_sd: float = 0.5
    marker_gene: str = ""
    n_contaminated: int = 0
    n_outliers: int = 0

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if self.n_de > self.n_genes:
            raise ValueError("n_de exceeds n_genes")
        if self.n_timepoints not in (2, 3):
            raise ValueError("n_timepoints must be 2 or 3")
        if self.dispersion < 0:
            raise ValueError("dispersion must be >= 0")
        for gene, _var, _slope in self.links():
            idx = int(gene[1:]) if gene[:1] == "G" and gene[1:].isdigit() else -1
            if not 0 <= idx < self.n_de:
                raise ValueError(f"clinical link on {gene!r}, which is not a planted DE gene")

    def links(self) -> list[tuple[str, str, float]]:
        """Parse ``clinical_links``: ``gene:variable:slope`` items separated by commas."""
        out = []
        for item in filter(None, (s.strip() for s in self.clinical_links.split(","))):
            gene, var, slope = item.split(":")
            out.append((gene, var, float(slope)))
        return out

    def gene_ids(self) -> tuple[str, ...]:
        ids = tuple(f"G{i:05d}" for i in range(self.n_genes))
        return ids + ((self.marker_gene,) if self.marker_gene else ())

    @classmethod
    def from_text(cls, text: str) -> "ScenarioSpec":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            t = types[key]
            kw[key] = int(value) if t == "int" else float(value) if t == "float" else value
        if "seed" not in kw:
            raise ValueError("scenario needs a seed")
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))


@dataclass
class Scenario:
    spec: ScenarioSpec
    counts: CountMatrix
    meta: SampleMeta
    clinical: ClinicalTable
    de_truth: dict[str, float]           # gene -> planted log2 fold (cid1 -> cid2)
    theta: np.ndarray                    # precision over the planted DE genes
    edge_truth: set[tuple[str, str]]
    module_truth: dict[str, int]
    link_truth: list[tuple[str, str, float]]
    contaminated: tuple[str, ...]
    outliers: tuple[str, ...]

    def write(self, out: str | Path) -> None:
        from .ingest import write_clinical, write_counts, write_meta
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_counts(self.counts, out / "counts.tsv")
        write_meta(self.meta, out / "meta.tsv")
        write_clinical(self.clinical, out / "clinical.tsv")
        (out / "scenario.txt").write_text(self.spec.to_text(), encoding="utf-8")
        write_truth(self, out)


def write_truth(sc: Scenario, out: Path) -> None:
    lines = ["gene_id\tlog2_fold\tis_de\tmodule"]
    for g in sc.spec.gene_ids():
        fold = sc.de_truth.get(g, 0.0)
        lines.append(f"{g}\t{fold!r}\t{'true' if g in sc.de_truth else 'false'}\t"
                     f"{sc.module_truth.get(g, -1)}")
    (out / "truth_genes.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    de_genes = sorted(sc.de_truth)
    rho = partial_correlation(sc.theta) if sc.theta.size else np.zeros((0, 0))
    idx = {g: i for i, g in enumerate(de_genes)}
    lines = ["source\ttarget\tpartial_corr"]
    for a, b in sorted(sc.edge_truth):
        lines.append(f"{a}\t{b}\t{float(rho[idx[a], idx[b]])!r}")
    (out / "truth_edges.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["gene_id\tclinical_var\tslope"]
    for g, v, s in sc.link_truth:
        lines.append(f"{g}\t{v}\t{s!r}")
    (out / "truth_links.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["sample_id\tkind"]
    lines += [f"{s}\tcontaminated" for s in sc.contaminated]
    lines += [f"{s}\toutlier" for s in sc.outliers]
    (out / "truth_samples.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_truth(path: str | Path) -> dict:
    """Read the truth tables written next to a simulated dataset."""
    path = Path(path)

    def rows(name):
        lines = (path / name).read_text(encoding="utf-8").splitlines()
        head = lines[0].split("\t")
        return [dict(zip(head, ln.split("\t"))) for ln in lines[1:] if ln]

    genes = rows("truth_genes.tsv")
    return {
        "de": {r["gene_id"]: float(r["log2_fold"]) for r in genes if r["is_de"] == "true"},
        "modules": {r["gene_id"]: int(r["module"]) for r in genes if int(r["module"]) >= 0},
        "edges": {(r["source"], r["target"]) for r in rows("truth_edges.tsv")},
        "links": [(r["gene_id"], r["clinical_var"], float(r["slope"])) for r in rows("truth_links.tsv")],
        "samples": {r["sample_id"]: r["kind"] for r in rows("truth_samples.tsv")},
    }


def _nb_draw(rng: np.random.Generator, mu: np.ndarray, phi: float) -> np.ndarray:
    if phi == 0:
        return rng.poisson(mu)
    lam = rng.gamma(1.0 / phi, phi * mu)
    return rng.poisson(lam)


CLINICAL_BASE = {"bmi": (34.0, 4.0), "homa_ir": (3.0, 1.0), "total_chol": (5.0, 0.8),
                 "ldl": (3.2, 0.7), "hdl": (1.2, 0.3), "waist": (108.0, 10.0)}
CLINICAL_CHANGE = {"bmi": -3.0, "homa_ir": -0.5, "total_chol": -0.3, "ldl": -0.2,
                   "hdl": 0.0, "waist": -7.0}


def simulate_counts(spec: ScenarioSpec) -> Scenario:
    """NB counts with subject effects, planted fold changes and clinical links.

    Timepoint 1 is baseline.  Timepoint 2 applies each planted DE gene's
    mean log2 fold plus a per-subject deviation drawn from the planted
    precision structure (scaled by ``fc_sd``).  Timepoint 3, when present,
    applies half of both.  Clinical changes from timepoint 1 are a
    variable-specific mean change plus linked genes' deviations times their
    slope, a per-center shift and noise.
    """
    G, S = spec.n_genes, spec.n_subjects
    gene_ids = spec.gene_ids()
    rng_base = stream(spec.seed, "baseline")
    log_abund = rng_base.normal(0.0, 1.5, G)
    # planted genes get random abundances from the upper half, as DE calls in practice do
    ranked = np.sort(log_abund)[::-1]
    upper = rng_base.permutation(G // 2)
    k = min(spec.n_de, upper.size)
    take = np.zeros(G, dtype=bool)
    take[upper[:k]] = True
    rest = rng_base.permutation(np.flatnonzero(~take))
    log_abund = np.concatenate([ranked[upper[:k]], ranked[rest]])
    prop = np.exp(log_abund)
    prop /= prop.sum()

    rng_de = stream(spec.seed, "de")
    fold = np.zeros(G)
    if spec.n_de:
        signs = np.where(rng_de.random(spec.n_de) < spec.de_down_fraction, -1.0, 1.0)
        fold[:spec.n_de] = signs * spec.de_log2_fold
    de_truth = {gene_ids[i]: float(fold[i]) for i in range(spec.n_de)}

    de_ids = list(gene_ids[:spec.n_de])
    if spec.n_de:
        theta = planted_precision(spec.n_de, spec.precision_pattern, stream(spec.seed, "precision"),
                                  edge_min=spec.edge_min, edge_max=spec.edge_max,
                                  block_size=spec.block_size, degree=spec.edge_degree)
    else:
        theta = np.zeros((0, 0))
    edge_truth = true_edges(theta, de_ids) if spec.n_de else set()
    if spec.precision_pattern == "block" and spec.n_de:
        module_truth = {g: i // spec.block_size for i, g in enumerate(de_ids)}
    elif spec.n_de:
        module_truth = {g: 0 for g in de_ids}
    else:
        module_truth = {}

    dev = np.zeros((S, G))
    if spec.n_de and spec.fc_sd > 0:
        Z = gaussian_from_precision(theta, S, stream(spec.seed, "deviation"))
        dev[:, :spec.n_de] = spec.fc_sd * Z / np.sqrt(np.diag(np.linalg.inv(theta)))

    rng_subj = stream(spec.seed, "subjects")
    subj_eff = rng_subj.normal(0.0, spec.subject_sd, (S, G))
    rng_lib = stream(spec.seed, "libraries")
    T = spec.n_timepoints
    lib = rng_lib.uniform(spec.lib_size_min, spec.lib_size_max, (S, T))

    rng_counts = stream(spec.seed, "counts")
    sample_ids, subj_col, cid_col, center_col, sex_col, age_col, batch_col = ([] for _ in range(7))
    columns = []
    subjects = [f"P{s:04d}" for s in range(S)]
    rng_meta = stream(spec.seed, "meta")
    sexes = np.where(rng_meta.random(S) < 0.5, "F", "M")
    ages = np.round(rng_meta.uniform(25, 60, S), 1)
    centers = [f"C{(s % max(spec.n_centers, 1)) + 1}" for s in range(S)]
    log2_effect = {1: np.zeros((S, G)), 2: fold[None, :] + dev, 3: 0.5 * (fold[None, :] + dev)}
    for s in range(S):
        for t in range(1, T + 1):
            mu = lib[s, t - 1] * prop * np.exp(subj_eff[s] + log2_effect[t][s] * math.log(2))
            columns.append(mu)
            sample_ids.append(f"{subjects[s]}_T{t}")
            subj_col.append(subjects[s])
            cid_col.append(t)
            center_col.append(centers[s])
            sex_col.append(str(sexes[s]))
            age_col.append(float(ages[s]))
    mu = np.column_stack(columns)
    counts = _nb_draw(rng_counts, mu, spec.dispersion).astype(np.int64)
    n_samples = counts.shape[1]
    batch_col = [f"B{j // 96 + 1}" for j in range(n_samples)]

    outliers: tuple[str, ...] = ()
    if spec.n_outliers:
        rng_out = stream(spec.seed, "outliers")
        pick = sorted(rng_out.choice(n_samples, spec.n_outliers, replace=False).tolist())
        for j in pick:
            shift = rng_out.normal(0.0, 3.0, G)
            counts[:, j] = _nb_draw(rng_out, mu[:, j] * np.exp(shift), spec.dispersion)
        outliers = tuple(sample_ids[j] for j in pick)

    contaminated: tuple[str, ...] = ()
    if spec.marker_gene:
        rng_mk = stream(spec.seed, "marker")
        total = counts.sum(0)
        share = rng_mk.uniform(0.0, 0.02, n_samples)
        if spec.n_contaminated:
            pick = rng_mk.choice(n_samples, spec.n_contaminated, replace=False)
            share[pick] = rng_mk.uniform(0.25, 0.45, spec.n_contaminated)
            contaminated = tuple(sample_ids[j] for j in sorted(pick.tolist()))
        marker = np.round(total * share / (1.0 - share)).astype(np.int64)
        counts = np.vstack([counts, marker[None, :]])

    cm = CountMatrix(gene_ids, tuple(sample_ids), counts)
    meta = SampleMeta(tuple(sample_ids), tuple(subj_col), tuple(cid_col), tuple(center_col),
                      tuple(sex_col), tuple(age_col), tuple(batch_col))

    links = spec.links()
    rng_clin = stream(spec.seed, "clinical")
    center_names = sorted(set(centers))
    n_c = len(center_names)
    values: dict[str, list[float]] = {v: [] for v in CLINICAL_BASE}
    clin_subj, clin_cid = [], []
    center_shift = {v: dict(zip(center_names, rng_clin.normal(0.0, spec.center_sd, n_c)))
                    for v in CLINICAL_BASE}
    base = {v: rng_clin.normal(m, sd, S) for v, (m, sd) in CLINICAL_BASE.items()}
    noise = {v: rng_clin.normal(0.0, spec.clinical_noise_sd, (S, T)) for v in CLINICAL_BASE}
    gidx = {g: i for i, g in enumerate(gene_ids)}
    for s in range(S):
        for t in range(1, T + 1):
            clin_subj.append(subjects[s])
            clin_cid.append(t)
            for v in CLINICAL_BASE:
                if t == 1:
                    x = base[v][s]
                else:
                    step = 1.0 if t == 2 else 0.5
                    delta = step * CLINICAL_CHANGE[v] + center_shift[v][centers[s]]
                    for g, var, slope in links:
                        if var == v:
                            delta += slope * log2_effect[t][s, gidx[g]]
                    x = base[v][s] + delta + noise[v][s, t - 1]
                if v == "bmi":
                    x = max(x, 15.0)
                values[v].append(float(x))
    clinical = ClinicalTable(tuple(clin_subj), tuple(clin_cid),
                             {v: np.array(vals) for v, vals in values.items()})
    return Scenario(spec, cm, meta, clinical, de_truth, theta, edge_truth, module_truth,
                    links, contaminated, outliers)
