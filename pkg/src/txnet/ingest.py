"""Count, sample-metadata and clinical table I/O plus sample/gene QC filters.

All tables are UTF-8, tab separated, with ``.`` as decimal point.  Missing
clinical values are written as ``NA``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CLINICAL_VARIABLES = ("bmi", "homa_ir", "total_chol", "ldl", "hdl", "waist")
META_COLUMNS = ("sample_id", "subject_id", "cid", "center", "sex", "age", "batch")


class ParseError(ValueError):
    """Malformed input table.  ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyFile(ParseError):
    pass


class RaggedRow(ParseError):
    pass


class DuplicateGeneId(ParseError):
    def __init__(self, gene_id: str, line: int | None = None):
        self.gene_id = gene_id
        super().__init__(f"duplicate gene id {gene_id!r}", line)


class DuplicateSampleId(ParseError):
    def __init__(self, sample_id: str, line: int | None = None):
        self.sample_id = sample_id
        super().__init__(f"duplicate sample id {sample_id!r}", line)


class NegativeCount(ParseError):
    def __init__(self, value: str, line: int | None = None):
        super().__init__(f"negative count {value!r}", line)


class NonIntegerCount(ParseError):
    def __init__(self, value: str, line: int | None = None):
        super().__init__(f"non-integer count {value!r}", line)


class MarkerAbsent(KeyError):
    pass


class TooFewSamples(ValueError):
    pass


@dataclass(frozen=True)
class CountMatrix:
    """Integer genes x samples count table."""

    gene_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape != (len(self.gene_ids), len(self.sample_ids)):
            raise ValueError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.gene_ids)} genes x {len(self.sample_ids)} samples"
            )
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise ValueError("counts must be integers")
            counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        _check_unique(self.gene_ids, DuplicateGeneId)
        _check_unique(self.sample_ids, DuplicateSampleId)
        counts = counts.astype(np.int64, copy=True)
        counts.setflags(write=False)
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "counts", counts)

    @property
    def lib_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def subset(self, genes: Sequence[str] | np.ndarray | None = None,
               samples: Sequence[str] | np.ndarray | None = None) -> "CountMatrix":
        """Select genes/samples by id list or boolean mask, keeping matrix order."""
        gi = _resolve(self.gene_ids, genes)
        si = _resolve(self.sample_ids, samples)
        return CountMatrix(
            tuple(self.gene_ids[i] for i in gi),
            tuple(self.sample_ids[j] for j in si),
            self.counts[np.ix_(gi, si)],
        )


def _resolve(ids: tuple[str, ...], sel) -> np.ndarray:
    if sel is None:
        return np.arange(len(ids))
    sel = np.asarray(sel)
    if sel.dtype == bool:
        return np.flatnonzero(sel)
    wanted = set(sel.tolist())
    return np.array([i for i, x in enumerate(ids) if x in wanted], dtype=int)


def _check_unique(ids: Iterable[str], exc) -> None:
    seen = set()
    for x in ids:
        if x in seen:
            raise exc(x)
        seen.add(x)


def load_counts(path: str | Path) -> CountMatrix:
    """Read a ``gene_id`` + sample-columns TSV of non-negative integers."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_counts(text)


def parse_counts(text: str) -> CountMatrix:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise EmptyFile("empty count file", 1)
    header = lines[0].split("\t")
    if header[0] != "gene_id":
        raise ParseError(f"first header column must be 'gene_id', got {header[0]!r}", 1)
    samples = header[1:]
    if not samples:
        raise ParseError("no sample columns", 1)
    seen: set[str] = set()
    for s in samples:
        if s in seen:
            raise DuplicateSampleId(s, 1)
        seen.add(s)

    genes: list[str] = []
    gene_seen: set[str] = set()
    rows: list[list[int]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(header):
            raise RaggedRow(f"expected {len(header)} fields, got {len(fields)}", lineno)
        gid = fields[0]
        if gid in gene_seen:
            raise DuplicateGeneId(gid, lineno)
        gene_seen.add(gid)
        row = []
        for cell in fields[1:]:
            try:
                v = int(cell)
            except ValueError:
                raise NonIntegerCount(cell, lineno) from None
            if v < 0:
                raise NegativeCount(cell, lineno)
            row.append(v)
        genes.append(gid)
        rows.append(row)
    if not rows:
        raise EmptyFile("count file has a header but no gene rows", 1)
    return CountMatrix(tuple(genes), tuple(samples), np.array(rows, dtype=np.int64))


def write_counts(m: CountMatrix, path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("\t".join(("gene_id",) + m.sample_ids) + "\n")
    for gid, row in zip(m.gene_ids, m.counts):
        buf.write(gid + "\t" + "\t".join(map(str, row.tolist())) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


@dataclass(frozen=True)
class SampleMeta:
    """Per-sample design table; columns are parallel tuples."""

    sample_id: tuple[str, ...]
    subject_id: tuple[str, ...]
    cid: tuple[int, ...]
    center: tuple[str, ...]
    sex: tuple[str, ...]
    age: tuple[float, ...]
    batch: tuple[str, ...]

    def __post_init__(self):
        n = len(self.sample_id)
        for name in META_COLUMNS:
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        _check_unique(self.sample_id, DuplicateSampleId)
        keys = set()
        for subj, c in zip(self.subject_id, self.cid):
            if c not in (1, 2, 3):
                raise ValueError(f"cid must be 1, 2 or 3, got {c}")
            if (subj, c) in keys:
                raise ValueError(f"duplicate (subject_id, cid) = ({subj}, {c})")
            keys.add((subj, c))
        for s in self.sex:
            if s not in ("M", "F"):
                raise ValueError(f"sex must be M or F, got {s!r}")

    def __len__(self) -> int:
        return len(self.sample_id)

    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.sample_id)}

    def subset(self, sample_ids: Iterable[str]) -> "SampleMeta":
        idx = self.index()
        rows = [idx[s] for s in sample_ids]
        return SampleMeta(*(tuple(getattr(self, c)[i] for i in rows) for c in META_COLUMNS))

    def aligned_to(self, m: CountMatrix) -> "SampleMeta":
        """Rows reordered to the matrix columns; every matrix sample must appear."""
        idx = self.index()
        missing = [s for s in m.sample_ids if s not in idx]
        if missing:
            raise ValueError(f"samples without metadata: {missing[:5]}")
        return self.subset(m.sample_ids)


def _read_tsv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        rows = [r for r in reader if r]
    if not rows:
        raise EmptyFile(f"{path}: empty file", 1)
    header = rows[0]
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise RaggedRow(f"expected {len(header)} fields, got {len(r)}", lineno)
    return header, rows[1:]


def load_meta(path: str | Path) -> SampleMeta:
    header, rows = _read_tsv(path)
    missing = [c for c in META_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"meta file lacks columns {missing}", 1)
    col = {c: header.index(c) for c in META_COLUMNS}
    return SampleMeta(
        sample_id=tuple(r[col["sample_id"]] for r in rows),
        subject_id=tuple(r[col["subject_id"]] for r in rows),
        cid=tuple(int(r[col["cid"]]) for r in rows),
        center=tuple(r[col["center"]] for r in rows),
        sex=tuple(r[col["sex"]] for r in rows),
        age=tuple(float(r[col["age"]]) for r in rows),
        batch=tuple(r[col["batch"]] for r in rows),
    )


def write_meta(meta: SampleMeta, path: str | Path) -> None:
    lines = ["\t".join(META_COLUMNS)]
    for i in range(len(meta)):
        vals = [str(getattr(meta, c)[i]) if c != "age" else _fmt(meta.age[i]) for c in META_COLUMNS]
        lines.append("\t".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ClinicalTable:
    """Per (subject, cid) clinical values; ``values[var]`` is a float array with NaN for missing."""

    subject_id: tuple[str, ...]
    cid: tuple[int, ...]
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        keys = set()
        for k in zip(self.subject_id, self.cid):
            if k in keys:
                raise ValueError(f"duplicate (subject_id, cid) = {k}")
            keys.add(k)
        for name, v in self.values.items():
            v = np.asarray(v, dtype=float)
            if v.shape != (len(self.subject_id),):
                raise ValueError(f"clinical column {name} has wrong length")
            if np.any(np.isinf(v)):
                raise ValueError(f"clinical column {name} has non-finite values")
            if name == "bmi" and np.any(v[~np.isnan(v)] <= 0):
                raise ValueError("bmi must be positive")

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(self.values)

    def lookup(self, variable: str) -> dict[tuple[str, int], float]:
        v = self.values[variable]
        return {(s, c): float(x) for s, c, x in zip(self.subject_id, self.cid, v)}


def load_clinical(path: str | Path) -> ClinicalTable:
    header, rows = _read_tsv(path)
    for c in ("subject_id", "cid"):
        if c not in header:
            raise ParseError(f"clinical file lacks column {c}", 1)
    si, ci = header.index("subject_id"), header.index("cid")
    var_cols = [(j, h) for j, h in enumerate(header) if j not in (si, ci)]
    values = {}
    for j, name in var_cols:
        col = []
        for lineno, r in enumerate(rows, start=2):
            cell = r[j]
            if cell in ("NA", ""):
                col.append(math.nan)
                continue
            try:
                x = float(cell)
            except ValueError:
                raise ParseError(f"bad clinical value {cell!r} in {name}", lineno) from None
            if not math.isfinite(x):
                raise ParseError(f"non-finite clinical value {cell!r} in {name}", lineno)
            col.append(x)
        values[name] = np.array(col, dtype=float)
    return ClinicalTable(
        subject_id=tuple(r[si] for r in rows),
        cid=tuple(int(r[ci]) for r in rows),
        values=values,
    )


def write_clinical(tab: ClinicalTable, path: str | Path) -> None:
    names = list(tab.variables)
    lines = ["\t".join(["subject_id", "cid"] + names)]
    for i, (s, c) in enumerate(zip(tab.subject_id, tab.cid)):
        cells = [s, str(c)] + [_fmt(tab.values[n][i]) for n in names]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return repr(float(x))


def cpm(m: CountMatrix, factors: np.ndarray | None = None, prior: float = 0.5) -> np.ndarray:
    """Counts per million over effective library sizes ``lib_size * factor``."""
    if prior < 0:
        raise ValueError("prior must be >= 0")
    lib = m.lib_sizes.astype(float)
    if factors is None:
        factors = np.ones_like(lib)
    factors = np.asarray(factors, dtype=float)
    if factors.shape != lib.shape:
        raise ValueError("one normalization factor per sample required")
    eff = lib * factors
    if np.any(eff <= 0):
        bad = [m.sample_ids[j] for j in np.flatnonzero(eff <= 0)]
        raise ValueError(f"zero effective library size for samples {bad}")
    return 1e6 * (m.counts + prior) / eff


@dataclass
class QcReport:
    flagged_pca_outliers: dict[str, tuple[float, float]] = field(default_factory=dict)
    flagged_contaminated: dict[str, float] = field(default_factory=dict)
    excluded_batches: tuple[str, ...] = ()
    excluded_batch_samples: tuple[str, ...] = ()
    excluded_manual: tuple[str, ...] = ()
    retained_samples: tuple[str, ...] = ()
    retained_genes: tuple[str, ...] = ()

    def flagged(self) -> set[str]:
        return (set(self.flagged_pca_outliers) | set(self.flagged_contaminated)
                | set(self.excluded_batch_samples) | set(self.excluded_manual))

    def to_dict(self) -> dict:
        return {
            "flagged_pca_outliers": {k: list(v) for k, v in sorted(self.flagged_pca_outliers.items())},
            "flagged_contaminated": dict(sorted(self.flagged_contaminated.items())),
            "excluded_batches": sorted(self.excluded_batches),
            "excluded_batch_samples": sorted(self.excluded_batch_samples),
            "excluded_manual": sorted(self.excluded_manual),
            "n_retained_samples": len(self.retained_samples),
            "n_retained_genes": len(self.retained_genes),
            "retained_samples": list(self.retained_samples),
        }


def contamination_filter(m: CountMatrix, marker_gene: str = "HBB",
                         max_fraction: float = 0.20) -> dict[str, float]:
    """Samples whose marker-gene share of total gene counts exceeds ``max_fraction``.

    Returns ``{sample_id: fraction}`` for flagged samples.
    """
    if not 0 < max_fraction < 1:
        raise ValueError("max_fraction must be in (0, 1)")
    try:
        g = m.gene_ids.index(marker_gene)
    except ValueError:
        raise MarkerAbsent(marker_gene) from None
    lib = m.lib_sizes.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(lib > 0, m.counts[g] / lib, 0.0)
    return {m.sample_ids[j]: float(frac[j]) for j in np.flatnonzero(frac > max_fraction)}


def pca_scores(m: CountMatrix, n_components: int = 2) -> np.ndarray:
    """Sample scores on the leading PCs of log2(count + 1), sign-fixed.

    Each component's sign is chosen so that its largest-magnitude loading is
    positive.
    """
    X = np.log2(m.counts.T.astype(float) + 1.0)
    X = X - X.mean(axis=0)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    k = min(n_components, len(s))
    scores = U[:, :k] * s[:k]
    for c in range(k):
        if Vt[c, np.argmax(np.abs(Vt[c]))] < 0:
            scores[:, c] = -scores[:, c]
    if k < n_components:
        scores = np.hstack([scores, np.zeros((scores.shape[0], n_components - k))])
    return scores


def pca_outliers(m: CountMatrix, k_mads: float = 6.0) -> dict[str, tuple[float, float]]:
    """Samples whose PC1 or PC2 score lies more than ``k_mads`` MADs from the median."""
    if m.shape[1] < 3:
        raise TooFewSamples(f"PCA outlier screen needs >= 3 samples, got {m.shape[1]}")
    scores = pca_scores(m, 2)
    med = np.median(scores, axis=0)
    mad = np.median(np.abs(scores - med), axis=0)
    dev = np.abs(scores - med)
    # Component with zero spread in the bulk: anything off the median is an outlier,
    # but a column of ~0 scores (numerical noise) is not.
    scale = np.abs(scores).max() if scores.size else 0.0
    tol = 1e-9 * max(scale, 1.0)
    flagged = np.zeros(scores.shape[0], dtype=bool)
    for c in range(2):
        if mad[c] > tol:
            flagged |= dev[:, c] > k_mads * mad[c]
        else:
            flagged |= dev[:, c] > tol
    return {m.sample_ids[j]: (float(scores[j, 0]), float(scores[j, 1]))
            for j in np.flatnonzero(flagged)}


def zero_fraction_filter(m: CountMatrix, max_zero_frac: float = 0.25) -> np.ndarray:
    """Boolean gene mask: True where the fraction of zero counts is <= ``max_zero_frac``."""
    if not 0 <= max_zero_frac <= 1:
        raise ValueError("max_zero_frac must be in [0, 1]")
    n = m.shape[1]
    zeros = (m.counts == 0).sum(axis=1)
    # integer comparison avoids float rounding at the boundary
    return zeros <= math.floor(max_zero_frac * n + 1e-9)


def batch_samples(meta: SampleMeta, batches: Iterable[str]) -> tuple[str, ...]:
    drop = set(batches)
    return tuple(s for s, b in zip(meta.sample_id, meta.batch) if b in drop)


def read_exclude_list(path: str | Path) -> tuple[str, ...]:
    """One sample id per line; blank lines and ``#`` comments ignored."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return tuple(out)


def run_qc(m: CountMatrix, meta: SampleMeta, *, marker_gene: str | None = "HBB",
           max_marker_fraction: float = 0.20, k_mads: float | None = 6.0,
           exclude_batches: Sequence[str] = (), exclude_samples: Sequence[str] = ()
           ) -> tuple[CountMatrix, QcReport]:
    """Apply every sample filter to the original matrix and intersect the survivors.

    Flag sets are computed once on ``m`` so the outcome does not depend on
    filter order.  Genes are not filtered here (the zero-fraction rule runs
    per contrast inside differential analysis); only all-zero genes among
    the retained samples are dropped.
    """
    meta = meta.aligned_to(m)
    report = QcReport()
    if marker_gene is not None:
        if marker_gene in m.gene_ids:
            report.flagged_contaminated = contamination_filter(m, marker_gene, max_marker_fraction)
        else:
            raise MarkerAbsent(marker_gene)
    if k_mads is not None and m.shape[1] >= 3:
        report.flagged_pca_outliers = pca_outliers(m, k_mads)
    report.excluded_batches = tuple(sorted(set(exclude_batches)))
    report.excluded_batch_samples = batch_samples(meta, exclude_batches)
    report.excluded_manual = tuple(s for s in exclude_samples if s in set(m.sample_ids))
    bad = report.flagged()
    keep_s = [s for s in m.sample_ids if s not in bad]
    out = m.subset(samples=keep_s)
    nonzero = out.counts.sum(axis=1) > 0
    out = out.subset(genes=nonzero)
    report.retained_samples = out.sample_ids
    report.retained_genes = out.gene_ids
    return out, report
