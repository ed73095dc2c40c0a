"""Command-line driver: qc, de, fc, glasso, associate, cluster, pipeline, simulate.

Every stage writes its outputs into a run directory together with a stage
record ``stages/<stage>.json`` holding sha256 digests of what it read and
wrote.  Downstream stages refuse to run on missing or modified upstream
files.  ``manifest.json`` is rebuilt from the stage records after each stage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .assoc import clinical_scan, write_associations, write_clinical_edges, load_clinical_edges
from .diffexpr import (CONTRASTS, contrast_label, de_contrast, load_de, load_fc, paired_logfc,
                       pair_samples, parse_contrast, write_de, write_fc)
from .ingest import load_clinical, load_counts, load_meta, read_exclude_list, run_qc, write_counts, write_meta
from .netgraph import EXPORT_FORMATS, assemble, cluster_modules, export, modularity_score
from .netinfer import gene_edges, glasso, load_gene_edges, ric_lambda, standardize, write_gene_edges
from .simulate import ScenarioSpec, load_truth, simulate_counts

log = logging.getLogger("txnet")


class StageError(RuntimeError):
    pass


class MissingArtifact(StageError):
    pass


class DigestMismatch(StageError):
    pass


# --------------------------------------------------------------------------
# digests and stage records

def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _clean(x):
    """JSON-safe copy: non-finite floats become null, numpy scalars become Python."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def seed_for(seed: int, name: str) -> int:
    """Integer seed derived from the master seed for one named component."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class Run:
    """A run directory with atomic stage outputs and digest bookkeeping."""

    def __init__(self, out: str | Path, record_timings: bool = False):
        self.out = Path(out)
        self.record_timings = record_timings
        (self.out / "stages").mkdir(parents=True, exist_ok=True)

    def record_path(self, stage: str) -> Path:
        return self.out / "stages" / f"{stage}.json"

    def load_record(self, stage: str) -> dict:
        p = self.record_path(stage)
        if not p.exists():
            raise MissingArtifact(f"stage {stage!r} has not been run in {self.out} (missing {p.name})")
        return json.loads(p.read_text(encoding="utf-8"))

    def require(self, stage: str, name: str) -> Path:
        """Path of an upstream output after checking it against its producer's record."""
        rec = self.load_record(stage)
        path = self.out / name
        if name not in rec["outputs"]:
            raise MissingArtifact(f"stage {stage!r} did not produce {name}")
        if not path.exists():
            raise MissingArtifact(f"missing upstream artifact {path}")
        if sha256(path) != rec["outputs"][name]:
            raise DigestMismatch(f"{name} changed since stage {stage!r} wrote it; re-run {stage}")
        for dep, digest in rec.get("inputs", {}).items():
            dep_path = self.out / dep
            if dep in rec.get("upstream", {}) and dep_path.exists() and sha256(dep_path) != digest:
                raise DigestMismatch(f"stage {stage!r} is stale: {dep} changed since it ran")
        return path

    def stage(self, stage: str, params: dict, inputs: dict[str, Path],
              build: Callable[[Path], dict]) -> dict:
        """Run ``build(tmpdir)``; move its files into place and write the record.

        ``inputs`` maps a label to a file; labels naming files in the run
        directory are marked as upstream so staleness can be detected later.
        Nothing in the run directory changes if ``build`` raises.
        """
        t0 = time.perf_counter()
        tmp = Path(tempfile.mkdtemp(prefix=f".{stage}-", dir=self.out))
        try:
            counts = build(tmp)
            produced = sorted(p.name for p in tmp.iterdir())
            digests = {name: sha256(tmp / name) for name in produced}
            for name in produced:
                os.replace(tmp / name, self.out / name)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)
        upstream = {}
        in_digests = {}
        for label, path in sorted(inputs.items()):
            in_digests[label] = sha256(path)
            if Path(path).resolve().parent == self.out.resolve():
                upstream[label] = True
        rec = {
            "stage": stage,
            "tool_version": __version__,
            "params": _clean(params),
            "inputs": in_digests,
            "upstream": upstream,
            "outputs": digests,
            "counts": _clean(counts or {}),
        }
        if self.record_timings:
            rec["wall_clock_s"] = round(time.perf_counter() - t0, 3)
        self.record_path(stage).write_text(_dump(rec), encoding="utf-8")
        self.write_manifest()
        log.info("stage %s done: %s", stage, counts)
        return rec

    def write_manifest(self) -> None:
        stages = {}
        for p in sorted((self.out / "stages").glob("*.json")):
            stages[p.stem] = json.loads(p.read_text(encoding="utf-8"))
        doc = {"tool": "txnet", "tool_version": __version__, "stages": stages}
        (self.out / "manifest.json").write_text(_dump(doc), encoding="utf-8")


# --------------------------------------------------------------------------
# stages

def stage_qc(run: Run, counts: Path, meta: Path, *, marker_gene: str | None, max_marker_fraction: float,
             k_mads: float | None, exclude_batch: Sequence[str], exclude_samples: Path | None) -> dict:
    m = load_counts(counts)
    md = load_meta(meta)
    excl = read_exclude_list(exclude_samples) if exclude_samples else ()
    marker = marker_gene if marker_gene and marker_gene in m.gene_ids else None
    if marker_gene and marker is None:
        log.warning("marker gene %s absent; contamination filter disabled", marker_gene)
    qc, report = run_qc(m, md, marker_gene=marker, max_marker_fraction=max_marker_fraction,
                        k_mads=k_mads, exclude_batches=exclude_batch, exclude_samples=excl)

    def build(tmp: Path) -> dict:
        write_counts(qc, tmp / "counts_qc.tsv")
        write_meta(md.subset(qc.sample_ids), tmp / "meta_qc.tsv")
        (tmp / "qc_report.json").write_text(_dump(_clean(report.to_dict())), encoding="utf-8")
        return {"input_genes": m.shape[0], "input_samples": m.shape[1],
                "retained_genes": qc.shape[0], "retained_samples": qc.shape[1],
                "flagged_samples": len(report.flagged())}

    inputs = {"counts": counts, "meta": meta}
    if exclude_samples:
        inputs["exclude_samples"] = exclude_samples
    params = {"marker_gene": marker, "max_marker_fraction": max_marker_fraction, "k_mads": k_mads,
              "exclude_batch": sorted(exclude_batch)}
    return run.stage("qc", params, inputs, build)


def stage_de(run: Run, contrast: str, *, alpha: float, fc_threshold: float, dispersion: str,
             max_zero_frac: float, prior_df: float) -> dict:
    c = contrast_label(contrast)
    cpath = run.require("qc", "counts_qc.tsv")
    mpath = run.require("qc", "meta_qc.tsv")
    m, md = load_counts(cpath), load_meta(mpath)
    res = de_contrast(m, md, c, alpha, fc_threshold, dispersion=dispersion,
                      max_zero_frac=max_zero_frac, prior_df=prior_df)

    def build(tmp: Path) -> dict:
        write_de(res.results, tmp / f"de_{c}.tsv")
        lines = ["sample_id\tfactor"] + [f"{s}\t{f!r}" for s, f in
                                         zip(res.sample_ids, res.tmm.factors.tolist())]
        (tmp / f"tmm_{c}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        status = [r.status for r in res.results]
        return {"paired_subjects": len(res.subjects), "genes": len(res.results),
                "tested": status.count("tested"),
                "removed_zero_frac": status.count("removed_zero_frac"),
                "removed_inestimable": status.count("removed_inestimable"),
                "passing": len(res.passing_genes()),
                "common_dispersion": res.dispersion.common,
                "tmm_reference": res.tmm.reference_sample}

    params = {"contrast": c, "alpha": alpha, "fc_threshold": fc_threshold, "dispersion": dispersion,
              "max_zero_frac": max_zero_frac, "prior_df": prior_df}
    return run.stage(f"de_{c}", params, {"counts_qc.tsv": cpath, "meta_qc.tsv": mpath}, build)


def stage_fc(run: Run, contrast: str, *, prior: float) -> dict:
    c = contrast_label(contrast)
    cpath = run.require("qc", "counts_qc.tsv")
    mpath = run.require("qc", "meta_qc.tsv")
    dpath = run.require(f"de_{c}", f"de_{c}.tsv")
    tpath = run.require(f"de_{c}", f"tmm_{c}.tsv")
    m, md = load_counts(cpath), load_meta(mpath)
    genes = [r.gene_id for r in load_de(dpath) if r.passes_fc_filter]
    rows = [ln.split("\t") for ln in tpath.read_text(encoding="utf-8").splitlines()[1:]]
    samples = [r[0] for r in rows]
    factors = np.array([float(r[1]) for r in rows])
    sub = m.subset(samples=samples)

    def build(tmp: Path) -> dict:
        if genes:
            fc = paired_logfc(sub, md, genes, c, factors, prior)
            write_fc(fc, tmp / f"fc_{c}.tsv")
            n_subj = len(fc.subject_ids)
        else:
            subjects, _, _ = pair_samples(sub, md, c)
            (tmp / f"fc_{c}.tsv").write_text(
                "subject_id\n" + "".join(s + "\n" for s in subjects), encoding="utf-8")
            n_subj = len(subjects)
        return {"subjects": n_subj, "genes": len(genes)}

    inputs = {"counts_qc.tsv": cpath, "meta_qc.tsv": mpath, f"de_{c}.tsv": dpath, f"tmm_{c}.tsv": tpath}
    return run.stage(f"fc_{c}", {"contrast": c, "prior": prior}, inputs, build)


def stage_glasso(run: Run, contrast: str, *, seed: int, lam: float | None, ric_reps: int,
                 ric_statistic: str, tol: float, max_iter: int) -> dict:
    c = contrast_label(contrast)
    fpath = run.require(f"fc_{c}", f"fc_{c}.tsv")
    fc = load_fc(fpath, c)
    info: dict = {"genes": len(fc.gene_ids)}
    edges = []
    if len(fc.gene_ids) >= 2:
        S = standardize(fc)
        if lam is None:
            keep = [fc.gene_ids.index(g) for g in S.gene_ids]
            chosen = ric_lambda(fc.values[:, keep], ric_reps, seed_for(seed, f"ric/{c}"), ric_statistic)
            source = "ric"
        else:
            chosen, source = float(lam), "override"
        est = glasso(S, chosen, tol=tol, max_iter=max_iter)
        edges = gene_edges(est)
        info.update(lambda_=chosen, lambda_source=source, duality_gap=est.duality_gap,
                    sweeps=est.n_iter, converged=est.converged, dropped_constant=len(S.dropped))
    else:
        info.update(lambda_=lam, lambda_source="override" if lam is not None else "none")
    info["edges"] = len(edges)
    info["lambda"] = info.pop("lambda_")

    def build(tmp: Path) -> dict:
        write_gene_edges(edges, tmp / f"edges_genes_{c}.tsv")
        return info

    params = {"contrast": c, "seed": seed, "lambda": lam, "ric_reps": ric_reps,
              "ric_statistic": ric_statistic, "tol": tol, "max_iter": max_iter}
    return run.stage(f"glasso_{c}", params, {f"fc_{c}.tsv": fpath}, build)


def stage_associate(run: Run, contrast: str, clinical: Path, *, alpha: float, change: str,
                    test: str, variables: Sequence[str] | None) -> dict:
    c = contrast_label(contrast)
    fpath = run.require(f"fc_{c}", f"fc_{c}.tsv")
    mpath = run.require("qc", "meta_qc.tsv")
    fc = load_fc(fpath, c)
    md = load_meta(mpath)
    tab = load_clinical(clinical)
    if fc.gene_ids:
        scan = clinical_scan(fc, tab, md, alpha, variables=variables, change=change, test=test)
        results, edges, skipped = scan.results, scan.edges, scan.skipped
    else:
        results, edges, skipped = [], [], []

    def build(tmp: Path) -> dict:
        write_associations(results, tmp / f"associations_{c}.tsv")
        write_clinical_edges(edges, tmp / f"edges_clinical_{c}.tsv")
        return {"models": len(results), "edges": len(edges), "skipped": len(skipped)}

    params = {"contrast": c, "alpha": alpha, "change": change, "lmm_test": test,
              "variables": list(variables) if variables else sorted(tab.variables)}
    inputs = {f"fc_{c}.tsv": fpath, "meta_qc.tsv": mpath, "clinical": clinical}
    return run.stage(f"associate_{c}", params, inputs, build)


def recovery_metrics(truth: dict, de_rows, net, partition, gene_edge_list, clinical_edges) -> dict:
    """Planted-truth recovery for a simulated scenario."""
    planted_de = set(truth["de"])
    called = {r.gene_id for r in de_rows if r.passes_fc_filter}
    tp = len(called & planted_de)
    out: dict = {"de_planted": len(planted_de), "de_called": len(called), "de_true_positive": tp,
                 "de_recall": tp / len(planted_de) if planted_de else None,
                 "de_precision": tp / len(called) if called else None}
    est = {tuple(sorted((e.source, e.target))) for e in gene_edge_list}
    true = {tuple(sorted(e)) for e in truth["edges"]}
    etp = len(est & true)
    prec = etp / len(est) if est else None
    rec = etp / len(true) if true else None
    out.update(edges_planted=len(true), edges_called=len(est), edges_true_positive=etp,
               edge_precision=prec, edge_recall=rec,
               edge_f1=(2 * prec * rec / (prec + rec)) if prec and rec else 0.0)
    found = {(g, v): s for g, v, _slope, s in clinical_edges}
    links = []
    for g, v, slope in truth["links"]:
        links.append({"gene_id": g, "clinical_var": v, "planted_sign": int(np.sign(slope)),
                      "recovered": (g, v) in found,
                      "sign_correct": found.get((g, v)) == int(np.sign(slope))})
    out["links"] = links
    hubs = {}
    for var in sorted({v for _, v, _ in truth["links"]}):
        partners = [g for g, v, _ in truth["links"] if v == var]
        if var not in partition:
            hubs[var] = {"in_network": False, "partners": len(partners), "partner_fraction": 0.0}
            continue
        mod = partition[var]
        same = sum(partition.get(g) == mod for g in partners)
        hubs[var] = {"in_network": True, "module": mod, "partners": len(partners),
                     "partners_in_module": same, "partner_fraction": same / len(partners)}
    out["clinical_hubs"] = hubs
    return out


def stage_cluster(run: Run, contrast: str, *, seed: int, gamma: float, truth: Path | None,
                  formats: Sequence[str]) -> dict:
    c = contrast_label(contrast)
    gpath = run.require(f"glasso_{c}", f"edges_genes_{c}.tsv")
    kpath = run.require(f"associate_{c}", f"edges_clinical_{c}.tsv")
    dpath = run.require(f"de_{c}", f"de_{c}.tsv")
    grec = run.load_record(f"glasso_{c}")
    ge = load_gene_edges(gpath)
    ce = load_clinical_edges(kpath)
    de_rows = load_de(dpath)
    net = assemble(ge, [(g, v, s) for g, v, s, _ in ce], de_rows)
    if not net.nodes:
        raise StageError(f"contrast {c}: network is empty (no gene-gene or gene-clinical edges)")
    partition = cluster_modules(net, gamma, seed_for(seed, f"cluster/{c}"))
    extra = {"contrast": c, "lambda": grec["counts"].get("lambda"),
             "lambda_source": grec["counts"].get("lambda_source"),
             "duality_gap": grec["counts"].get("duality_gap")}
    if truth is not None:
        extra["recovery"] = _clean(recovery_metrics(load_truth(truth), de_rows, net, partition, ge, ce))

    def build(tmp: Path) -> dict:
        names = {"edgelist": f"network_{c}.edgelist.tsv", "graphml": f"network_{c}.graphml",
                 "modules-tsv": f"modules_{c}.tsv", "summary-json": f"summary_{c}.json"}
        for fmt in formats:
            export(net, partition, fmt, tmp / names[fmt], gamma=gamma, seed=seed, extra=extra)
        return {"nodes": len(net.nodes), "edges": len(net.edges),
                "modules": len(set(partition.values())),
                "modularity": modularity_score(net, partition, gamma)}

    params = {"contrast": c, "seed": seed, "gamma": gamma, "formats": list(formats),
              "truth": str(truth) if truth else None}
    inputs = {f"edges_genes_{c}.tsv": gpath, f"edges_clinical_{c}.tsv": kpath, f"de_{c}.tsv": dpath}
    if truth is not None:
        for name in ("truth_genes.tsv", "truth_edges.tsv", "truth_links.tsv"):
            inputs[name] = Path(truth) / name
    return run.stage(f"cluster_{c}", params, inputs, build)


# --------------------------------------------------------------------------
# argument handling

def _config_defaults(path: str | None) -> dict:
    """key=value lines; keys are option names with or without leading dashes."""
    if not path:
        return {}
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def _positive(kind):
    def conv(text):
        x = kind(text)
        if not x > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return x
    return conv


def _fraction(text):
    x = float(text)
    if not 0 <= x <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return x


def _open_fraction(text):
    x = float(text)
    if not 0 < x < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return x


def _nonneg(text):
    x = float(text)
    if not x >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return x


def _contrast(text):
    try:
        return contrast_label(parse_contrast(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file pre-populating options (command-line options win)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--threads", type=_positive(int), default=1,
                   help="worker threads for independent contrasts")
    p.add_argument("--record-timings", action="store_true",
                   help="store wall-clock seconds in stage records (makes runs differ byte-wise)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_contrast(p, multiple=False):
    if multiple:
        p.add_argument("--contrast", type=_contrast, action="append",
                       help="1-2, 1-3 or 2-3; repeatable (default: every contrast with paired data)")
    else:
        p.add_argument("--contrast", type=_contrast, required=True, help="1-2, 1-3 or 2-3")


def _add_qc(p):
    p.add_argument("--counts", type=Path, required=True)
    p.add_argument("--meta", type=Path, required=True)
    p.add_argument("--marker-gene", default="HBB", help="contamination marker; 'none' disables")
    p.add_argument("--max-marker-fraction", type=_open_fraction, default=0.20)
    p.add_argument("--k-mads", type=_positive(float), default=6.0)
    p.add_argument("--no-pca-filter", action="store_true")
    p.add_argument("--exclude-batch", action="append", default=[])
    p.add_argument("--exclude-samples", type=Path, help="file with one sample id per line")


def _add_de(p):
    p.add_argument("--alpha", type=_open_fraction, default=0.05)
    p.add_argument("--fc-threshold", type=_positive(float), default=1.3)
    p.add_argument("--dispersion", choices=("common", "tagwise"), default="tagwise")
    p.add_argument("--max-zero-frac", type=_fraction, default=0.25)
    p.add_argument("--prior-df", type=_nonneg, default=10.0)


def _add_fc(p):
    p.add_argument("--prior-count", type=_nonneg, default=0.5)


def _add_glasso(p):
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=_nonneg, help="fixed penalty, overrides RIC selection")
    p.add_argument("--ric-reps", type=_positive(int), default=20)
    p.add_argument("--ric-statistic", choices=("max", "mean"), default="max")
    p.add_argument("--glasso-tol", type=_positive(float), default=1e-4)
    p.add_argument("--glasso-max-iter", type=_positive(int), default=200)


def _add_assoc(p):
    p.add_argument("--clinical", type=Path, required=True)
    p.add_argument("--assoc-alpha", type=_open_fraction, default=0.05)
    p.add_argument("--change", choices=("diff", "percent"), default="diff")
    p.add_argument("--lmm-test", choices=("wald", "lrt"), default="wald")
    p.add_argument("--variables", help="comma-separated clinical variables (default: all)")


def _add_cluster(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, required=True)
    p.add_argument("--gamma", type=_positive(float), default=1.0)
    p.add_argument("--truth", type=Path, help="directory with simulator truth tables")
    p.add_argument("--formats", default=",".join(EXPORT_FORMATS),
                   help="comma-separated subset of " + ", ".join(EXPORT_FORMATS))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="txnet", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"txnet {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("qc", help="sample QC filters")
    _add_common(p)
    _add_qc(p)
    p = sub.add_parser("de", help="paired differential expression")
    _add_common(p)
    _add_contrast(p, multiple=True)
    _add_de(p)
    p = sub.add_parser("fc", help="per-subject fold changes of DE genes")
    _add_common(p)
    _add_contrast(p, multiple=True)
    _add_fc(p)
    p = sub.add_parser("glasso", help="gene-gene network by graphical lasso")
    _add_common(p)
    _add_contrast(p, multiple=True)
    _add_glasso(p)
    p = sub.add_parser("associate", help="gene-clinical mixed-model scan")
    _add_common(p)
    _add_contrast(p, multiple=True)
    _add_assoc(p)
    p = sub.add_parser("cluster", help="assemble, cluster and export the network")
    _add_common(p)
    _add_contrast(p, multiple=True)
    _add_cluster(p)
    p = sub.add_parser("pipeline", help="qc, de, fc, glasso, associate, cluster in order")
    _add_common(p)
    _add_contrast(p, multiple=True)
    _add_qc(p)
    _add_de(p)
    _add_fc(p)
    _add_glasso(p)
    _add_assoc(p)
    _add_cluster(p, seed=False)
    p = sub.add_parser("simulate", help="write a synthetic dataset with truth tables")
    p.add_argument("--config", help="key=value file pre-populating options")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenario", type=Path, help="scenario key=value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one scenario field; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    # the config must be read before the real parse so it can satisfy required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv[1:])[0].config if argv else None
    defaults = _config_defaults(config)
    choices = ap._subparsers._group_actions[0].choices
    if defaults and argv[0] in choices:
        sub = choices[argv[0]]
        known = {a.dest: a for a in sub._actions}
        for k, v in defaults.items():
            k = "lam" if k == "lambda" else k
            if k not in known or k in ("config", "out"):
                raise SystemExit(f"{config}: unknown option {k!r}")
            action = known[k]
            if isinstance(action, argparse._StoreTrueAction):
                sub.set_defaults(**{k: v.lower() in ("1", "true", "yes")})
            elif isinstance(action, argparse._AppendAction):
                sub.set_defaults(**{k: [action.type(x) if action.type else x for x in v.split(",")]})
            else:
                sub.set_defaults(**{k: action.type(v) if action.type else v})
            action.required = False
    return ap.parse_args(argv)


def _contrasts(args, run: Run) -> list[str]:
    if args.contrast:
        return list(dict.fromkeys(args.contrast))
    md = load_meta(run.require("qc", "meta_qc.tsv"))
    present = set(zip(md.subject_id, md.cid))
    subjects = set(md.subject_id)
    out = []
    for c in CONTRASTS:
        a, b = parse_contrast(c)
        if sum((s, a) in present and (s, b) in present for s in subjects) >= 3:
            out.append(c)
    if not out:
        raise StageError("no contrast has at least 3 paired subjects")
    return out


def _per_contrast(args, contrasts: Sequence[str], fn: Callable[[str], None]) -> None:
    if args.threads > 1 and len(contrasts) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            for fut in [pool.submit(fn, c) for c in contrasts]:
                fut.result()
    else:
        for c in contrasts:
            fn(c)


def _run_qc(args, run):
    marker = None if args.marker_gene.lower() == "none" else args.marker_gene
    stage_qc(run, args.counts, args.meta, marker_gene=marker,
             max_marker_fraction=args.max_marker_fraction,
             k_mads=None if args.no_pca_filter else args.k_mads,
             exclude_batch=args.exclude_batch, exclude_samples=args.exclude_samples)


def _de(args, run, c):
    stage_de(run, c, alpha=args.alpha, fc_threshold=args.fc_threshold, dispersion=args.dispersion,
             max_zero_frac=args.max_zero_frac, prior_df=args.prior_df)


def _fc(args, run, c):
    stage_fc(run, c, prior=args.prior_count)


def _glasso(args, run, c):
    stage_glasso(run, c, seed=args.seed, lam=args.lam, ric_reps=args.ric_reps,
                 ric_statistic=args.ric_statistic, tol=args.glasso_tol, max_iter=args.glasso_max_iter)


def _assoc(args, run, c):
    variables = [v for v in args.variables.split(",") if v] if args.variables else None
    stage_associate(run, c, args.clinical, alpha=args.assoc_alpha, change=args.change,
                    test=args.lmm_test, variables=variables)


def _cluster(args, run, c):
    formats = [f for f in args.formats.split(",") if f]
    bad = [f for f in formats if f not in EXPORT_FORMATS]
    if bad:
        raise StageError(f"unknown export formats {bad}")
    stage_cluster(run, c, seed=args.seed, gamma=args.gamma, truth=args.truth, formats=formats)


def _simulate(args) -> None:
    text = args.scenario.read_text(encoding="utf-8") if args.scenario else ""
    lines = [text] + list(args.set) + [f"seed={args.seed}"]
    spec = ScenarioSpec.from_text("\n".join(lines))
    simulate_counts(spec).write(args.out)


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            _simulate(args)
            return 0
        run = Run(args.out, args.record_timings)
        if args.command == "qc":
            _run_qc(args, run)
            return 0
        if args.command == "pipeline":
            _run_qc(args, run)
        contrasts = _contrasts(args, run)
        steps = {
            "de": [_de], "fc": [_fc], "glasso": [_glasso], "associate": [_assoc],
            "cluster": [_cluster], "pipeline": [_de, _fc, _glasso, _assoc, _cluster],
        }[args.command]

        def one(c: str) -> None:
            for step in steps:
                step(args, run, c)

        _per_contrast(args, contrasts, one)
    except (StageError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        print(f"txnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
