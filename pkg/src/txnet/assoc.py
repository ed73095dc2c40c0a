"""Random-intercept linear mixed models linking gene fold changes to clinical changes.

Model per (gene, clinical variable)::

    clinical change = b0 + b1 * gene log2 FC + b2 * sex + b3 * age + center + error

with ``center ~ N(0, tau2)`` and ``error ~ N(0, sigma2)``.  Variance
components are estimated by REML profiled over ``gamma = tau2 / sigma2``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .diffexpr import FoldChangeMatrix, bh_adjust, parse_contrast
from .ingest import ClinicalTable, SampleMeta

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
LOG_GAMMA_MIN, LOG_GAMMA_MAX = math.log(1e-8), math.log(1e4)


@dataclass
class LmmFit:
    beta: np.ndarray
    cov_beta: np.ndarray
    sigma2: float
    tau2: float
    gamma: float
    objective: float        # negative profiled REML log-likelihood (up to a constant)
    n: int
    df_resid: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_beta))

    def wald(self, k: int = 1) -> tuple[float, float]:
        """t statistic and two-sided p-value for coefficient ``k``."""
        t = self.beta[k] / self.se[k]
        return float(t), float(2.0 * stats.t.sf(abs(t), self.df_resid))

    def conf_int(self, k: int = 1, level: float = 0.95) -> tuple[float, float]:
        q = stats.t.ppf(0.5 + level / 2.0, self.df_resid)
        return float(self.beta[k] - q * self.se[k]), float(self.beta[k] + q * self.se[k])


class RandomInterceptModel:
    """Sufficient statistics of one response/design pair under a grouped random intercept.

    With ``H = I + gamma Z Z'`` the inverse is block-wise
    ``I - gamma / (1 + gamma n_k) J``, so every quadratic form reduces to
    per-group sums.
    """

    def __init__(self, y: np.ndarray, X: np.ndarray, groups: Sequence):
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        n, p = X.shape
        if y.shape != (n,):
            raise ValueError("y and X disagree on the number of observations")
        if n < p + 2:
            raise ValueError(f"need >= {p + 2} complete cases, got {n}")
        if np.linalg.matrix_rank(X) < p:
            raise np.linalg.LinAlgError("fixed-effect design is rank deficient")
        _, g = np.unique(np.asarray(groups), return_inverse=True)
        self.n, self.p = n, p
        self.n_groups = int(g.max()) + 1
        self.nk = np.bincount(g, minlength=self.n_groups).astype(float)
        Sx = np.zeros((self.n_groups, p))
        np.add.at(Sx, g, X)
        Sy = np.bincount(g, weights=y, minlength=self.n_groups)
        self.XtX, self.Xty, self.yty = X.T @ X, X.T @ y, float(y @ y)
        self.Sx, self.Sy = Sx, Sy

    def _parts(self, gamma: float):
        c = gamma / (1.0 + gamma * self.nk)
        XHX = self.XtX - (self.Sx * c[:, None]).T @ self.Sx
        XHy = self.Xty - (self.Sx * c[:, None]).T @ self.Sy
        yHy = self.yty - float(np.sum(c * self.Sy ** 2))
        logdet_h = float(np.sum(np.log1p(gamma * self.nk)))
        L = np.linalg.cholesky(XHX)
        beta = np.linalg.solve(XHX, XHy)
        rss = max(yHy - float(beta @ XHy), 1e-300)
        logdet_x = 2.0 * float(np.log(np.diag(L)).sum())
        return beta, XHX, rss, logdet_h, logdet_x

    def reml_objective(self, gamma: float) -> float:
        """Negative profiled REML log-likelihood, constants dropped."""
        _, _, rss, ldh, ldx = self._parts(gamma)
        dfr = self.n - self.p
        return 0.5 * (dfr * math.log(rss / dfr) + ldh + ldx)

    def ml_objective(self, gamma: float) -> float:
        """Negative profiled ML log-likelihood (same constant convention as REML)."""
        _, _, rss, ldh, _ = self._parts(gamma)
        return 0.5 * (self.n * math.log(rss / self.n) + ldh)

    def fit_at(self, gamma: float, method: str = "reml") -> LmmFit:
        beta, XHX, rss, ldh, ldx = self._parts(gamma)
        denom = self.n - self.p if method == "reml" else self.n
        sigma2 = rss / denom
        cov = sigma2 * np.linalg.inv(XHX)
        obj = self.reml_objective(gamma) if method == "reml" else self.ml_objective(gamma)
        return LmmFit(beta, cov, sigma2, gamma * sigma2, gamma, obj, self.n, self.n - self.p)

    def optimize(self, method: str = "reml", tol: float = 1e-10) -> LmmFit:
        """Minimize the profiled objective over gamma >= 0.

        A log-spaced grid locates the best bracket, golden-section search
        refines it on the log scale, and the boundary gamma = 0 is compared
        explicitly.
        """
        f = self.reml_objective if method == "reml" else self.ml_objective
        if self.n_groups < 2:
            return self.fit_at(0.0, method)
        grid = np.linspace(LOG_GAMMA_MIN, LOG_GAMMA_MAX, 61)
        vals = np.array([f(math.exp(x)) for x in grid])
        k = int(np.argmin(vals))
        lo = grid[max(k - 1, 0)]
        hi = grid[min(k + 1, grid.size - 1)]
        a, b = lo, hi
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
        fc, fd = f(math.exp(c)), f(math.exp(d))
        while b - a > tol:
            if fc < fd:
                b, d, fd = d, c, fc
                c = b - GOLDEN * (b - a)
                fc = f(math.exp(c))
            else:
                a, c, fc = c, d, fd
                d = a + GOLDEN * (b - a)
                fd = f(math.exp(d))
        best_log = 0.5 * (a + b)
        best = min([(f(math.exp(best_log)), math.exp(best_log)), (vals[k], math.exp(grid[k]))])
        if f(0.0) <= best[0]:
            return self.fit_at(0.0, method)
        return self.fit_at(best[1], method)


def fit_lmm(y: np.ndarray, X: np.ndarray, groups: Sequence) -> LmmFit:
    """REML fit of a random-intercept model; ``X`` includes the intercept column.

    With fewer than two groups the random effect is dropped and the fit is OLS.
    """
    return RandomInterceptModel(y, X, groups).optimize("reml")


def lmm_lrt(y: np.ndarray, X: np.ndarray, groups: Sequence, k: int = 1) -> tuple[float, float]:
    """Likelihood-ratio test of coefficient ``k`` using ML fits."""
    full = RandomInterceptModel(y, X, groups).optimize("ml")
    reduced = RandomInterceptModel(y, np.delete(X, k, axis=1), groups).optimize("ml")
    stat = max(2.0 * (reduced.objective - full.objective), 0.0)
    return stat, float(stats.chi2.sf(stat, 1))


def ols(y: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Ordinary least squares: coefficients, covariance, residual variance."""
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    dfr = X.shape[0] - X.shape[1]
    s2 = float(r @ r) / dfr
    return beta, s2 * np.linalg.inv(X.T @ X), s2


# --------------------------------------------------------------------------
# scanning genes against clinical variables

@dataclass
class AssociationResult:
    gene_id: str
    clinical_var: str
    slope: float
    se: float
    p_value: float
    fdr: float
    sign: int
    n_subjects: int
    center_variance: float
    residual_variance: float


@dataclass
class ClinicalScan:
    results: list[AssociationResult]
    edges: list[AssociationResult]
    skipped: list[tuple[str, str, str]]   # (gene, variable, reason)


def clinical_changes(clinical: ClinicalTable, contrast, variable: str,
                     change: str = "diff") -> dict[str, float]:
    """Per-subject change of one clinical variable between the contrast's timepoints."""
    a, b = parse_contrast(contrast)
    vals = clinical.lookup(variable)
    out = {}
    for subj in dict.fromkeys(clinical.subject_id):
        va, vb = vals.get((subj, a), math.nan), vals.get((subj, b), math.nan)
        if math.isnan(va) or math.isnan(vb):
            continue
        if change == "diff":
            out[subj] = vb - va
        elif change == "percent":
            if va == 0:
                continue
            out[subj] = 100.0 * (vb - va) / va
        else:
            raise ValueError("change must be 'diff' or 'percent'")
    return out


def subject_covariates(meta: SampleMeta) -> dict[str, tuple[str, float, str]]:
    """subject -> (sex, age, center), taken from the subject's earliest timepoint."""
    out: dict[str, tuple[int, tuple[str, float, str]]] = {}
    for subj, cid, sex, age, center in zip(meta.subject_id, meta.cid, meta.sex, meta.age, meta.center):
        if subj not in out or cid < out[subj][0]:
            out[subj] = (cid, (sex, age, center))
    return {s: v[1] for s, v in out.items()}


def clinical_scan(fc: FoldChangeMatrix, clinical: ClinicalTable, meta: SampleMeta,
                  alpha: float = 0.05, *, variables: Sequence[str] | None = None,
                  change: str = "diff", test: str = "wald") -> ClinicalScan:
    """Fit one mixed model per (gene, clinical variable) and keep FDR-significant edges.

    BH adjustment runs separately for each clinical variable across genes.
    Genes whose fold change is constant over the usable subjects are skipped.
    """
    if test not in ("wald", "lrt"):
        raise ValueError("test must be 'wald' or 'lrt'")
    contrast = fc.contrast
    covs = subject_covariates(meta)
    variables = list(variables) if variables is not None else list(clinical.variables)
    row_of = {s: i for i, s in enumerate(fc.subject_ids)}
    results: list[AssociationResult] = []
    skipped: list[tuple[str, str, str]] = []
    for var in variables:
        if var not in clinical.values:
            raise KeyError(f"clinical variable {var!r} not in table")
        delta = clinical_changes(clinical, contrast, var, change)
        subjects = [s for s in fc.subject_ids if s in delta and s in covs]
        if not subjects:
            raise ValueError(f"clinical variable {var!r} entirely missing for contrast {contrast}")
        y = np.array([delta[s] for s in subjects])
        rows = [row_of[s] for s in subjects]
        sex = np.array([1.0 if covs[s][0] == "M" else 0.0 for s in subjects])
        age = np.array([covs[s][1] for s in subjects])
        centers = [covs[s][2] for s in subjects]
        extra = [c for c in (sex, age) if np.ptp(c) > 0]
        var_results = []
        for j, gene in enumerate(fc.gene_ids):
            x = fc.values[rows, j]
            if np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max()):
                skipped.append((gene, var, "constant fold change"))
                continue
            X = np.column_stack([np.ones_like(x), x] + extra)
            try:
                model = RandomInterceptModel(y, X, centers)
            except (ValueError, np.linalg.LinAlgError) as exc:
                skipped.append((gene, var, str(exc)))
                continue
            fit = model.optimize("reml")
            if test == "wald":
                _, p = fit.wald(1)
            else:
                _, p = lmm_lrt(y, X, centers, 1)
            slope = float(fit.beta[1])
            var_results.append(AssociationResult(
                gene, var, slope, float(fit.se[1]), p, math.nan,
                int(np.sign(slope)), len(subjects), float(fit.tau2), float(fit.sigma2)))
        if var_results:
            q = bh_adjust([r.p_value for r in var_results])
            for r, qq in zip(var_results, q):
                r.fdr = float(qq)
        results.extend(var_results)
    edges = [r for r in results if r.fdr < alpha]
    return ClinicalScan(results, edges, skipped)


ASSOC_COLUMNS = ("gene_id", "clinical_var", "slope", "se", "p_value", "fdr", "sign",
                 "n_subjects", "center_variance", "residual_variance")


def write_associations(results: Sequence[AssociationResult], path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("\t".join(ASSOC_COLUMNS) + "\n")
    for r in results:
        buf.write(f"{r.gene_id}\t{r.clinical_var}\t{r.slope!r}\t{r.se!r}\t{r.p_value!r}\t"
                  f"{r.fdr!r}\t{r.sign}\t{r.n_subjects}\t{r.center_variance!r}\t"
                  f"{r.residual_variance!r}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_clinical_edges(edges: Sequence[AssociationResult], path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("gene_id\tclinical_var\tslope\tp_value\tfdr\tsign\n")
    for r in edges:
        buf.write(f"{r.gene_id}\t{r.clinical_var}\t{r.slope!r}\t{r.p_value!r}\t{r.fdr!r}\t{r.sign}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_clinical_edges(path: str | Path) -> list[tuple[str, str, float, int]]:
    """(gene, variable, slope, sign) rows of an edges_clinical table."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        g, v, slope, _p, _q, sign = line.split("\t")
        out.append((g, v, float(slope), int(sign)))
    return out
