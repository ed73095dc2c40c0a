"""Paired differential expression: TMM, negative-binomial GLM, LRT, BH.

The negative-binomial variance is ``mu + phi * mu**2``.  Per contrast, each
subject observed at both timepoints contributes one pair of libraries and
the model is ``log mu = subject effect + condition effect + offset``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, special, stats

from .ingest import CountMatrix, SampleMeta, zero_fraction_filter

LN2 = math.log(2.0)
PHI_MIN, PHI_MAX = 1e-6, 10.0
CONTRASTS = ("1-2", "1-3", "2-3")


class InestimableFit(ArithmeticError):
    pass


class NotNested(ValueError):
    pass


# --------------------------------------------------------------------------
# multiple testing

def bh_adjust(p: Sequence[float] | np.ndarray) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values, in input order."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError("p must be one-dimensional")
    if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    # m / k is exactly 1 at k = m, which keeps every adjusted value >= its p-value
    ranked = p[order] * (m / np.arange(1, m + 1))
    q_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


# --------------------------------------------------------------------------
# TMM

@dataclass(frozen=True)
class TmmFactors:
    factors: np.ndarray
    reference_sample: str


def _upper_quartile_ref(counts: np.ndarray, lib: np.ndarray) -> int:
    f75 = np.quantile(counts / lib, 0.75, axis=0)
    return int(np.argmin(np.abs(f75 - f75.mean())))


def _tmm_one(obs: np.ndarray, ref: np.ndarray, n_obs: float, n_ref: float,
             trim_m: float, trim_a: float, weighted: bool) -> float:
    keep = (obs > 0) & (ref > 0)
    if not np.any(keep):
        raise ValueError("sample shares no positive gene with the reference")
    o, r = obs[keep].astype(float), ref[keep].astype(float)
    log_r = np.log2((o / n_obs) / (r / n_ref))
    abs_e = 0.5 * (np.log2(o / n_obs) + np.log2(r / n_ref))
    if np.max(np.abs(log_r)) < 1e-6:
        return 1.0
    n = log_r.size
    lo_m = math.floor(n * trim_m) + 1
    hi_m = n + 1 - lo_m
    lo_a = math.floor(n * trim_a) + 1
    hi_a = n + 1 - lo_a
    rank_m = stats.rankdata(log_r)
    rank_a = stats.rankdata(abs_e)
    sel = (rank_m >= lo_m) & (rank_m <= hi_m) & (rank_a >= lo_a) & (rank_a <= hi_a)
    if not np.any(sel):
        return 1.0
    if weighted:
        v = (n_obs - o) / (n_obs * o) + (n_ref - r) / (n_ref * r)
        f = np.sum(log_r[sel] / v[sel]) / np.sum(1.0 / v[sel])
    else:
        f = np.mean(log_r[sel])
    return float(2.0 ** f)


def tmm_factors(m: CountMatrix, trim_m: float = 0.30, trim_a: float = 0.05,
                weighted: bool = True) -> TmmFactors:
    """Trimmed mean of M-values normalization factors.

    The reference is the sample whose upper-quartile (count / library size)
    is closest to the mean upper quartile.  Each sample's log-ratios against
    the reference are trimmed by ``trim_m`` on M and ``trim_a`` on A, then
    averaged with inverse asymptotic-variance weights (``weighted=False``
    gives the plain trimmed mean).  Factors are rescaled to geometric mean 1.
    """
    counts = m.counts
    if counts.shape[1] < 2:
        raise ValueError("TMM needs at least 2 samples")
    lib = m.lib_sizes.astype(float)
    if np.any(lib <= 0):
        raise ValueError("TMM needs positive library sizes")
    ref = _upper_quartile_ref(counts, lib)
    f = np.array([
        _tmm_one(counts[:, j], counts[:, ref], lib[j], lib[ref], trim_m, trim_a, weighted)
        for j in range(counts.shape[1])
    ])
    f = f / np.exp(np.mean(np.log(f)))
    return TmmFactors(f, m.sample_ids[ref])


# --------------------------------------------------------------------------
# negative binomial primitives

def nb_unit_deviance(y: np.ndarray, mu: np.ndarray, phi) -> np.ndarray:
    """Elementwise NB deviance; ``phi == 0`` gives the Poisson deviance."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.broadcast_to(np.asarray(phi, dtype=float), np.broadcast(y, mu).shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ylog = np.where(y > 0, y * np.log(y / mu), 0.0)
        pois = 2.0 * (ylog - (y - mu))
        safe_phi = np.where(phi > 0, phi, 1.0)
        nb_tail = (y + 1.0 / safe_phi) * (np.log1p(safe_phi * y) - np.log1p(safe_phi * mu))
        nb = 2.0 * (ylog - nb_tail)
    d = np.where(phi > 0, nb, pois)
    return np.maximum(d, 0.0)


def nb_loglik(y: np.ndarray, mu: np.ndarray, phi) -> np.ndarray:
    """Elementwise NB log-likelihood (Poisson for ``phi == 0``)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.broadcast_to(np.asarray(phi, dtype=float), np.broadcast(y, mu).shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        pois = special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)
        safe = np.where(phi > 0, phi, 1.0)
        r = 1.0 / safe
        nb = (-special.betaln(y + 1.0, r) - np.log(y + r)
              - r * np.log1p(safe * mu)
              + special.xlogy(y, safe * mu) - y * np.log1p(safe * mu))
    return np.where(phi > 0, nb, pois)


@dataclass
class NbFit:
    coef: np.ndarray
    deviance: float
    mu: np.ndarray
    design: np.ndarray
    dispersion: float
    converged: bool
    n_iter: int

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.design))


def fit_nb_glm(y, design, offsets, dispersion: float, *, max_iter: int = 50,
               tol: float = 1e-10) -> NbFit:
    """Log-link NB GLM by IRLS with step-halving.

    Stops when the relative deviance change drops below ``tol`` or after
    ``max_iter`` iterations.  Raises :class:`InestimableFit` when the working
    weights become non-finite or the gene has no counts.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(design, dtype=float)
    off = np.broadcast_to(np.asarray(offsets, dtype=float), y.shape)
    phi = float(dispersion)
    if y.sum() == 0:
        raise InestimableFit("all-zero counts")
    z0 = np.log(y + 0.5) - off
    beta = np.linalg.lstsq(X, z0, rcond=None)[0]
    eta = X @ beta + off
    mu = np.exp(eta)
    dev = float(nb_unit_deviance(y, mu, phi).sum())
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = mu / (1.0 + phi * mu)
        if not np.all(np.isfinite(w)):
            raise InestimableFit("non-finite working weights")
        z = (eta - off) + (y - mu) / mu
        sw = np.sqrt(w)
        target = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        step = target - beta
        for _ in range(30):
            new_beta = beta + step
            new_eta = X @ new_beta + off
            new_mu = np.exp(new_eta)
            new_dev = float(nb_unit_deviance(y, new_mu, phi).sum())
            if np.isfinite(new_dev) and new_dev <= dev * (1 + 1e-12) + 1e-12:
                break
            step = step / 2
        else:
            break
        change = abs(dev - new_dev) / (abs(new_dev) + 0.1)
        beta, eta, mu, dev = new_beta, new_eta, new_mu, new_dev
        if change < tol:
            converged = True
            break
    if not np.all(np.isfinite(beta)):
        raise InestimableFit("non-finite coefficients")
    return NbFit(beta, dev, mu, X, phi, converged, it)


def _clamp_stat(stat, dev_scale=1.0):
    stat = np.asarray(stat, dtype=float)
    tiny = 1e-8 * np.maximum(1.0, np.abs(dev_scale))
    return np.where((stat < 0) & (stat >= -tiny), 0.0, stat)


def lrt(full: NbFit, reduced: NbFit) -> tuple[float, float]:
    """Likelihood-ratio statistic and chi-square upper-tail p-value."""
    if full.design.shape[0] != reduced.design.shape[0]:
        raise NotNested("designs have different numbers of observations")
    if full.dispersion != reduced.dispersion:
        raise ValueError("fits must share the dispersion")
    Xf, Xr = full.design, reduced.design
    resid = Xr - Xf @ np.linalg.lstsq(Xf, Xr, rcond=None)[0]
    if np.max(np.abs(resid)) > 1e-8 * max(1.0, np.max(np.abs(Xr))):
        raise NotNested("reduced design is not nested in the full design")
    df = full.rank - reduced.rank
    stat = float(_clamp_stat(reduced.deviance - full.deviance, full.deviance))
    if stat < 0:
        raise ArithmeticError(f"reduced model fits better by {-stat:g}; full fit did not converge")
    if df == 0:
        return stat, 1.0
    return stat, float(stats.chi2.sf(stat, df))


# --------------------------------------------------------------------------
# vectorised paired fits

@dataclass
class PairedFit:
    alpha: np.ndarray      # genes x subjects, log-scale subject effects
    beta: np.ndarray       # genes, condition effect (natural log)
    deviance: np.ndarray   # genes
    converged: np.ndarray  # genes, bool
    mu_a: np.ndarray
    mu_b: np.ndarray


def fit_paired(ya: np.ndarray, yb: np.ndarray, off_a: np.ndarray, off_b: np.ndarray,
               phi, *, condition: bool = True, mask: np.ndarray | None = None,
               start: PairedFit | None = None, max_iter: int = 50,
               tol: float = 1e-10) -> PairedFit:
    """Fisher scoring for many genes at once on a paired design.

    ``ya``/``yb`` are genes x subjects counts at the two timepoints.  Subjects
    where ``mask`` is False (default: zero at both timepoints) are dropped per
    gene; their subject effect tends to minus infinity and they contribute
    nothing to the likelihood.  The subject + condition information matrix
    is an arrow matrix, so each step is a Schur-complement solve.
    """
    ya = np.asarray(ya, dtype=float)
    yb = np.asarray(yb, dtype=float)
    G, S = ya.shape
    if mask is None:
        mask = (ya + yb) > 0
    mf = mask.astype(float)
    phi = np.broadcast_to(np.asarray(phi, dtype=float), (G,)).copy()[:, None]
    ea, eb = np.exp(off_a)[None, :], np.exp(off_b)[None, :]

    if start is not None:
        alpha = start.alpha.copy()
        beta = start.beta.copy() if condition else np.zeros(G)
    else:
        if condition:
            sa = (ya * mf).sum(1) + 0.5
            sb = (yb * mf).sum(1) + 0.5
            beta = np.log(sb / sa) - np.log((eb * mf).sum(1) / np.maximum((ea * mf).sum(1), 1e-300))
        else:
            beta = np.zeros(G)
        alpha = np.log((ya + yb + 0.5) / (ea + eb * np.exp(beta)[:, None]))
    alpha = np.where(mask, alpha, 0.0)

    def evaluate(alpha, beta):
        mu_a = np.exp(alpha + off_a[None, :]) * mf
        mu_b = np.exp(alpha + beta[:, None] + off_b[None, :]) * mf
        dev = ((nb_unit_deviance(ya, mu_a, phi) + nb_unit_deviance(yb, mu_b, phi)) * mf).sum(1)
        return mu_a, mu_b, dev

    mu_a, mu_b, dev = evaluate(alpha, beta)
    converged = np.zeros(G, dtype=bool)
    active = np.ones(G, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        A = np.flatnonzero(active)
        ma, mb, ph, mk = mu_a[A], mu_b[A], phi[A], mf[A]
        wa = ma / (1 + ph * ma)
        wb = mb / (1 + ph * mb)
        ra = (ya[A] - ma) / (1 + ph * ma) * mk
        rb = (yb[A] - mb) / (1 + ph * mb) * mk
        u_alpha = ra + rb
        i_aa = np.where(mask[A], wa + wb, 1.0)
        if condition:
            u_beta = rb.sum(1)
            schur = (wb * mk).sum(1) - (wb * wb / i_aa * mk).sum(1)
            schur = np.maximum(schur, 1e-300)
            d_beta = (u_beta - (wb * u_alpha / i_aa * mk).sum(1)) / schur
        else:
            d_beta = np.zeros(A.size)
        d_alpha = (u_alpha - wb * d_beta[:, None]) / i_aa * mk

        a0, b0, dev0 = alpha[A], beta[A], dev[A]
        scale = np.ones(A.size)
        new_a, new_b = a0 + d_alpha, b0 + d_beta
        nma, nmb, ndev = evaluate_rows(A, new_a, new_b, ya, yb, off_a, off_b, phi, mf)
        for _h in range(30):
            bad = ~(np.isfinite(ndev) & (ndev <= dev0 * (1 + 1e-12) + 1e-12))
            if not bad.any():
                break
            scale[bad] /= 2
            new_a[bad] = a0[bad] + scale[bad, None] * d_alpha[bad]
            new_b[bad] = b0[bad] + scale[bad] * d_beta[bad]
            Bi = A[bad]
            r_a, r_b, r_d = evaluate_rows(Bi, new_a[bad], new_b[bad], ya, yb, off_a, off_b, phi, mf)
            nma[bad], nmb[bad], ndev[bad] = r_a, r_b, r_d
        stuck = ~(np.isfinite(ndev) & (ndev <= dev0 * (1 + 1e-12) + 1e-12))
        # keep the previous iterate where halving failed
        new_a[stuck], new_b[stuck], ndev[stuck] = a0[stuck], b0[stuck], dev0[stuck]
        nma[stuck], nmb[stuck] = ma[stuck], mb[stuck]
        change = np.abs(dev0 - ndev) / (np.abs(ndev) + 0.1)
        alpha[A], beta[A], dev[A] = new_a, new_b, ndev
        mu_a[A], mu_b[A] = nma, nmb
        done = (change < tol) | stuck
        converged[A[change < tol]] = True
        active[A[done]] = False
    return PairedFit(alpha, beta, dev, converged, mu_a, mu_b)


def evaluate_rows(rows, alpha, beta, ya, yb, off_a, off_b, phi, mf):
    mk = mf[rows]
    with np.errstate(over="ignore", invalid="ignore"):
        # diverging fits (gene absent at one timepoint) overflow; step-halving rejects them
        mu_a = np.exp(alpha + off_a[None, :]) * mk
        mu_b = np.exp(alpha + beta[:, None] + off_b[None, :]) * mk
    ph = phi[rows]
    dev = ((nb_unit_deviance(ya[rows], mu_a, ph) + nb_unit_deviance(yb[rows], mu_b, ph)) * mk).sum(1)
    return mu_a, mu_b, dev


def paired_apl(ya, yb, off_a, off_b, phi, mask=None, start=None) -> tuple[np.ndarray, PairedFit]:
    """Cox-Reid adjusted profile log-likelihood per gene at dispersion ``phi``."""
    if mask is None:
        mask = (ya + yb) > 0
    fit = fit_paired(ya, yb, off_a, off_b, phi, mask=mask, start=start)
    G = ya.shape[0]
    ph = np.broadcast_to(np.asarray(phi, dtype=float), (G,))[:, None]
    mf = mask.astype(float)
    ll = ((nb_loglik(ya, np.where(mask, fit.mu_a, 1.0), ph)
           + nb_loglik(yb, np.where(mask, fit.mu_b, 1.0), ph)) * mf).sum(1)
    wa = fit.mu_a / (1 + ph * fit.mu_a)
    wb = fit.mu_b / (1 + ph * fit.mu_b)
    i_aa = np.where(mask, wa + wb, 1.0)
    schur = (wb * mf).sum(1) - (wb * wb / i_aa * mf).sum(1)
    logdet = (np.log(i_aa) * mf).sum(1) + np.log(np.maximum(schur, 1e-300))
    return ll - 0.5 * logdet, fit


@dataclass(frozen=True)
class Dispersion:
    common: float
    tagwise: np.ndarray
    prior_df: float


def _log_phi_grid(n: int = 31) -> np.ndarray:
    return np.linspace(math.log(PHI_MIN), math.log(PHI_MAX), n)


def _tagwise_from_grid(grid: np.ndarray, apl: np.ndarray, prior_n: float) -> np.ndarray:
    obj = apl + prior_n * apl.mean(axis=0, keepdims=True)
    k = np.argmax(obj, axis=1)
    out = grid[k].astype(float)
    inner = (k > 0) & (k < grid.size - 1)
    if inner.any():
        rows = np.flatnonzero(inner)
        kk = k[rows]
        y0, y1, y2 = obj[rows, kk - 1], obj[rows, kk], obj[rows, kk + 1]
        h = grid[1] - grid[0]
        denom = y0 - 2 * y1 + y2
        shift = np.where(denom < 0, 0.5 * h * (y0 - y2) / np.where(denom < 0, denom, -1.0), 0.0)
        out[rows] = grid[kk] + np.clip(shift, -h, h)
    return np.exp(np.clip(out, grid[0], grid[-1]))


def estimate_dispersion_paired(ya, yb, off_a, off_b, *, prior_df: float = 10.0,
                               grid_size: int = 31) -> Dispersion:
    """Common and tagwise dispersions for a paired design."""
    mask = (ya + yb) > 0
    n_obs = 2 * mask.sum(1)
    resid_df = n_obs - (mask.sum(1) + 1)
    if np.all(resid_df < 1):
        raise ValueError("no residual degrees of freedom")

    cache: dict[str, PairedFit | None] = {"fit": None}

    def neg_total(log_phi):
        apl, fit = paired_apl(ya, yb, off_a, off_b, math.exp(log_phi), mask, cache["fit"])
        cache["fit"] = fit
        return -float(apl.sum())

    res = optimize.minimize_scalar(neg_total, bounds=(math.log(PHI_MIN), math.log(PHI_MAX)),
                                   method="bounded", options={"xatol": 1e-6})
    common = float(math.exp(res.x))
    grid = _log_phi_grid(grid_size)
    apl = np.empty((ya.shape[0], grid.size))
    start = None
    for k, lp in enumerate(grid):
        apl[:, k], start = paired_apl(ya, yb, off_a, off_b, math.exp(lp), mask, start)
    df = max(float(np.median(resid_df)), 1.0)
    tagwise = _tagwise_from_grid(grid, apl, prior_df / df)
    return Dispersion(common, tagwise, prior_df)


def _general_apl(y: np.ndarray, X: np.ndarray, off: np.ndarray, phi: float) -> float:
    try:
        fit = fit_nb_glm(y, X, off, phi)
    except InestimableFit:
        return 0.0
    w = fit.mu / (1 + phi * fit.mu)
    sign, logdet = np.linalg.slogdet(X.T @ (X * w[:, None]))
    ll = float(nb_loglik(y, fit.mu, phi).sum())
    return ll - 0.5 * logdet


def estimate_dispersion(m: CountMatrix | np.ndarray, design: np.ndarray,
                        offsets: np.ndarray | None = None, *, prior_df: float = 10.0,
                        grid_size: int = 31) -> Dispersion:
    """Common and tagwise NB dispersions for an arbitrary full-rank design.

    The common value maximizes the Cox-Reid adjusted profile likelihood
    summed over genes (bounded search on log phi in [1e-6, 10]).  Tagwise
    values maximize each gene's adjusted likelihood plus ``prior_df /
    residual_df`` times the average one, evaluated on a log grid and refined
    by a local quadratic.  Per-gene dense IRLS; use
    :func:`estimate_dispersion_paired` for large paired data.
    """
    counts = m.counts if isinstance(m, CountMatrix) else np.atleast_2d(np.asarray(m))
    X = np.asarray(design, dtype=float)
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise ValueError("design is not full rank")
    if n - p < 1:
        raise ValueError("no residual degrees of freedom")
    if offsets is None:
        offsets = np.log(counts.sum(0).astype(float))
    off = np.asarray(offsets, dtype=float)
    Y = counts.astype(float)

    def neg_total(log_phi):
        phi = math.exp(log_phi)
        return -sum(_general_apl(y, X, off, phi) for y in Y)

    res = optimize.minimize_scalar(neg_total, bounds=(math.log(PHI_MIN), math.log(PHI_MAX)),
                                   method="bounded", options={"xatol": 1e-6})
    grid = _log_phi_grid(grid_size)
    apl = np.array([[_general_apl(y, X, off, math.exp(lp)) for lp in grid] for y in Y])
    tagwise = _tagwise_from_grid(grid, apl, prior_df / (n - p))
    return Dispersion(float(math.exp(res.x)), tagwise, prior_df)


# --------------------------------------------------------------------------
# contrasts

def parse_contrast(label: str | tuple[int, int]) -> tuple[int, int]:
    if isinstance(label, tuple):
        a, b = label
    else:
        try:
            a, b = (int(x) for x in str(label).split("-"))
        except ValueError:
            raise ValueError(f"contrast must look like '1-2', got {label!r}") from None
    if a not in (1, 2, 3) or b not in (1, 2, 3) or a >= b:
        raise ValueError(f"invalid contrast {label!r}")
    return a, b


def contrast_label(contrast) -> str:
    a, b = parse_contrast(contrast)
    return f"{a}-{b}"


def pair_samples(m: CountMatrix, meta: SampleMeta, contrast) -> tuple[list[str], list[int], list[int]]:
    """Subjects seen at both timepoints, with matrix column indices for each.

    Subjects are ordered by the column position of their first-timepoint sample.
    """
    a, b = parse_contrast(contrast)
    meta = meta.aligned_to(m)
    where: dict[tuple[str, int], int] = {}
    for j, (subj, c) in enumerate(zip(meta.subject_id, meta.cid)):
        where[(subj, c)] = j
    subjects, ia, ib = [], [], []
    for j, (subj, c) in enumerate(zip(meta.subject_id, meta.cid)):
        if c == a and (subj, b) in where:
            subjects.append(subj)
            ia.append(j)
            ib.append(where[(subj, b)])
    return subjects, ia, ib


@dataclass
class DEResult:
    gene_id: str
    log2_fc: float
    mean_log_cpm: float
    lr_stat: float
    p_value: float
    fdr: float
    status: str
    passes_fc_filter: bool


@dataclass
class DEContrast:
    contrast: str
    results: list[DEResult]
    subjects: list[str]
    tmm: TmmFactors
    dispersion: Dispersion
    sample_ids: tuple[str, ...]

    def passing_genes(self) -> list[str]:
        return [r.gene_id for r in self.results if r.passes_fc_filter]


def de_contrast(m: CountMatrix, meta: SampleMeta, contrast, alpha: float = 0.05,
                fc_threshold: float = 1.3, *, dispersion: str = "tagwise",
                max_zero_frac: float = 0.25, prior_df: float = 10.0,
                trim_m: float = 0.30, trim_a: float = 0.05) -> DEContrast:
    """Differential expression between two timepoints with a per-subject fixed effect."""
    if dispersion not in ("common", "tagwise"):
        raise ValueError("dispersion must be 'common' or 'tagwise'")
    label = contrast_label(contrast)
    subjects, ia, ib = pair_samples(m, meta, contrast)
    if len(subjects) < 3:
        raise ValueError(f"contrast {label}: only {len(subjects)} paired subjects (need >= 3)")
    cols = ia + ib
    sub = CountMatrix(m.gene_ids, tuple(m.sample_ids[j] for j in cols), m.counts[:, cols])
    keep = zero_fraction_filter(sub, max_zero_frac)
    kept = sub.subset(genes=keep)
    tmm = tmm_factors(kept, trim_m, trim_a)
    S = len(subjects)
    eff = kept.lib_sizes.astype(float) * tmm.factors
    off = np.log(eff)
    off_a, off_b = off[:S], off[S:]
    Y = kept.counts.astype(float)
    ya, yb = Y[:, :S], Y[:, S:]

    disp = estimate_dispersion_paired(ya, yb, off_a, off_b, prior_df=prior_df)
    phi = np.full(Y.shape[0], disp.common) if dispersion == "common" else disp.tagwise

    mask = (ya + yb) > 0
    full = fit_paired(ya, yb, off_a, off_b, phi, mask=mask)
    reduced = fit_paired(ya, yb, off_a, off_b, phi, mask=mask, condition=False)
    stat = _clamp_stat(reduced.deviance - full.deviance, full.deviance)
    inestimable = ((ya * mask).sum(1) == 0) | ((yb * mask).sum(1) == 0) | ~full.converged \
        | ~reduced.converged | (stat < 0) | ~np.isfinite(full.beta)
    stat = np.maximum(stat, 0.0)
    pval = stats.chi2.sf(stat, 1)
    tested = ~inestimable
    fdr = np.full(Y.shape[0], np.nan)
    fdr[tested] = bh_adjust(pval[tested])
    log2_fc = full.beta / LN2
    log_cpm = np.log2(1e6 * (Y + 0.5) / eff[None, :]).mean(1)
    lfc_cut = math.log2(fc_threshold)

    results: list[DEResult] = []
    kept_idx = {g: i for i, g in enumerate(kept.gene_ids)}
    for g in m.gene_ids:
        i = kept_idx.get(g)
        if i is None:
            results.append(DEResult(g, math.nan, math.nan, math.nan, math.nan, math.nan,
                                    "removed_zero_frac", False))
        elif inestimable[i]:
            results.append(DEResult(g, math.nan, float(log_cpm[i]), math.nan, math.nan, math.nan,
                                    "removed_inestimable", False))
        else:
            lfc = float(log2_fc[i])
            q = float(fdr[i])
            results.append(DEResult(g, lfc, float(log_cpm[i]), float(stat[i]), float(pval[i]), q,
                                    "tested", bool(abs(lfc) > lfc_cut and q < alpha)))
    return DEContrast(label, results, subjects, tmm, disp, sub.sample_ids)


DE_COLUMNS = ("gene_id", "log2_fc", "mean_log_cpm", "lr_stat", "p_value", "fdr", "status",
              "passes_fc_filter")


def _num(x: float) -> str:
    return "NA" if x is None or math.isnan(x) else repr(float(x))


def write_de(results: Sequence[DEResult], path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("\t".join(DE_COLUMNS) + "\n")
    for r in results:
        buf.write("\t".join([r.gene_id, _num(r.log2_fc), _num(r.mean_log_cpm), _num(r.lr_stat),
                             _num(r.p_value), _num(r.fdr), r.status,
                             "true" if r.passes_fc_filter else "false"]) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_de(path: str | Path) -> list[DEResult]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != DE_COLUMNS:
        raise ValueError(f"{path}: not a DE table")
    out = []
    for line in lines[1:]:
        f = line.split("\t")
        nums = [math.nan if x == "NA" else float(x) for x in f[1:6]]
        out.append(DEResult(f[0], *nums, f[6], f[7] == "true"))
    return out


# --------------------------------------------------------------------------
# per-subject fold changes

@dataclass(frozen=True)
class FoldChangeMatrix:
    subject_ids: tuple[str, ...]
    gene_ids: tuple[str, ...]
    values: np.ndarray
    contrast: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.subject_ids), len(self.gene_ids)):
            raise ValueError("fold-change matrix shape mismatch")
        if not np.all(np.isfinite(v)):
            raise ValueError("fold changes must be finite")
        object.__setattr__(self, "values", v)

    def select(self, genes: Sequence[str]) -> "FoldChangeMatrix":
        idx = {g: i for i, g in enumerate(self.gene_ids)}
        cols = [idx[g] for g in genes]
        return FoldChangeMatrix(self.subject_ids, tuple(genes), self.values[:, cols], self.contrast)


def paired_logfc(m: CountMatrix, meta: SampleMeta, genes: Sequence[str], contrast,
                 factors: np.ndarray | None = None, prior: float = 0.5) -> FoldChangeMatrix:
    """Per-subject log2 CPM(second timepoint) - log2 CPM(first timepoint).

    ``factors`` are normalization factors aligned to ``m.sample_ids``
    (default 1).  CPM uses the library sizes of the full matrix.
    """
    genes = list(genes)
    if not genes:
        raise ValueError("empty gene subset")
    from .ingest import cpm as _cpm
    values = _cpm(m, factors, prior)
    subjects, ia, ib = pair_samples(m, meta, contrast)
    gidx = {g: i for i, g in enumerate(m.gene_ids)}
    rows = [gidx[g] for g in genes]
    lc = np.log2(values[rows])
    fc = (lc[:, ib] - lc[:, ia]).T
    return FoldChangeMatrix(tuple(subjects), tuple(genes), fc, contrast_label(contrast))


def write_fc(fc: FoldChangeMatrix, path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("\t".join(("subject_id",) + fc.gene_ids) + "\n")
    for s, row in zip(fc.subject_ids, fc.values):
        buf.write(s + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_fc(path: str | Path, contrast: str) -> FoldChangeMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    subjects, rows = [], []
    for line in lines[1:]:
        f = line.split("\t")
        subjects.append(f[0])
        rows.append([float(x) for x in f[1:]])
    values = np.array(rows, dtype=float).reshape(len(subjects), len(header) - 1)
    return FoldChangeMatrix(tuple(subjects), tuple(header[1:]), values, contrast)
