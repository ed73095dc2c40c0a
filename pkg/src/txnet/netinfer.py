"""Sparse gene-gene networks from fold-change matrices via the graphical lasso."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffexpr import FoldChangeMatrix

log = logging.getLogger(__name__)


class GlassoNotConverged(RuntimeError):
    def __init__(self, estimate: "PrecisionEstimate"):
        self.estimate = estimate
        super().__init__(
            f"graphical lasso did not converge in {estimate.n_iter} sweeps "
            f"(duality gap {estimate.duality_gap:.3g})"
        )


@dataclass(frozen=True)
class SampleCorrelation:
    gene_ids: tuple[str, ...]
    S: np.ndarray
    n_samples: int
    dropped: tuple[str, ...] = ()


def correlation(X: np.ndarray) -> np.ndarray:
    """Column correlation matrix with exact unit diagonal and entries clipped to [-1, 1]."""
    X = np.asarray(X, dtype=float)
    Z = X - X.mean(axis=0)
    norms = np.sqrt((Z * Z).sum(axis=0))
    Z = Z / norms
    S = Z.T @ Z
    S = 0.5 * (S + S.T)
    np.clip(S, -1.0, 1.0, out=S)
    np.fill_diagonal(S, 1.0)
    return S


def standardize(fc: FoldChangeMatrix) -> SampleCorrelation:
    """Sample correlation of the fold-change columns.

    Constant columns are dropped (and logged) because they have no
    correlation.
    """
    X = fc.values
    if X.shape[0] < 3:
        raise ValueError(f"need >= 3 subjects, got {X.shape[0]}")
    sd = X.std(axis=0)
    scale = np.maximum(np.abs(X).max(axis=0), 1.0)
    keep = sd > 1e-12 * scale
    dropped = tuple(g for g, k in zip(fc.gene_ids, keep) if not k)
    if dropped:
        log.warning("dropping %d constant fold-change columns: %s", len(dropped), list(dropped[:5]))
    genes = tuple(g for g, k in zip(fc.gene_ids, keep) if k)
    return SampleCorrelation(genes, correlation(X[:, keep]), X.shape[0], dropped)


@dataclass
class PrecisionEstimate:
    theta: np.ndarray
    lam: float
    duality_gap: float
    n_iter: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list)
    gene_ids: tuple[str, ...] | None = None

    @property
    def partial_corr(self) -> np.ndarray:
        d = np.sqrt(np.diag(self.theta))
        rho = -self.theta / np.outer(d, d)
        np.fill_diagonal(rho, 1.0)
        return rho

    @property
    def support(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.theta != 0, k=1))
        return list(zip(i.tolist(), j.tolist()))


def logdet_pd(A: np.ndarray) -> float:
    """log det of a positive definite matrix; -inf when the Cholesky factorization fails."""
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return -math.inf
    return float(2.0 * np.log(np.diag(L)).sum())


def glasso_objective(S: np.ndarray, theta: np.ndarray, lam: float) -> float:
    """log det(theta) - tr(S theta) - lam * sum of off-diagonal |theta|."""
    logdet = logdet_pd(theta)
    if logdet == -math.inf:
        return -math.inf
    off = np.abs(theta).sum() - np.abs(np.diag(theta)).sum()
    return float(logdet - np.sum(S * theta) - lam * off)


def duality_gap(S: np.ndarray, theta: np.ndarray, W: np.ndarray, lam: float) -> float:
    """Primal minus dual value, using ``W`` projected onto the dual feasible box."""
    p = S.shape[0]
    Wf = S + np.clip(W - S, -lam, lam)
    np.fill_diagonal(Wf, np.diag(S))
    logdet_w = logdet_pd(Wf)
    logdet_t = logdet_pd(theta)
    if logdet_w == -math.inf or logdet_t == -math.inf:
        return math.inf
    off = np.abs(theta).sum() - np.abs(np.diag(theta)).sum()
    gap = -logdet_t + np.sum(S * theta) + lam * off - logdet_w - p
    return float(max(gap, 0.0))


def _lasso_block(Q: np.ndarray, c: np.ndarray, lam: float, gamma: np.ndarray,
                 tol: float, max_sweeps: int = 1000) -> np.ndarray:
    """Coordinate descent for min_g  g'Qg + 2 c'g + 2 lam |g|_1  (Q positive definite)."""
    r = Q @ gamma
    diag = np.diag(Q).copy()
    n = c.size
    active = np.arange(n)
    full_pass = True
    for _ in range(max_sweeps):
        max_delta = 0.0
        for k in active if not full_pass else range(n):
            old = gamma[k]
            z = r[k] - diag[k] * old + c[k]
            if z > lam:
                new = -(z - lam) / diag[k]
            elif z < -lam:
                new = -(z + lam) / diag[k]
            else:
                new = 0.0
            if new != old:
                delta = new - old
                r += Q[:, k] * delta
                gamma[k] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            if full_pass:
                break
            full_pass = True
        else:
            full_pass = False
            active = np.flatnonzero(gamma)
            if active.size == 0:
                full_pass = True
    return gamma


def glasso(S: SampleCorrelation | np.ndarray, lam: float, tol: float = 1e-4,
           max_iter: int = 200, *, strict: bool = True) -> PrecisionEstimate:
    """L1-penalized Gaussian precision estimate with unpenalized diagonal.

    Block coordinate descent over rows/columns of the precision matrix: each
    block step minimizes the penalized negative log-likelihood exactly in
    that row given the rest, through a coordinate-descent lasso, so the
    objective improves monotonically.  Iteration stops when the mean
    absolute change of the precision matrix over a sweep is below ``tol``
    and the duality gap is at most ``tol``.
    """
    gene_ids = None
    if isinstance(S, SampleCorrelation):
        gene_ids = S.gene_ids
        S = S.S
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    if S.shape != (p, p) or not np.allclose(S, S.T, atol=1e-12):
        raise ValueError("S must be a symmetric square matrix")
    if lam < 0 or not math.isfinite(lam):
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        L = np.linalg.cholesky(S)
        Linv = np.linalg.inv(L)
        theta = Linv.T @ Linv
        theta = 0.5 * (theta + theta.T)
        return PrecisionEstimate(theta, 0.0, duality_gap(S, theta, S, 0.0), 0, True,
                                 [glasso_objective(S, theta, 0.0)], gene_ids)

    s_diag = np.diag(S).copy()
    theta = np.diag(1.0 / s_diag)
    W = np.diag(s_diag)
    trace = [glasso_objective(S, theta, lam)]
    off_max = np.max(np.abs(S - np.diag(s_diag))) if p > 1 else 0.0
    if off_max <= lam:
        # diagonal estimate already satisfies the optimality conditions
        return PrecisionEstimate(theta, lam, duality_gap(S, theta, W, lam), 0, True, trace, gene_ids)

    inner_tol = min(tol, 1e-6) * 1e-3
    converged = False
    gap = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        theta_old = theta.copy()
        for j in range(p):
            idx = np.r_[0:j, j + 1:p]
            w12 = W[idx, j]
            A = W[np.ix_(idx, idx)] - np.outer(w12, w12) / W[j, j]
            A = 0.5 * (A + A.T)
            s22 = s_diag[j]
            gamma = _lasso_block(s22 * A, S[idx, j], lam, theta[idx, j].copy(), inner_tol)
            Ag = A @ gamma
            theta22 = 1.0 / s22 + gamma @ Ag
            theta[idx, j] = gamma
            theta[j, idx] = gamma
            theta[j, j] = theta22
            new_w12 = -Ag * s22
            W[np.ix_(idx, idx)] = A + np.outer(new_w12, new_w12) / s22
            W[idx, j] = new_w12
            W[j, idx] = new_w12
            W[j, j] = s22
        trace.append(glasso_objective(S, theta, lam))
        change = np.mean(np.abs(theta - theta_old))
        if change < tol:
            gap = duality_gap(S, theta, W, lam)
            if gap <= tol:
                converged = True
                break
    if not converged:
        gap = duality_gap(S, theta, W, lam)
    theta = 0.5 * (theta + theta.T)
    np.linalg.cholesky(theta)  # raises LinAlgError unless positive definite
    est = PrecisionEstimate(theta, lam, gap, it, converged, trace, gene_ids)
    rho = est.partial_corr
    off = rho[~np.eye(p, dtype=bool)]
    assert np.all(np.abs(off) < 1), "partial correlations must lie strictly inside (-1, 1)"
    if not converged:
        if strict:
            raise GlassoNotConverged(est)
        log.warning("graphical lasso stopped after %d sweeps, gap %.3g", it, gap)
    return est


def ric_lambda(X: np.ndarray | FoldChangeMatrix, reps: int = 20, seed: int = 0,
               statistic: str = "max") -> float:
    """Penalty from a permutation null of the largest absolute correlation.

    Each replicate permutes the rows of every column independently, which
    destroys cross-column dependence, and records the largest off-diagonal
    absolute correlation.  ``statistic`` combines the replicates: ``"max"``
    (the most conservative null value, default) or ``"mean"``.
    """
    if isinstance(X, FoldChangeMatrix):
        X = X.values
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < 3:
        raise ValueError(f"need >= 3 rows, got {n}")
    if p < 2:
        raise ValueError("need >= 2 columns")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if statistic not in ("max", "mean"):
        raise ValueError("statistic must be 'max' or 'mean'")
    sd = X.std(axis=0)
    X = X[:, sd > 0]
    Z = (X - X.mean(axis=0)) / X.std(axis=0)
    rng = np.random.default_rng(seed)
    null = np.empty(reps)
    for r in range(reps):
        P = rng.permuted(Z, axis=0)
        C = correlation(P)
        np.fill_diagonal(C, 0.0)
        null[r] = np.abs(C).max()
    return float(null.max() if statistic == "max" else null.mean())


@dataclass(frozen=True)
class GeneEdge:
    source: str
    target: str
    partial_corr: float

    @property
    def sign(self) -> int:
        return 1 if self.partial_corr > 0 else -1


def gene_edges(estimate: PrecisionEstimate, gene_ids: Sequence[str] | None = None) -> list[GeneEdge]:
    """One signed edge per nonzero off-diagonal precision entry, weighted by partial correlation."""
    ids = tuple(gene_ids) if gene_ids is not None else estimate.gene_ids
    if ids is None:
        ids = tuple(str(i) for i in range(estimate.theta.shape[0]))
    rho = estimate.partial_corr
    return [GeneEdge(ids[i], ids[j], float(rho[i, j])) for i, j in estimate.support]


def write_gene_edges(edges: Sequence[GeneEdge], path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("source\ttarget\tpartial_corr\tsign\n")
    for e in edges:
        buf.write(f"{e.source}\t{e.target}\t{e.partial_corr!r}\t{e.sign}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_gene_edges(path: str | Path) -> list[GeneEdge]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines[1:]:
        s, t, rho, _sign = line.split("\t")
        out.append(GeneEdge(s, t, float(rho)))
    return out
