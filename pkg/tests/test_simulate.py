from __future__ import annotations

import filecmp

import numpy as np
import pytest

from txnet.diffexpr import paired_logfc
from txnet.simulate import (ScenarioSpec, load_truth, oracle_glasso, partial_correlation,
                            planted_precision, simulate_counts, simulate_fc_from_precision, stream)


def test_poisson_when_dispersion_zero():
    sc = simulate_counts(ScenarioSpec(seed=1, n_subjects=250, n_genes=200, dispersion=0.0,
                                      subject_sd=0.0, lib_size_min=4e6, lib_size_max=4e6))
    Y = sc.counts.counts.astype(float)
    # every sample has the same expected counts, so rows are iid Poisson
    ratio = Y.var(axis=1, ddof=1) / Y.mean(axis=1)
    assert 0.9 <= ratio.mean() <= 1.1
    assert Y.size >= 1e5


def test_no_change_gives_zero_mean_fold():
    sc = simulate_counts(ScenarioSpec(seed=2, n_subjects=200, n_genes=100, n_de=20,
                                      de_log2_fold=0.0, dispersion=0.05))
    fc = paired_logfc(sc.counts, sc.meta, list(sc.de_truth), "1-2")
    # per-gene means have standard error ~0.03 here; the bound applies to the overall mean
    assert abs(fc.values.mean()) < 0.05


def test_fixed_seed_is_byte_identical(tmp_path):
    spec = ScenarioSpec(seed=3, n_subjects=10, n_genes=50, n_de=10, precision_pattern="block",
                        block_size=5, fc_sd=0.5, clinical_links="G00001:bmi:0.5", marker_gene="HBB",
                        n_contaminated=1, n_outliers=1)
    simulate_counts(spec).write(tmp_path / "a")
    simulate_counts(spec).write(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert match == names and not mismatch and not errors


def test_truth_round_trip(tmp_path):
    spec = ScenarioSpec(seed=4, n_subjects=10, n_genes=40, n_de=8, precision_pattern="chain",
                        clinical_links="G00002:waist:-1.0", marker_gene="HBB", n_contaminated=2)
    sc = simulate_counts(spec)
    sc.write(tmp_path)
    t = load_truth(tmp_path)
    assert t["de"] == sc.de_truth
    assert t["edges"] == sc.edge_truth
    assert t["links"] == sc.link_truth
    assert {s for s, k in t["samples"].items() if k == "contaminated"} == set(sc.contaminated)
    assert ScenarioSpec.from_text((tmp_path / "scenario.txt").read_text()) == spec


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(seed=1, n_genes=10, n_de=20)
    with pytest.raises(ValueError):
        ScenarioSpec(seed=1, n_de=2, clinical_links="G00009:bmi:1")
    with pytest.raises(ValueError):
        ScenarioSpec.from_text("n_genes=10\n")


@pytest.mark.parametrize("pattern", ["chain", "block", "random"])
def test_planted_precision_dominant(pattern):
    theta = planted_precision(30, pattern, stream(0, "t"), block_size=6, degree=4)
    off = np.abs(theta).sum(1) - np.diag(theta)
    assert np.all(off <= 0.9 * np.diag(theta) + 1e-12)
    np.linalg.cholesky(theta)


def test_chain_partial_correlations_monte_carlo():
    fc, truth, theta = simulate_fc_from_precision(6, "chain", 2000, seed=5, edge_max=0.4)
    est = np.linalg.inv(np.cov(fc.values, rowvar=False))
    assert np.abs(partial_correlation(est) - partial_correlation(theta)).max() < 0.1
    assert len(truth) == 5


def test_identity_precision_uncorrelated():
    fc, truth, _ = simulate_fc_from_precision(10, "identity", 1000, seed=6)
    C = np.corrcoef(fc.values, rowvar=False)
    assert np.abs(C - np.eye(10)).max() < 0.15 and not truth


def test_oracle_trivial_cases():
    np.testing.assert_allclose(oracle_glasso(np.eye(4), 0.2), np.eye(4), atol=1e-8)
    S = np.full((3, 3), 0.3) + 0.7 * np.eye(3)
    np.testing.assert_allclose(oracle_glasso(S, 10.0), np.eye(3), atol=1e-8)
