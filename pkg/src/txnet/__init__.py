"""Paired transcriptome differential expression, sparse gene networks and
clinical-variable association for repeated-measures count data."""

__version__ = "0.1.0"
