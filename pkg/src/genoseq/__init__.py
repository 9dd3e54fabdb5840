"""Genotype imputation by matrix factorization and phenotype prediction with RNNs."""

__version__ = "0.1.0"
