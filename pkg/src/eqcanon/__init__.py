"""Exactly equivariant models from unconstrained predictors via learned canonicalization."""

__version__ = "0.1.0"
