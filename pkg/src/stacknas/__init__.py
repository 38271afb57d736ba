"""Differentiable search over stacked GNN architectures."""

__version__ = "0.1.0"
