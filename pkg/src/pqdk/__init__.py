"""Prune -> INT8 QAT -> distill compression toolkit on a small numpy training engine."""

__version__ = "0.1.0"
