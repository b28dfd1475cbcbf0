"""Pooling-regularized graph attention networks for connectome classification."""
__version__ = "0.1.0"
