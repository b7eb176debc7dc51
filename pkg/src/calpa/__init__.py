"""Channel-pruning-assisted architecture search for residual steganalyzers."""

__version__ = "0.1.0"
