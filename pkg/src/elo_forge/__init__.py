"""Layer-selective continual pretraining for small decoder-only models."""

__version__ = "0.1.0"
