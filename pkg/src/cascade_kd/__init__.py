"""Early-exit compressed-video classification with progressive distillation and weighted ensembles."""

__version__ = "0.1.0"
