"""Local Gram Flow motion distillation at desk scale."""

__version__ = "0.1.0"
