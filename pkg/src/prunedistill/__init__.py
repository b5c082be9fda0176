"""Magnitude pruning, knowledge distillation and CKA analysis for a toy document transformer."""

__version__ = "0.1.0"
