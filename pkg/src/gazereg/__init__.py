"""Gaze-regularized attention training for a toy vision-language-action policy."""

__version__ = "0.1.0"
