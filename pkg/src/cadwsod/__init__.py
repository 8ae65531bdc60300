"""Weakly supervised object detection with cascade attentive dropout and a
global context module, on a small numpy autodiff engine."""

__version__ = "0.1.0"
