"""Heatmap-supervised particle picking for cryo-electron tomograms with
teacher/student semi-supervised co-training."""

__version__ = "0.1.0"
