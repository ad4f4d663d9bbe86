"""Canonical-orientation cardiac segmentation networks with a pure numpy
reverse-mode autodiff core."""

__version__ = "0.1.0"
