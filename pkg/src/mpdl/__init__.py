"""Tissue-signature segmentation of multiparametric MRI with a small patch CNN."""

__version__ = "0.1.0"
