"""Dissimilarity-regularized ensembles of small convolutional classifiers."""

__version__ = "0.1.0"
