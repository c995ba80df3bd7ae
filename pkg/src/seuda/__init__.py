"""Unsupervised cross-domain adaptation for chest X-ray lung segmentation."""

__version__ = "0.1.0"
