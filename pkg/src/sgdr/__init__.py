"""Unsupervised cross-modality segmentation through disentangled content/style
representations, with a synthetic phantom benchmark."""

__version__ = "0.1.0"
