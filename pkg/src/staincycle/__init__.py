"""Unsupervised stain-to-stain translation with cycle-consistent training,
self-supervised segmentation guidance, extra-channel reconstruction, and
instance-level Dice evaluation."""

__version__ = "0.1.0"
