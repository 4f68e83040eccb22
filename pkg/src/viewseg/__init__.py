"""Cross-view temporal action segmentation at desk scale.

A Siamese-trained multi-stage dilated TCN with sequence-level and
action-level cross-view similarity losses, a synthetic multi-view benchmark
generator, the standard segmental evaluation metrics, and a reproducible
experiment CLI. Everything runs on a from-scratch reverse-mode autodiff
engine over float64 numpy arrays.
"""

__version__ = "0.1.0"
