"""Training-free open-vocabulary segmentation with generated visual prototypes."""

__version__ = "0.1.0"
