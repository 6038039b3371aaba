"""Cross-task unexploitable example generation with a flat-minima-oriented
meta training and testing scheme, at desk scale."""

__version__ = "0.1.0"
