"""Toy-scale network adapter for the pseudo-label exchange format."""

from .models import TapClassifier, TinySegmenter
from .train import export_features, train_classifier, train_segmenter

__version__ = "0.1.0"
