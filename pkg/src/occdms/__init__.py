"""Occlusion-aware driver monitoring: imaging, curation, identification and the RGB/IR pipeline."""

__version__ = "0.1.0"
