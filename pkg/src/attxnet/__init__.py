"""Multimodal time-series classification with attentive cross-modal connections."""

__version__ = "0.1.0"
