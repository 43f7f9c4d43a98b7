"""Contrastive quality-invariance learning for surveillance face anti-spoofing."""

__version__ = "0.1.0"
