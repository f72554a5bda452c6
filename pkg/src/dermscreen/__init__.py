"""Skin lesion detection, malignancy triage and evaluation toolkit."""

__version__ = "0.1.0"
