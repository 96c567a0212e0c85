"""Desk-scale mixture-of-experts continual pre-training lab."""
__version__ = "0.1.0"
