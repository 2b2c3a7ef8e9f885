"""Desk-scale unsupervised multichannel speech separation with mask-based MVDR."""

__version__ = "0.1.0"
