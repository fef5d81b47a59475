"""Learnable sinc-filter front-end and hybrid CTC/attention phone recognition for MDD."""

__version__ = "0.1.0"
