"""GSURE-based model adaptation of pre-trained MRI reconstruction networks."""

__version__ = "0.1.0"
