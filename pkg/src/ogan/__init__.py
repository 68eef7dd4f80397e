"""Ontology-conditioned progressive GAN (O-GAN) at desk scale."""

__version__ = "0.1.0"
