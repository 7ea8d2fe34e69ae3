"""Fault detection and diagnosis with an autoencoder-augmented MC-dropout classifier."""

__version__ = "0.1.0"
