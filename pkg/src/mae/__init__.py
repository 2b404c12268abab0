"""Musculoskeletal autoencoder: joint estimation, control and simulation of a
tendon-driven arm through one masked autoencoder."""

__version__ = "0.1.0"
