"""Desk-scale simulator of one-shot federated learning with diffusion-based
data synthesis. Pure numpy; every run is a deterministic function of its
config and master seed.
"""

__version__ = "0.1.0"
