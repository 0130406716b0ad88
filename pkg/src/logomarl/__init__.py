"""Offline multi-agent RL with a local-to-global world model and uncertainty-weighted synthetic replay."""

__version__ = "0.1.0"
