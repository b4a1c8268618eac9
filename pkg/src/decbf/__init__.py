"""Decentralized neural control barrier certificates for multi-agent control."""
__version__ = "0.1.0"
