"""Multi-channel speech enhancement with a selective state-space generator."""

__version__ = "0.1.0"
