"""Domain adaptation benchmark for two-class SEM defect classification."""

__version__ = "0.1.0"
