"""HierCas: temporal graph attention for cascade popularity prediction."""

__version__ = "0.1.0"
