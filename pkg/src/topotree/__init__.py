"""Topology-metric reconstruction of labeled vessel trees on synthetic phantoms."""

__version__ = "0.1.0"
