"""Kinetic transport engine and stretching-lemma verification harness."""

__version__ = "0.1.0"
