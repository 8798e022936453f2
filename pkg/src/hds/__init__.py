"""Noisy dynamics of hybrid dressed-state spin qubits."""

__version__ = "0.1.0"
