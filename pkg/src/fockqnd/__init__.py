"""Conditional master-equation simulator for phonon-number measurement of a
nanomechanical resonator read out through a qubit and a microwave cavity."""

__version__ = "0.1.0"
