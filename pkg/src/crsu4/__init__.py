"""Cross-resonance SU(4) gate synthesis via unitary process tomography."""

__version__ = "0.1.0"
