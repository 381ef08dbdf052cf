"""Dual-stage test-time adaptation for multi-coil MRI reconstruction."""

__version__ = "0.1.0"
