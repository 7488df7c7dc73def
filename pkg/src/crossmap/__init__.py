"""Instruction-guided navigation on graphs with a cross-modal path transformer and speaker."""

__version__ = "0.1.0"
