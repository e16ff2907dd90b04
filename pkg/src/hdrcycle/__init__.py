"""Unpaired LDR <-> HDR translation with cycle-consistent feedback U-Nets."""

__version__ = "0.1.0"
