"""Skull stripping for rodent fMRI: watershed masks, a numpy U-Net, and a CLI."""

__version__ = "0.1.0"
