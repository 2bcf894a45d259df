"""Pallet detection, sequential confirmation, and tracking in 2D laser scans."""

__version__ = "0.1.0"
