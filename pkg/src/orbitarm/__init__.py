"""Dual-agent coordinated manipulation planning for a free-floating spacecraft-manipulator."""

__version__ = "0.1.0"
