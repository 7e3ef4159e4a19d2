"""Functional simulator of three-tier intra-process isolation on Arm CCA."""

__version__ = "0.1.0"
