"""Ephemeral YARN-style clusters provisioned inside batch scheduler allocations."""

__version__ = "0.1.0"
