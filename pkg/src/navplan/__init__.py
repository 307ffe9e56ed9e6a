"""Batch harness for navigator/driver VLM motion-planning pipelines."""

__version__ = "0.1.0"
