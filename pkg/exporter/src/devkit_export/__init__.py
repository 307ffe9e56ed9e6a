"""nuScenes-format devkit tables to scenelog/1 exporter."""

__version__ = "0.1.0"
