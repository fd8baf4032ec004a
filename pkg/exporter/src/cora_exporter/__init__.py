"""Desk-scale ConvNet trainer and exporter for the cora file formats."""

__version__ = "0.1.0"
