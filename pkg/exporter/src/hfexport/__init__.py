"""Checkpoint exporter: pretrained transformer weights plus streamed
gradient and activation statistics, packaged for the pruning engine."""

from hfexport.export import ExportError, ExportManifest, export

__all__ = ["ExportError", "ExportManifest", "export"]

__version__ = "0.1.0"
