"""Disk-backed similarity search over fixed-length data series."""
from .config import IndexConfig
from .estimator import DumpyIndex, SAXTransformer

__all__ = ["DumpyIndex", "IndexConfig", "SAXTransformer"]
__version__ = "0.1.0"
