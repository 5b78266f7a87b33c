"""Radio mapping and multi-robot data-collection planning."""
__version__ = "0.1.0"
