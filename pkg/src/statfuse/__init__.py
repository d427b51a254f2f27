"""Statistical data fusion of donor survey variables onto recipient microdata."""

__version__ = "0.1.0"
