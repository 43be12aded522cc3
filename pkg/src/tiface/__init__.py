"""Tensorial (T-Face) and implicit-surface (I-Face) radiance fields for multi-view head capture."""
from ._accel import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]
