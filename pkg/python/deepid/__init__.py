from __future__ import annotations

__version__ = "0.1.0"

from .errors import DeepIdError

__all__ = ["DeepIdError", "__version__"]
