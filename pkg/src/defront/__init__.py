"""Profile-face synthesis as a training-time augmentation for face embeddings."""

__version__ = "0.1.0"

from .errors import DefrontError  # noqa: E402

__all__ = ["DefrontError", "__version__"]
