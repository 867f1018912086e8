"""Placement, batching and elastic resizing for multi-stage ML pipelines on partitioned GPUs."""

__version__ = "0.1.0"

from .errors import SlopipeError  # noqa: F401
from .simloop import EventLoop  # noqa: F401
