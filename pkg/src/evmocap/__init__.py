"""Monocular event-camera motion capture with blinking LED markers."""

__version__ = "0.1.0"

from .events import Event, EventArray, EventBatch, SensorGeometry  # noqa: F401
