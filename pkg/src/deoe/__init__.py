"""Open-world object detection on event streams with potential-sample mining."""

__version__ = "0.1.0"
