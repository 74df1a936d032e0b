"""Class-agnostic point-cloud instance segmentation by learned region growth."""

__version__ = "0.1.0"
