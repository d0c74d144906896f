"""Two-stage vertebra detection and localization for spine CT."""

__version__ = "0.1.0"
