"""Dynamic (multi-frame) cell counting on time-lapse microscopy."""

__version__ = "0.1.0"
