"""Model inversion of frozen vision-language and vision-only models."""

__version__ = "0.1.0"
