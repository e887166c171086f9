"""Black-box property inference against personalized load forecasters."""

__version__ = "1.0.0"
