"""Identity-aware memory and prompt-transition engine for streaming video generation."""

__version__ = "0.1.0"
