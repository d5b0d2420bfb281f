"""Miniature stereo matching with local similarity patterns and self-reassembling refinement."""

__version__ = "0.1.0"
