"""Two-stage phoneme-and-audio-driven lip synthesis at desk scale."""

__version__ = "0.1.0"
