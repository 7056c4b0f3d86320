"""Multimodal (text, image, metadata) ensemble for flagging unreliable social-network posts."""

__version__ = "0.1.0"


class ReintelError(Exception):
    """Base class for errors raised by this package."""
