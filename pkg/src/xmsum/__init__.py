"""Extreme multimodal summarization engine.

Condenses a document/video embedding pair into a one-sentence extract and
a single cover frame, trained without labels via optimal-transport losses.
"""

__version__ = "0.1.0"
