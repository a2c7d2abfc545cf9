"""Checkpoint converter: ecosystem ViT-B/16 parameter names and layouts in,
VITW containers out. Owns all source-format parsing so the consuming
toolkit only ever reads VITW."""

__version__ = "0.1.0"
