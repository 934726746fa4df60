"""Autoregressive generation of modular grid assets.

Subpackages are imported lazily by callers; this module only exposes the
version and the most common entry points.
"""

from .asset_model import Asset, PhraseBundle, Primitive, validate_asset
from .tokenizer import OrderingMethod, detokenize, reorder, tokenize

__version__ = "0.1.0"

__all__ = [
    "Asset",
    "OrderingMethod",
    "PhraseBundle",
    "Primitive",
    "detokenize",
    "reorder",
    "tokenize",
    "validate_asset",
]
