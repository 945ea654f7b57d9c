"""Generative sequential recommender with twin-tower residual-quantized
semantic IDs, a compact autoregressive backbone, and trie-constrained
decoding."""

from .config import RunConfig, load_config

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "__version__"]
