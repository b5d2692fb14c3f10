"""Ranking-aware uncertainty training engine for text-guided image retrieval.

Everything runs on precomputed embeddings: the package trains small
uncertainty modules on top of frozen features, evaluates retrieval quality,
and reads/writes its own binary embedding and checkpoint formats.
"""

__version__ = "0.1.0"
