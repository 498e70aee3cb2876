"""Bilingual streaming transducer toolkit.

Three architectures over a shared encoder/prediction trunk (shared joint,
per-language joints, per-language joints with attention language weighting),
a single combined-symbol beam search with dynamic language switching, a
three-stage training curriculum, and attention-weight analytics — all
runnable end to end on a synthetic two-language code-mixing corpus.
"""

__version__ = "0.1.0"
