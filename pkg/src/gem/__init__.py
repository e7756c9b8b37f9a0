"""Relation-aware disentanglement at desk scale.

A small, fully seeded pipeline: synthetic scenes with known correlated
factors, an attribute-extraction branch trained with an adversarial
density-ratio objective, ordinal impact-score ranking of attribute pairs,
and a learned bidirectional relation graph feeding the decoder.
"""

__version__ = "0.1.0"
