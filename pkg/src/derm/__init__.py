"""Decoupled entity-representation pipeline.

Upstream multi-tower training with a bias-corrected contrastive objective,
a daily embedding lifecycle (dedup, back inference, aggregation, retention),
a key-value embedding store with network serving, and downstream CTR/CVR
consumers evaluated by exact ROC/PR AUC.
"""

__version__ = "0.1.0"
