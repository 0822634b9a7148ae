"""Batch audit harness for multimodal bail-decision prediction.

Builds paired image/case-fact evaluation sets, runs chat-style model
backends (real or mock) under five configurations, and computes
stratified fairness metrics over the predictions.
"""

__version__ = "0.1.0"
