"""Supervised fine-tuning runner for image/text bail-decision datasets.

Consumes the exporter's JSONL records and manifest, trains with the
manifest's hyperparameters, keeps vision-scope parameters frozen, and
zeroes the attention mask over every image-placeholder position so the
model learns from the facts rather than the face.
"""

__version__ = "0.1.0"
