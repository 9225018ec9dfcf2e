"""Desk-scale sports-video captioning, action recognition and player identification.

A numpy autodiff core drives ViT/TimeSformer-style encoders, a coarse/fine/cross
transformer with task-specific decoder heads, caption and sequence metrics, a
play-by-play curation pipeline, and a deterministic synthetic corpus generator.
"""

__version__ = "0.1.0"
