"""Tail-head token alignment for source-free cross-domain few-shot fine-tuning of a toy CLIP."""

__version__ = "0.1.0"
