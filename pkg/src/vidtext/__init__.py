"""Desk-scale video-text retrieval: contrastive dual encoders, momentum
distillation, fusion matching and dual-softmax inference on a small
numpy autodiff core."""

__version__ = "0.1.0"
