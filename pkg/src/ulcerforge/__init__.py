"""Desk-scale diffusion workbench for wound-like images.

Train a small denoising diffusion model, generate and curate samples,
score real-vs-synthetic similarity with FID/KID over pluggable
embeddings, and run blind human rating studies with the matching
statistics.
"""

__version__ = "0.1.0"
