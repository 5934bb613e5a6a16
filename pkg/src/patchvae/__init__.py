"""PatchVAE: unsupervised mid-level part representations with a patch-level VAE."""

__version__ = "0.1.0"
