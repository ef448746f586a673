"""Identity-preserving facial age editing: a desk-scale latent diffusion
fine-tuning stack plus the biometric verification evaluation harness."""

__version__ = "0.1.0"
