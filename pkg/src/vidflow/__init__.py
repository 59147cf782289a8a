"""Desk-scale latent video diffusion.

A causal video VAE with a denoising decoder, a DiT-style transformer with
three-axis rotary embeddings, rectified-flow training and sampling, and the
analysis tooling around them. Everything runs on a small numpy-backed
autodiff substrate; no GPU framework involved.
"""

from .autodiff import Tensor, Rng, finite_difference_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Rng", "finite_difference_check", "__version__"]
