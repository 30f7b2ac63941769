"""4D deforming-shape generation: disentangled shape/motion neural fields,
SVD dictionary fine-tuning, and token-space diffusion."""

__version__ = "0.1.0"
